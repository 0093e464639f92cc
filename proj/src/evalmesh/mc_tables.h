#pragma once

#include <cstdint>

namespace objsdf::mesh::detail {

// Cube corners: 0..3 walk the bottom face, 4..7 sit above them.
// Edges: 0..3 bottom loop, 4..7 top loop, 8..11 verticals.
extern const std::int8_t kTriTable[256][16];

}  // namespace objsdf::mesh::detail
