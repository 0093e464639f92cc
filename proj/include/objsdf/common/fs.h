#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace objsdf {

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a truncated file.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

std::string read_file(const std::filesystem::path& path);

}  // namespace objsdf
