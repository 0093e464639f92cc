#include "objsdf/evalmesh/evalmesh.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include "mc_tables.h"
#include "objsdf/common/error.h"
#include "objsdf/common/vecmath.h"
#include "objsdf/common/fs.h"
#include "objsdf/common/parallel.h"
#include "objsdf/common/rng.h"
#include "objsdf/training/training.h"

namespace objsdf::mesh {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

double TriangleMesh::area() const {
  double a = 0.0;
  for (const auto& t : triangles)
    a += 0.5 * (vertices[static_cast<std::size_t>(t[1])] - vertices[static_cast<std::size_t>(t[0])])
                   .cross(vertices[static_cast<std::size_t>(t[2])] - vertices[static_cast<std::size_t>(t[0])])
                   .norm();
  return a;
}

void TriangleMesh::validate() const {
  const auto n = static_cast<std::int32_t>(vertices.size());
  for (std::size_t i = 0; i < triangles.size(); ++i) {
    const auto& t = triangles[i];
    for (int c = 0; c < 3; ++c)
      if (t[c] < 0 || t[c] >= n) throw Error("mesh: triangle " + std::to_string(i) + " has an index out of range");
    const Vec3 cr = (vertices[static_cast<std::size_t>(t[1])] - vertices[static_cast<std::size_t>(t[0])])
                        .cross(vertices[static_cast<std::size_t>(t[2])] - vertices[static_cast<std::size_t>(t[0])]);
    if (!(cr.norm() > 0.0)) throw Error("mesh: triangle " + std::to_string(i) + " has zero area");
  }
}

Vec3 Grid::corner(int i, int j, int k) const {
  const Vec3 h = cell_size();
  return box.lo + Vec3(i * h.x(), j * h.y(), k * h.z());
}

Grid sample_grid(const MultiField& field, const geo::BBox& box, int resolution) {
  if (resolution < 2) throw Error("marching cubes: resolution must be >= 2");
  Grid g;
  g.box = box;
  g.resolution = resolution;
  const int n = resolution + 1;
  const auto total = static_cast<std::int64_t>(n) * n * n;
  constexpr std::int64_t kChunk = 16384;
  const std::int64_t chunks = (total + kChunk - 1) / kChunk;
  std::vector<Matrix> parts(static_cast<std::size_t>(chunks));
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const std::int64_t b = static_cast<std::int64_t>(c) * kChunk;
    const std::int64_t e = std::min(total, b + kChunk);
    Matrix pts(e - b, 3);
    for (std::int64_t q = b; q < e; ++q) {
      const int i = static_cast<int>(q % n), j = static_cast<int>((q / n) % n), k = static_cast<int>(q / (n * n));
      pts.row(q - b) = g.corner(i, j, k).transpose();
    }
    parts[c] = field(pts);
    if (parts[c].rows() != e - b) throw ShapeError("sample_grid: field returned the wrong number of rows");
  });
  g.values.resize(total, parts.front().cols());
  for (std::int64_t c = 0; c < chunks; ++c) g.values.middleRows(c * kChunk, parts[static_cast<std::size_t>(c)].rows()) = parts[static_cast<std::size_t>(c)];
  if (!all_finite(g.values)) throw NonFiniteError("grid", 0, "field value");
  return g;
}

namespace {

constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const Grid& grid, int channel) {
  if (channel < 0 || channel >= grid.values.cols()) throw Error("marching cubes: channel out of range");
  const int res = grid.resolution;
  const int n = res + 1;
  auto idx = [n](int i, int j, int k) { return static_cast<std::int64_t>(i) + static_cast<std::int64_t>(n) * (j + static_cast<std::int64_t>(n) * k); };
  auto val = [&](std::int64_t q) { return grid.values(q, channel); };

  TriangleMesh mesh;
  std::unordered_map<std::int64_t, std::int32_t> welded;
  // Key space: 4 * corner + axis for edge crossings, 4 * corner + 3 for a
  // crossing that sits exactly on a corner.
  auto vertex_on_edge = [&](std::int64_t qa, std::int64_t qb, const Vec3& pa, const Vec3& pb) -> std::int32_t {
    const double va = val(qa), vb = val(qb);
    std::int64_t key;
    Vec3 p;
    if (va == 0.0) {
      key = 4 * qa + 3;
      p = pa;
    } else if (vb == 0.0) {
      key = 4 * qb + 3;
      p = pb;
    } else {
      const std::int64_t lo = std::min(qa, qb);
      const std::int64_t d = std::max(qa, qb) - lo;
      const int axis = d == 1 ? 0 : (d == n ? 1 : 2);
      key = 4 * lo + axis;
      // Interpolate from the lower corner so the shared edge gives one point.
      const bool a_low = qa < qb;
      const double v0 = a_low ? va : vb, v1 = a_low ? vb : va;
      const Vec3& p0 = a_low ? pa : pb;
      const Vec3& p1 = a_low ? pb : pa;
      p = p0 + (v0 / (v0 - v1)) * (p1 - p0);
    }
    auto [it, inserted] = welded.try_emplace(key, static_cast<std::int32_t>(mesh.vertices.size()));
    if (inserted) mesh.vertices.push_back(p);
    return it->second;
  };

  const Vec3 h = grid.cell_size();
  for (int k = 0; k < res; ++k) {
    for (int j = 0; j < res; ++j) {
      for (int i = 0; i < res; ++i) {
        std::int64_t q[8];
        double v[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          q[c] = idx(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]);
          v[c] = val(q[c]);
          if (v[c] < 0.0) cube |= 1 << c;
        }
        if (cube == 0 || cube == 255) continue;
        const Vec3 origin = grid.corner(i, j, k);
        Vec3 p[8];
        for (int c = 0; c < 8; ++c) p[c] = origin + Vec3(kCorner[c][0] * h.x(), kCorner[c][1] * h.y(), kCorner[c][2] * h.z());
        std::int32_t edge_vertex[12];
        std::fill(std::begin(edge_vertex), std::end(edge_vertex), -1);
        const std::int8_t* tri = detail::kTriTable[cube];
        for (int t = 0; tri[t] >= 0; t += 3) {
          std::array<std::int32_t, 3> ids{};
          for (int c = 0; c < 3; ++c) {
            const int e = tri[t + c];
            if (edge_vertex[e] < 0) {
              const int a = kEdge[e][0], b = kEdge[e][1];
              edge_vertex[e] = vertex_on_edge(q[a], q[b], p[a], p[b]);
            }
            ids[static_cast<std::size_t>(c)] = edge_vertex[e];
          }
          if (ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2]) continue;
          const Vec3& a = mesh.vertices[static_cast<std::size_t>(ids[0])];
          const Vec3& b = mesh.vertices[static_cast<std::size_t>(ids[1])];
          const Vec3& c = mesh.vertices[static_cast<std::size_t>(ids[2])];
          const Vec3 nrm = (b - a).cross(c - a);
          if (!(nrm.norm() > 0.0)) continue;
          // Trilinear gradient at the centroid decides the winding.
          const Vec3 u = (((a + b + c) / 3.0) - origin).cwiseQuotient(h).cwiseMax(0.0).cwiseMin(1.0);
          const double x = u.x(), y = u.y(), z = u.z();
          const double gx = (1 - y) * (1 - z) * (v[1] - v[0]) + y * (1 - z) * (v[2] - v[3]) +
                            (1 - y) * z * (v[5] - v[4]) + y * z * (v[6] - v[7]);
          const double gy = (1 - x) * (1 - z) * (v[3] - v[0]) + x * (1 - z) * (v[2] - v[1]) +
                            (1 - x) * z * (v[7] - v[4]) + x * z * (v[6] - v[5]);
          const double gz = (1 - x) * (1 - y) * (v[4] - v[0]) + x * (1 - y) * (v[5] - v[1]) +
                            x * y * (v[6] - v[2]) + (1 - x) * y * (v[7] - v[3]);
          const Vec3 grad(gx / h.x(), gy / h.y(), gz / h.z());
          if (nrm.dot(grad) < 0.0) std::swap(ids[1], ids[2]);
          mesh.triangles.push_back(ids);
        }
      }
    }
  }

  // Drop vertices no surviving triangle uses.
  std::vector<std::int32_t> remap(mesh.vertices.size(), -1);
  std::vector<Vec3> kept;
  for (auto& t : mesh.triangles) {
    for (auto& id : t) {
      auto& r = remap[static_cast<std::size_t>(id)];
      if (r < 0) {
        r = static_cast<std::int32_t>(kept.size());
        kept.push_back(mesh.vertices[static_cast<std::size_t>(id)]);
      }
      id = r;
    }
  }
  mesh.vertices = std::move(kept);
  return mesh;
}

TriangleMesh marching_cubes(const BatchField& field, const geo::BBox& box, int resolution) {
  const Grid g = sample_grid([&](const Matrix& pts) { return Matrix(field(pts)); }, box, resolution);
  return marching_cubes(g, 0);
}

TriangleMesh extract_object_mesh(const fields::FieldModel& model, int object_id, const geo::BBox& box,
                                 int resolution) {
  return extract_object_mesh(render::NeuralField(model), object_id, box, resolution);
}

TriangleMesh extract_object_mesh(const render::ImplicitField& field, int object_id, const geo::BBox& box,
                                 int resolution) {
  if (object_id < 0 || object_id >= field.object_count())
    throw Error("extract_object_mesh: object id " + std::to_string(object_id) + " outside [0," +
                std::to_string(field.object_count()) + ")");
  const Grid g = sample_grid(
      [&](const Matrix& pts) { return Matrix(field.object_sdf(pts).col(object_id)); }, box, resolution);
  return marching_cubes(g, 0);
}

ExtractedMeshes extract_all_meshes(const render::ImplicitField& field, const geo::BBox& box, int resolution) {
  const int k = field.object_count();
  const Grid g = sample_grid(
      [&](const Matrix& pts) {
        const Matrix d = field.object_sdf(pts);
        Matrix out(d.rows(), k + 1);
        out.leftCols(k) = d;
        out.col(k) = d.rowwise().minCoeff();
        return out;
      },
      box, resolution);
  ExtractedMeshes m;
  for (int i = 0; i < k; ++i) m.objects.push_back(marching_cubes(g, i));
  m.scene = marching_cubes(g, k);
  return m;
}

Matrix sample_surface(const TriangleMesh& mesh, int n, std::uint64_t seed) {
  if (mesh.empty() || n <= 0) return Matrix(0, 3);
  std::vector<double> cum(mesh.triangles.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    acc += 0.5 * (mesh.vertices[static_cast<std::size_t>(t[1])] - mesh.vertices[static_cast<std::size_t>(t[0])])
                     .cross(mesh.vertices[static_cast<std::size_t>(t[2])] - mesh.vertices[static_cast<std::size_t>(t[0])])
                     .norm();
    cum[i] = acc;
  }
  Rng rng(derive_seed(seed, 0x5AF));
  Matrix out(n, 3);
  for (int s = 0; s < n; ++s) {
    const double r = uniform01(rng) * acc;
    const auto it = std::upper_bound(cum.begin(), cum.end(), r);
    const auto& t = mesh.triangles[static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cum.begin(), static_cast<std::ptrdiff_t>(cum.size()) - 1))];
    const double r1 = std::sqrt(uniform01(rng)), r2 = uniform01(rng);
    const Vec3 p = (1.0 - r1) * mesh.vertices[static_cast<std::size_t>(t[0])] +
                   r1 * (1.0 - r2) * mesh.vertices[static_cast<std::size_t>(t[1])] +
                   r1 * r2 * mesh.vertices[static_cast<std::size_t>(t[2])];
    out.row(s) = p.transpose();
  }
  return out;
}

Matrix crop_points(const Matrix& points, const geo::BBox& box) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    if (box.contains(points.row(i).transpose())) keep.push_back(i);
  Matrix out(static_cast<Eigen::Index>(keep.size()), 3);
  for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(keep[i]);
  return out;
}

namespace {

// One area-uniform point on the primitive's surface (local frame) plus the
// surface area the proposal covers.
struct Proposal {
  double area = 0.0;
  std::function<Vec3(Rng&)> draw;
};

Proposal primitive_proposal(const geo::Primitive& prim, const geo::BBox& crop) {
  Proposal pr;
  switch (prim.kind) {
    case geo::PrimitiveKind::kSphere: {
      const double r = prim.radius;
      pr.area = 4.0 * std::numbers::pi * r * r;
      pr.draw = [r](Rng& rng) {
        Vec3 u;
        do {
          u = Vec3(normal01(rng), normal01(rng), normal01(rng));
        } while (u.norm() < 1e-12);
        return Vec3(r * u.normalized());
      };
      break;
    }
    case geo::PrimitiveKind::kBox: {
      const Vec3 e = prim.half_extents;
      const double ax = 4.0 * e.y() * e.z(), ay = 4.0 * e.x() * e.z(), az = 4.0 * e.x() * e.y();
      pr.area = 2.0 * (ax + ay + az);
      pr.draw = [e, ax, ay, az](Rng& rng) {
        const double pick = uniform01(rng) * (ax + ay + az);
        const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
        Vec3 p;
        for (int c = 0; c < 3; ++c) p(c) = (2.0 * uniform01(rng) - 1.0) * e(c);
        p(axis) = uniform01(rng) < 0.5 ? -e(axis) : e(axis);
        return p;
      };
      break;
    }
    case geo::PrimitiveKind::kHalfSpace: {
      // Rectangle in the plane's local xy that covers the crop box.
      double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
      for (int c = 0; c < 8; ++c) {
        const Vec3 w(c & 1 ? crop.hi.x() : crop.lo.x(), c & 2 ? crop.hi.y() : crop.lo.y(),
                     c & 4 ? crop.hi.z() : crop.lo.z());
        const Vec3 l = prim.pose.to_local(w);
        lo_x = std::min(lo_x, l.x());
        hi_x = std::max(hi_x, l.x());
        lo_y = std::min(lo_y, l.y());
        hi_y = std::max(hi_y, l.y());
      }
      pr.area = (hi_x - lo_x) * (hi_y - lo_y);
      pr.draw = [=](Rng& rng) {
        return Vec3(lo_x + (hi_x - lo_x) * uniform01(rng), lo_y + (hi_y - lo_y) * uniform01(rng), 0.0);
      };
      break;
    }
  }
  return pr;
}

struct SurfaceDraw {
  std::vector<Vec3> points;
  std::int64_t attempts = 0;
  double proposal_area = 0.0;
};

// Draws proposals until `n` points pass `keep` (or the attempt cap is hit).
SurfaceDraw draw_surface(const geo::Primitive& prim, const geo::BBox& crop, int n, Rng& rng,
                         const std::function<bool(const Vec3&)>& keep) {
  const Proposal pr = primitive_proposal(prim, crop);
  SurfaceDraw out;
  out.proposal_area = pr.area;
  const std::int64_t cap = 200LL * std::max(n, 1000);
  while (static_cast<int>(out.points.size()) < n && out.attempts < cap) {
    const Vec3 w = prim.pose.to_world(pr.draw(rng));
    ++out.attempts;
    if (crop.contains(w) && keep(w)) out.points.push_back(w);
  }
  return out;
}

Matrix to_matrix(const std::vector<Vec3>& pts) {
  Matrix m(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return m;
}

}  // namespace

Matrix sample_primitive_surface(const geo::Primitive& prim, const geo::BBox& crop, int n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9121));
  return to_matrix(draw_surface(prim, crop, n, rng, [](const Vec3&) { return true; }).points);
}

Matrix sample_scene_surface(const geo::SceneSpec& scene, const geo::BBox& crop, int n, std::uint64_t seed) {
  const std::size_t k = scene.primitives.size();
  auto visible = [&](std::size_t self) {
    return [&scene, self](const Vec3& p) {
      for (std::size_t j = 0; j < scene.primitives.size(); ++j)
        if (j != self && geo::primitive_sdf(scene.primitives[j], p) < 0.0) return false;
      return true;
    };
  };
  // Pass 1 estimates each primitive's exposed area inside the crop.
  constexpr int kProbe = 20000;
  std::vector<double> exposed(k);
  for (std::size_t i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, 0x9122, i));
    const Proposal pr = primitive_proposal(scene.primitives[i], crop);
    int hits = 0;
    for (int s = 0; s < kProbe; ++s) {
      const Vec3 w = scene.primitives[i].pose.to_world(pr.draw(rng));
      if (crop.contains(w) && visible(i)(w)) ++hits;
    }
    exposed[i] = pr.area * hits / kProbe;
  }
  const double total = std::accumulate(exposed.begin(), exposed.end(), 0.0);
  if (!(total > 0.0)) return Matrix(0, 3);
  // Pass 2 draws counts in proportion to exposed area.
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < k; ++i) {
    const int ni = static_cast<int>(std::lround(n * exposed[i] / total));
    if (ni == 0) continue;
    Rng rng(derive_seed(seed, 0x9123, i));
    const auto d = draw_surface(scene.primitives[i], crop, ni, rng, visible(i));
    pts.insert(pts.end(), d.points.begin(), d.points.end());
  }
  return to_matrix(pts);
}

namespace {

using BPoint = bg::model::point<double, 3, bg::cs::cartesian>;
using Tree = bgi::rtree<std::pair<BPoint, std::size_t>, bgi::rstar<16>>;

Tree build_tree(const Matrix& pts) {
  std::vector<std::pair<BPoint, std::size_t>> v;
  v.reserve(static_cast<std::size_t>(pts.rows()));
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    v.emplace_back(BPoint(pts(i, 0), pts(i, 1), pts(i, 2)), static_cast<std::size_t>(i));
  return Tree(v.begin(), v.end());
}

double mean_nn_sq(const Matrix& from, const Tree& tree, const Matrix& to) {
  constexpr Eigen::Index kChunk = 4096;
  const Eigen::Index chunks = (from.rows() + kChunk - 1) / kChunk;
  std::vector<double> part(static_cast<std::size_t>(chunks), 0.0);
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const Eigen::Index b = static_cast<Eigen::Index>(c) * kChunk, e = std::min(from.rows(), b + kChunk);
    double s = 0.0;
    std::vector<std::pair<BPoint, std::size_t>> hit;
    for (Eigen::Index i = b; i < e; ++i) {
      hit.clear();
      tree.query(bgi::nearest(BPoint(from(i, 0), from(i, 1), from(i, 2)), 1), std::back_inserter(hit));
      s += (from.row(i) - to.row(static_cast<Eigen::Index>(hit.front().second))).squaredNorm();
    }
    part[c] = s;
  });
  double s = 0.0;
  for (double p : part) s += p;
  return s / static_cast<double>(from.rows());
}

}  // namespace

double chamfer_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw Error("chamfer_distance: empty point set");
  if (a.cols() != 3 || b.cols() != 3) throw ShapeError("chamfer_distance: points must be N x 3");
  const Tree ta = build_tree(a), tb = build_tree(b);
  const double ab = mean_nn_sq(a, tb, b);
  const double ba = mean_nn_sq(b, ta, a);
  return 0.5 * (ab + ba);
}

double psnr(const img::Image& a, const img::Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ShapeError("psnr: image shapes differ");
  if (a.data.empty()) throw ShapeError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

IouReport iou(const img::LabelMap& pred, const img::LabelMap& gt, int k) {
  if (pred.width != gt.width || pred.height != gt.height) throw ShapeError("miou: label map shapes differ");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(k), 0), uni(static_cast<std::size_t>(k), 0),
      present(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const int p = pred.data[i], g = gt.data[i];
    if (g < 0 || g >= k || p < 0 || p >= k) throw Error("miou: label outside [0,K)");
    ++present[static_cast<std::size_t>(g)];
    if (p == g) {
      ++inter[static_cast<std::size_t>(g)];
      ++uni[static_cast<std::size_t>(g)];
    } else {
      ++uni[static_cast<std::size_t>(g)];
      ++uni[static_cast<std::size_t>(p)];
    }
  }
  IouReport r;
  r.per_class.resize(static_cast<std::size_t>(k));
  int classes = 0;
  for (int c = 0; c < k; ++c) {
    if (present[static_cast<std::size_t>(c)] == 0) continue;
    const double v = static_cast<double>(inter[static_cast<std::size_t>(c)]) / static_cast<double>(uni[static_cast<std::size_t>(c)]);
    r.per_class[static_cast<std::size_t>(c)] = v;
    r.mean += v;
    ++classes;
  }
  if (classes > 0) r.mean /= classes;
  return r;
}

double miou(const img::LabelMap& pred, const img::LabelMap& gt, int k) { return iou(pred, gt, k).mean; }

void write_ply(const std::string& path, const TriangleMesh& mesh) {
  std::ostringstream head;
  head << "ply\nformat binary_little_endian 1.0\n"
       << "element vertex " << mesh.vertices.size() << "\n"
       << "property float x\nproperty float y\nproperty float z\n"
       << "element face " << mesh.triangles.size() << "\n"
       << "property list uchar int vertex_indices\nend_header\n";
  std::string out = head.str();
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  for (const Vec3& v : mesh.vertices) {
    const float f[3] = {static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
    put(f, sizeof(f));
  }
  for (const auto& t : mesh.triangles) {
    const unsigned char three = 3;
    put(&three, 1);
    put(t.data(), 3 * sizeof(std::int32_t));
  }
  write_file_atomic(path, std::string_view(out));
}

TriangleMesh read_ply(const std::string& path) {
  const std::string bytes = read_file(path);
  const auto end = bytes.find("end_header\n");
  if (bytes.rfind("ply\n", 0) != 0 || end == std::string::npos) throw IoError(path + ": not a PLY file");
  std::istringstream head(bytes.substr(0, end));
  std::string line;
  std::size_t nv = 0, nf = 0;
  bool binary_le = false;
  while (std::getline(head, line)) {
    std::istringstream ls(line);
    std::string w;
    ls >> w;
    if (w == "format") {
      std::string f;
      ls >> f;
      binary_le = f == "binary_little_endian";
    } else if (w == "element") {
      std::string what;
      std::size_t count = 0;
      ls >> what >> count;
      (what == "vertex" ? nv : nf) = count;
    }
  }
  if (!binary_le) throw IoError(path + ": only binary little-endian PLY is supported");
  std::size_t pos = end + std::strlen("end_header\n");
  const std::size_t need = pos + nv * 12 + nf * 13;
  if (bytes.size() != need) throw IoError(path + ": unexpected PLY payload size");
  TriangleMesh m;
  m.vertices.resize(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    float f[3];
    std::memcpy(f, bytes.data() + pos, sizeof(f));
    pos += sizeof(f);
    m.vertices[i] = Vec3(f[0], f[1], f[2]);
  }
  m.triangles.resize(nf);
  for (std::size_t i = 0; i < nf; ++i) {
    if (static_cast<unsigned char>(bytes[pos]) != 3) throw IoError(path + ": only triangle faces are supported");
    std::memcpy(m.triangles[i].data(), bytes.data() + pos + 1, 3 * sizeof(std::int32_t));
    pos += 13;
  }
  return m;
}

RenderedView render_view(const render::ImplicitField& field, const data::Camera& cam, const geo::BBox& box,
                         const render::RenderConfig& cfg, bool per_object) {
  const int w = cam.intrinsics.width, h = cam.intrinsics.height;
  std::vector<render::Ray> rays;
  rays.reserve(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) rays.push_back(data::pixel_ray(cam, x, y, box));
  render::RenderConfig rc = cfg;
  rc.jitter = false;
  rc.object_outputs = rc.object_outputs || per_object;
  const auto out = render::render_rays(field, rays, rc, 0);
  const int k = field.object_count();
  RenderedView v;
  v.rgb = img::Image(w, h, 3);
  v.labels = img::LabelMap(w, h);
  v.depth = img::Image(w, h, 1);
  v.opacity = img::Image(w, h, 1);
  if (per_object) v.object_opacity.assign(static_cast<std::size_t>(k), img::Image(w, h, 1));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& o = out[static_cast<std::size_t>(y) * w + x];
      for (int c = 0; c < 3; ++c) v.rgb.at(x, y, c) = std::clamp(o.color(c), 0.0, 1.0);
      v.labels.at(x, y) = render::semantic_label(o, k - 1, rc.label_opacity_threshold);
      v.depth.at(x, y, 0) = o.depth;
      v.opacity.at(x, y, 0) = o.opacity;
      if (per_object)
        for (int i = 0; i < k; ++i) v.object_opacity[static_cast<std::size_t>(i)].at(x, y, 0) = o.object_opacity(i);
    }
  }
  return v;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json opt_list(const std::vector<std::optional<double>>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : v) a.push_back(opt_json(x));
  return a;
}

}  // namespace

nlohmann::json Metrics::to_json() const {
  return {
      {"psnr", psnr},
      {"psnr_per_view", psnr_per_view},
      {"miou", miou},
      {"iou_per_class", opt_list(iou_per_class)},
      {"cd_scene", opt_json(cd_scene)},
      {"cd_per_object", opt_list(cd_per_object)},
      {"cd_rms_scene", opt_json(cd_rms_scene)},
      {"cd_rms_per_object", opt_list(cd_rms_per_object)},
      {"cd_variant", "symmetric mean of squared nearest-neighbour distances (scene units squared); "
                     "cd_rms = sqrt(cd)"},
      {"eikonal_deviation", eikonal_deviation},
  };
}

Metrics evaluate(const fields::FieldModel& model, const data::Dataset& ds, const geo::SceneSpec& truth,
                 const EvalConfig& cfg, ExtractedMeshes* meshes_out) {
  if (truth.object_count() != model.shape.object_count)
    throw ConfigError("evaluate: scene and model disagree on the object count");
  const render::NeuralField field(model);
  Metrics m;

  render::RenderConfig rc;
  rc.n_coarse = cfg.n_coarse;
  rc.n_fine = cfg.n_fine;
  rc.background_color = ds.background_color;
  const auto views = ds.split(cfg.split);
  img::LabelMap pred_all, gt_all;
  for (const data::View* v : views) {
    const RenderedView r = render_view(field, v->camera, ds.bbox, rc);
    m.psnr_per_view.push_back(psnr(r.rgb, v->rgb));
    pred_all.data.insert(pred_all.data.end(), r.labels.data.begin(), r.labels.data.end());
    gt_all.data.insert(gt_all.data.end(), v->mask.data.begin(), v->mask.data.end());
  }
  if (!views.empty()) {
    m.psnr = std::accumulate(m.psnr_per_view.begin(), m.psnr_per_view.end(), 0.0) / static_cast<double>(views.size());
    pred_all.width = gt_all.width = static_cast<int>(gt_all.data.size());
    pred_all.height = gt_all.height = 1;
    const IouReport ir = iou(pred_all, gt_all, ds.object_count);
    m.iou_per_class = ir.per_class;
    m.miou = ir.mean;
  }

  const ExtractedMeshes meshes = extract_all_meshes(field, ds.bbox, cfg.resolution);
  const geo::BBox crop = ds.bbox.shrunk(cfg.crop_margin);
  auto cd = [&](const TriangleMesh& mesh, const Matrix& truth_pts, std::uint64_t salt) -> std::optional<double> {
    const Matrix pred = crop_points(sample_surface(mesh, cfg.surface_samples, derive_seed(cfg.seed, salt)), crop);
    if (pred.rows() == 0 || truth_pts.rows() == 0) return std::nullopt;
    return chamfer_distance(pred, truth_pts);
  };
  for (int i = 0; i < truth.object_count(); ++i) {
    const Matrix gt = sample_primitive_surface(truth.primitives[static_cast<std::size_t>(i)], crop, cfg.surface_samples,
                                               derive_seed(cfg.seed, 0xC0, static_cast<std::uint64_t>(i)));
    m.cd_per_object.push_back(cd(meshes.objects[static_cast<std::size_t>(i)], gt, 0xC1 + static_cast<std::uint64_t>(i)));
    m.cd_rms_per_object.push_back(m.cd_per_object.back() ? std::optional<double>(std::sqrt(*m.cd_per_object.back()))
                                                         : std::nullopt);
  }
  m.cd_scene = cd(meshes.scene, sample_scene_surface(truth, crop, cfg.surface_samples, derive_seed(cfg.seed, 0xC5)), 0xC6);
  if (m.cd_scene) m.cd_rms_scene = std::sqrt(*m.cd_scene);
  m.eikonal_deviation = train::eikonal_deviation(model, ds.bbox, 10000, cfg.seed);
  if (meshes_out) *meshes_out = meshes;
  return m;
}

}  // namespace objsdf::mesh
