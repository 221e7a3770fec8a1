// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/tetmesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include <Eigen/Dense>

namespace blendfields {

Mat3 edge_matrix(const Vec3& v0, const Vec3& v1, const Vec3& v2, const Vec3& v3) {
  Mat3 d;
  d.col(0) = v3 - v0;
  d.col(1) = v2 - v0;
  d.col(2) = v1 - v0;
  return d;
}

Mat3 edge_matrix(std::span<const Vec3> positions, const Tet& tet) {
  return edge_matrix(positions[tet[0]], positions[tet[1]], positions[tet[2]], positions[tet[3]]);
}

double signed_volume(const Mat3& edges) { return edges.determinant() / 6.0; }

double volume_change(const Mat3& rest_edges, const Mat3& deformed_edges) {
  const double rest_det = rest_edges.determinant();
  if (std::abs(rest_det) / 6.0 < kDegenerateVolume) {
    throw DegenerateTet("rest tetrahedron volume below threshold");
  }
  return (deformed_edges * rest_edges.inverse()).determinant();
}

TetCage::TetCage(std::vector<Vec3> rest_vertices, std::vector<Tet> tets)
    : rest_(std::move(rest_vertices)), tets_(std::move(tets)) {
  if (rest_.empty() || tets_.empty()) throw InvalidMesh("cage needs at least one vertex and one tet");
  for (const Vec3& p : rest_) {
    if (!p.allFinite()) throw InvalidMesh("non-finite rest vertex");
  }
  const auto nv = static_cast<std::int32_t>(rest_.size());
  vertex_tets_.resize(rest_.size());
  rest_edge_inv_.resize(tets_.size());
  rest_volume_.resize(tets_.size());

  for (std::size_t t = 0; t < tets_.size(); ++t) {
    const Tet& tet = tets_[t];
    for (std::int32_t v : tet) {
      if (v < 0 || v >= nv) throw InvalidMesh("tet " + std::to_string(t) + " has out-of-range vertex index");
    }
    const Mat3 d = edge_matrix(rest_, tet);
    const double vol = signed_volume(d);
    if (std::abs(vol) < kDegenerateVolume) {
      throw DegenerateTet("tet " + std::to_string(t) + " has degenerate rest volume");
    }
    if (vol < 0.0) throw InvalidMesh("tet " + std::to_string(t) + " has negative rest orientation");
    rest_volume_[t] = vol;
    rest_edge_inv_[t] = d.inverse();
    for (std::int32_t v : tet) vertex_tets_[v].push_back(static_cast<std::int32_t>(t));
  }

  // Face adjacency through sorted vertex triples.
  std::map<std::array<std::int32_t, 3>, std::vector<std::int32_t>> faces;
  for (std::size_t t = 0; t < tets_.size(); ++t) {
    const Tet& tet = tets_[t];
    for (int skip = 0; skip < 4; ++skip) {
      std::array<std::int32_t, 3> f{};
      int j = 0;
      for (int i = 0; i < 4; ++i) {
        if (i != skip) f[j++] = tet[i];
      }
      std::sort(f.begin(), f.end());
      faces[f].push_back(static_cast<std::int32_t>(t));
    }
  }
  tet_tets_.resize(tets_.size());
  for (const auto& [face, owners] : faces) {
    if (owners.size() > 2) throw InvalidMesh("face shared by more than two tets");
    if (owners.size() == 2) {
      tet_tets_[owners[0]].push_back(owners[1]);
      tet_tets_[owners[1]].push_back(owners[0]);
    }
  }
  for (auto& n : tet_tets_) std::sort(n.begin(), n.end());

  // Single connected component.
  std::vector<char> seen(tets_.size(), 0);
  std::vector<std::int32_t> queue{0};
  seen[0] = 1;
  for (std::size_t head = 0; head < queue.size(); ++head) {
    for (std::int32_t n : tet_tets_[queue[head]]) {
      if (!seen[n]) {
        seen[n] = 1;
        queue.push_back(n);
      }
    }
  }
  if (queue.size() != tets_.size()) throw InvalidMesh("cage is not a single connected component");
  for (std::size_t v = 0; v < rest_.size(); ++v) {
    if (vertex_tets_[v].empty()) throw InvalidMesh("vertex " + std::to_string(v) + " belongs to no tet");
  }
}

Aabb TetCage::rest_bounds() const {
  Aabb b;
  for (const Vec3& p : rest_) b.expand(p);
  return b;
}

void validate_deformed(const TetCage& cage, const DeformedVerts& deformed) {
  if (deformed.positions.size() != cage.vertex_count()) {
    throw DimensionMismatch("deformed vertex count " + std::to_string(deformed.positions.size()) +
                            " does not match cage vertex count " + std::to_string(cage.vertex_count()));
  }
  for (const Vec3& p : deformed.positions) {
    if (!p.allFinite()) throw DimensionMismatch("non-finite deformed vertex");
  }
}

DeformedVerts rest_state(const TetCage& cage) { return DeformedVerts{0.0, cage.rest_vertices()}; }

std::vector<double> tet_volume_changes(const TetCage& cage, const DeformedVerts& deformed) {
  validate_deformed(cage, deformed);
  std::vector<double> out(cage.tet_count());
  for (std::size_t t = 0; t < cage.tet_count(); ++t) {
    const Mat3 d = edge_matrix(deformed.positions, cage.tet(t));
    out[t] = (d * cage.rest_edge_inverse(t)).determinant();
  }
  return out;
}

std::vector<std::int32_t> tet_neighborhood(const TetCage& cage, std::size_t vertex, std::size_t size) {
  if (size == 0) throw DimensionMismatch("neighbourhood size must be at least 1");
  std::vector<std::int32_t> result;
  std::vector<std::int32_t> frontier = cage.vertex_tets(vertex);
  std::vector<char> visited(cage.tet_count(), 0);
  for (std::int32_t t : frontier) visited[t] = 1;

  while (!frontier.empty() && result.size() < size) {
    for (std::int32_t t : frontier) {
      if (result.size() == size) break;
      result.push_back(t);
    }
    std::vector<std::int32_t> next;
    for (std::int32_t t : frontier) {
      for (std::int32_t n : cage.tet_neighbors(t)) {
        if (!visited[n]) {
          visited[n] = 1;
          next.push_back(n);
        }
      }
    }
    std::sort(next.begin(), next.end());
    frontier = std::move(next);
  }
  while (result.size() < size) result.push_back(result.back());
  return result;
}

LocalDescriptor local_descriptor(const TetCage& cage, const DeformedVerts& deformed, std::size_t vertex,
                                 std::size_t size) {
  validate_deformed(cage, deformed);
  const auto hood = tet_neighborhood(cage, vertex, size);
  LocalDescriptor g(static_cast<Eigen::Index>(size));
  for (std::size_t i = 0; i < hood.size(); ++i) {
    const std::int32_t t = hood[i];
    g[static_cast<Eigen::Index>(i)] =
        volume_change(edge_matrix(cage.rest_vertices(), cage.tet(t)), edge_matrix(deformed.positions, cage.tet(t)));
  }
  return g;
}

// --- BVH --------------------------------------------------------------------

namespace {
constexpr std::int32_t kLeafSize = 4;
}

TetBVH::TetBVH(const TetCage& cage, const DeformedVerts& deformed) {
  validate_deformed(cage, deformed);
  const std::size_t n = cage.tet_count();
  tet_boxes_.resize(n);
  std::vector<Vec3> centroids(n);
  for (std::size_t t = 0; t < n; ++t) {
    Aabb b;
    Vec3 c = Vec3::Zero();
    for (std::int32_t v : cage.tet(t)) {
      b.expand(deformed.positions[v]);
      c += deformed.positions[v];
    }
    const double pad = 1e-8 * (b.extent().maxCoeff() + 1.0);
    b.lo.array() -= pad;
    b.hi.array() += pad;
    tet_boxes_[t] = b;
    centroids[t] = c / 4.0;
  }
  order_.resize(n);
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * n / kLeafSize + 2);
  nodes_.emplace_back();
  build(0, 0, static_cast<std::int32_t>(n), centroids);
}

void TetBVH::build(std::int32_t node, std::int32_t first, std::int32_t count, const std::vector<Vec3>& centroids) {
  Aabb box;
  Aabb cbox;
  for (std::int32_t i = first; i < first + count; ++i) {
    box.expand(tet_boxes_[order_[i]]);
    cbox.expand(centroids[order_[i]]);
  }
  nodes_[node].box = box;
  if (count <= kLeafSize) {
    nodes_[node].first = first;
    nodes_[node].count = count;
    return;
  }
  int axis = 0;
  cbox.extent().maxCoeff(&axis);
  const std::int32_t mid = first + count / 2;
  // Ties broken by tet index keep the build deterministic.
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](std::int32_t a, std::int32_t b) {
                     const double ca = centroids[a][axis];
                     const double cb = centroids[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const auto left = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  const auto right = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  nodes_[node].left = left;
  nodes_[node].right = right;
  build(left, first, mid - first, centroids);
  build(right, mid, first + count - mid, centroids);
}

std::optional<Vec4> barycentric(std::span<const Vec3> positions, const Tet& tet, const Vec3& p) {
  const Vec3& v0 = positions[tet[0]];
  Mat3 m;
  m.col(0) = positions[tet[1]] - v0;
  m.col(1) = positions[tet[2]] - v0;
  m.col(2) = positions[tet[3]] - v0;
  const double det = m.determinant();
  const double scale = std::max({m.col(0).norm(), m.col(1).norm(), m.col(2).norm()});
  if (!(std::abs(det) > 1e-14 * scale * scale * scale)) return std::nullopt;
  const Vec3 b = m.inverse() * (p - v0);
  return Vec4(1.0 - b.sum(), b[0], b[1], b[2]);
}

namespace {
bool inside(const Vec4& bary) { return (bary.array() >= -kBaryEps).all(); }
}  // namespace

std::optional<Location> locate_point(const TetBVH& bvh, const TetCage& cage, const DeformedVerts& deformed,
                                     const Vec3& p) {
  std::optional<Location> best;
  bvh.for_each_candidate(p, [&](std::int32_t t) {
    if (best && best->tet < t) return;
    auto bary = barycentric(deformed.positions, cage.tet(t), p);
    if (bary && inside(*bary)) best = Location{t, *bary};
  });
  return best;
}

std::optional<Location> locate_point_exhaustive(const TetCage& cage, const DeformedVerts& deformed, const Vec3& p) {
  for (std::size_t t = 0; t < cage.tet_count(); ++t) {
    auto bary = barycentric(deformed.positions, cage.tet(t), p);
    if (bary && inside(*bary)) return Location{static_cast<std::int32_t>(t), *bary};
  }
  return std::nullopt;
}

Vec3 canonical_point(const TetCage& cage, const Location& loc) {
  const Tet& tet = cage.tet(loc.tet);
  const auto& rest = cage.rest_vertices();
  return loc.bary[0] * rest[tet[0]] + loc.bary[1] * rest[tet[1]] + loc.bary[2] * rest[tet[2]] +
         loc.bary[3] * rest[tet[3]];
}

std::optional<Vec3> canonicalize(const TetBVH& bvh, const TetCage& cage, const DeformedVerts& deformed,
                                 const Vec3& p) {
  const auto loc = locate_point(bvh, cage, deformed, p);
  if (!loc) return std::nullopt;
  return canonical_point(cage, *loc);
}

Eigen::VectorXd interpolate_vertex_field(const TetCage& cage, std::int32_t tet, const Vec4& bary,
                                         const Eigen::Ref<const Eigen::MatrixXd>& field) {
  const Tet& t = cage.tet(tet);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(field.cols());
  for (int i = 0; i < 4; ++i) out += bary[i] * field.row(t[i]).transpose();
  return out;
}

SparseMatrix assemble_laplacian(const TetCage& cage) {
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(cage.tet_count() * 16);
  const auto& rest = cage.rest_vertices();
  for (std::size_t t = 0; t < cage.tet_count(); ++t) {
    const Tet& tet = cage.tet(t);
    Mat3 m;
    m.col(0) = rest[tet[1]] - rest[tet[0]];
    m.col(1) = rest[tet[2]] - rest[tet[0]];
    m.col(2) = rest[tet[3]] - rest[tet[0]];
    const double vol = std::abs(m.determinant()) / 6.0;
    if (vol < kDegenerateVolume) throw DegenerateTet("degenerate tet in Laplacian assembly");
    // Rows of m^-1 are the gradients of the basis functions of vertices 1..3.
    const Mat3 inv = m.inverse();
    std::array<Vec3, 4> grad;
    grad[1] = inv.row(0).transpose();
    grad[2] = inv.row(1).transpose();
    grad[3] = inv.row(2).transpose();
    grad[0] = -(grad[1] + grad[2] + grad[3]);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        triplets.emplace_back(tet[i], tet[j], -vol * grad[i].dot(grad[j]));
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(cage.vertex_count());
  SparseMatrix l(n, n);
  l.setFromTriplets(triplets.begin(), triplets.end());
  l.makeCompressed();
  return l;
}

// --- file format ---------------------------------------------------------------

void write_cage(std::ostream& os, const TetCage& cage) {
  os << "tetcage v1\n" << cage.vertex_count() << ' ' << cage.tet_count() << '\n';
  os << std::setprecision(17);
  for (const Vec3& p : cage.rest_vertices()) os << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const Tet& t : cage.tets()) os << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
}

TetCage read_cage(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw CorruptFile("empty cage file");
  if (line.rfind("tetcage", 0) != 0) throw CorruptFile("missing 'tetcage' header");
  if (line != "tetcage v1") throw VersionMismatch("unsupported cage version: " + line);
  std::size_t nv = 0;
  std::size_t nt = 0;
  if (!(is >> nv >> nt)) throw CorruptFile("bad cage counts");
  std::vector<Vec3> verts(nv);
  for (auto& p : verts) {
    if (!(is >> p.x() >> p.y() >> p.z())) throw CorruptFile("truncated cage vertices");
  }
  std::vector<Tet> tets(nt);
  for (auto& t : tets) {
    if (!(is >> t[0] >> t[1] >> t[2] >> t[3])) throw CorruptFile("truncated cage tets");
  }
  return TetCage(std::move(verts), std::move(tets));
}

void save_cage(const std::filesystem::path& path, const TetCage& cage) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write cage file: " + path.string());
  write_cage(os, cage);
  if (!os) throw IoError("failed writing cage file: " + path.string());
}

TetCage load_cage(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open cage file: " + path.string());
  return read_cage(is);
}

}  // namespace blendfields
