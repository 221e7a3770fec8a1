// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "blendfields/common.hpp"

namespace blendfields {

using Tet = std::array<std::int32_t, 4>;

/// Rest tets whose |signed volume| falls below this are rejected (world units^3).
inline constexpr double kDegenerateVolume = 1e-12;
/// Barycentric containment tolerance.
inline constexpr double kBaryEps = 1e-9;

/// Edge matrix with columns v3-v0, v2-v0, v1-v0 (in that order).
Mat3 edge_matrix(const Vec3& v0, const Vec3& v1, const Vec3& v2, const Vec3& v3);
Mat3 edge_matrix(std::span<const Vec3> positions, const Tet& tet);

/// Signed volume det(D)/6 using the edge-matrix column order above.
double signed_volume(const Mat3& edges);

/// det(D * rest^-1): ratio of deformed to rest signed volume. Throws
/// DegenerateTet when the rest tet is below kDegenerateVolume.
double volume_change(const Mat3& rest_edges, const Mat3& deformed_edges);

/// Rest-pose tetrahedral cage. Immutable after construction.
///
/// Construction validates: indices in range, every rest tet has signed volume
/// above kDegenerateVolume, no face is shared by more than two tets, and the
/// tets form a single face-connected component.
class TetCage {
 public:
  TetCage(std::vector<Vec3> rest_vertices, std::vector<Tet> tets);

  std::size_t vertex_count() const { return rest_.size(); }
  std::size_t tet_count() const { return tets_.size(); }

  const std::vector<Vec3>& rest_vertices() const { return rest_; }
  const std::vector<Tet>& tets() const { return tets_; }
  const Tet& tet(std::size_t t) const { return tets_[t]; }

  /// Incident tets of a vertex, sorted by index.
  const std::vector<std::int32_t>& vertex_tets(std::size_t v) const { return vertex_tets_[v]; }
  /// Face-neighbouring tets, sorted by index.
  const std::vector<std::int32_t>& tet_neighbors(std::size_t t) const { return tet_tets_[t]; }

  const Mat3& rest_edge_inverse(std::size_t t) const { return rest_edge_inv_[t]; }
  double rest_volume(std::size_t t) const { return rest_volume_[t]; }

  Aabb rest_bounds() const;

  bool operator==(const TetCage& other) const { return rest_ == other.rest_ && tets_ == other.tets_; }

 private:
  std::vector<Vec3> rest_;
  std::vector<Tet> tets_;
  std::vector<std::vector<std::int32_t>> vertex_tets_;
  std::vector<std::vector<std::int32_t>> tet_tets_;
  std::vector<Mat3> rest_edge_inv_;
  std::vector<double> rest_volume_;
};

/// One deformed state of the cage. Positions follow the rest vertex order.
struct DeformedVerts {
  double expression_code = 0.0;
  std::vector<Vec3> positions;
};

/// Checks length and finiteness against the cage. Throws DimensionMismatch.
void validate_deformed(const TetCage& cage, const DeformedVerts& deformed);

DeformedVerts rest_state(const TetCage& cage);

/// Volume change of every tet of the cage under `deformed`.
std::vector<double> tet_volume_changes(const TetCage& cage, const DeformedVerts& deformed);

/// Deterministic tet neighbourhood of a vertex: BFS over face adjacency seeded
/// with the incident tets, ordered by (depth, tet index), truncated to `size`
/// and padded by repeating the last entry.
std::vector<std::int32_t> tet_neighborhood(const TetCage& cage, std::size_t vertex, std::size_t size);

using LocalDescriptor = Eigen::VectorXd;

/// Concatenated volume changes over the vertex's tet neighbourhood.
LocalDescriptor local_descriptor(const TetCage& cage, const DeformedVerts& deformed, std::size_t vertex,
                                 std::size_t size);

/// Bounding-volume hierarchy over the tets of one deformed state.
class TetBVH {
 public:
  struct Node {
    Aabb box;
    std::int32_t left = -1;   // child index, or -1 for a leaf
    std::int32_t right = -1;
    std::int32_t first = 0;   // leaf: range into the tet order
    std::int32_t count = 0;
  };

  TetBVH(const TetCage& cage, const DeformedVerts& deformed);

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::int32_t>& order() const { return order_; }
  const Aabb& tet_box(std::size_t t) const { return tet_boxes_[t]; }
  const Aabb& bounds() const { return nodes_.front().box; }

  /// Calls fn(tet) for every tet whose padded box contains p.
  template <typename Fn>
  void for_each_candidate(const Vec3& p, Fn&& fn) const;

 private:
  void build(std::int32_t node, std::int32_t first, std::int32_t count, const std::vector<Vec3>& centroids);

  std::vector<Node> nodes_;
  std::vector<std::int32_t> order_;
  std::vector<Aabb> tet_boxes_;
};

/// Result of point location: containing tet and barycentric weights of its
/// four vertices (in the tet's vertex order), summing to one.
struct Location {
  std::int32_t tet = -1;
  Vec4 bary = Vec4::Zero();
};

/// Barycentric coordinates of p with respect to tet t of the given positions.
/// Returns nullopt when that tet is degenerate in this state.
std::optional<Vec4> barycentric(std::span<const Vec3> positions, const Tet& tet, const Vec3& p);

/// Lowest-index tet containing p (all barycentric >= -kBaryEps), or nullopt.
std::optional<Location> locate_point(const TetBVH& bvh, const TetCage& cage, const DeformedVerts& deformed,
                                     const Vec3& p);

/// Same contract as locate_point, by scanning every tet.
std::optional<Location> locate_point_exhaustive(const TetCage& cage, const DeformedVerts& deformed, const Vec3& p);

/// Maps a located point onto the rest pose of the same tet.
Vec3 canonical_point(const TetCage& cage, const Location& loc);

/// Deformed-to-rest barycentric transport; nullopt outside the cage.
std::optional<Vec3> canonicalize(const TetBVH& bvh, const TetCage& cage, const DeformedVerts& deformed,
                                 const Vec3& p);

/// Barycentric combination of a per-vertex field (rows = vertices).
Eigen::VectorXd interpolate_vertex_field(const TetCage& cage, std::int32_t tet, const Vec4& bary,
                                         const Eigen::Ref<const Eigen::MatrixXd>& field);

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Negative linear-FEM stiffness matrix on the rest pose. Symmetric, zero row
/// sums, negative semi-definite.
SparseMatrix assemble_laplacian(const TetCage& cage);

// Mesh text format:
//   tetcage v1
//   <vertex count> <tet count>
//   x y z            (one line per vertex)
//   a b c d          (one line per tet)
void write_cage(std::ostream& os, const TetCage& cage);
TetCage read_cage(std::istream& is);
void save_cage(const std::filesystem::path& path, const TetCage& cage);
TetCage load_cage(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

template <typename Fn>
void TetBVH::for_each_candidate(const Vec3& p, Fn&& fn) const {
  std::int32_t stack[64];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    if (!n.box.contains(p)) continue;
    if (n.left < 0) {
      for (std::int32_t i = 0; i < n.count; ++i) {
        const std::int32_t t = order_[n.first + i];
        if (tet_boxes_[t].contains(p)) fn(t);
      }
    } else {
      stack[top++] = n.left;
      stack[top++] = n.right;
    }
  }
}

}  // namespace blendfields
