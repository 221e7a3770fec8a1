// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "blendfields/tetmesh.hpp"

namespace blendfields {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-vertex tet neighbourhoods of a fixed size, computed once per cage.
struct Neighborhoods {
  std::size_t size = 0;
  std::vector<std::vector<std::int32_t>> tets;  // per vertex, length == size
};

Neighborhoods build_neighborhoods(const TetCage& cage, std::size_t size);

/// Descriptors of every vertex for one deformed state (rows = vertices).
RowMatrix compute_descriptors(const TetCage& cage, const Neighborhoods& hoods, const DeformedVerts& deformed);

/// Descriptors of the K training expressions.
struct DescriptorTable {
  Neighborhoods neighborhoods;
  std::vector<RowMatrix> expressions;  // K matrices, vertices x size

  std::size_t expression_count() const { return expressions.size(); }
  std::size_t descriptor_size() const { return neighborhoods.size; }
};

DescriptorTable build_descriptor_table(const TetCage& cage, std::span<const DeformedVerts> training,
                                       std::size_t neighborhood_size);

/// Squared descriptor distances of a vertex to every training expression.
Eigen::VectorXd descriptor_distances(const DescriptorTable& table, const Eigen::Ref<const Eigen::VectorXd>& descriptor,
                                     std::size_t vertex);
Eigen::VectorXd descriptor_distances(const DescriptorTable& table, const TetCage& cage,
                                     const DeformedVerts& deformed, std::size_t vertex);

/// Softmax over tau-scaled negated distances (max-subtracted).
Eigen::VectorXd gate_weights(const Eigen::Ref<const Eigen::VectorXd>& distances, double tau);

/// One backward-Euler diffusion step (I - lambda L) x = b for every column.
/// Throws SolverDiverged when the relative residual exceeds kSmoothResidual.
Eigen::MatrixXd backward_euler_step(const Eigen::Ref<const Eigen::MatrixXd>& weights, const SparseMatrix& laplacian,
                                    double lambda);

inline constexpr double kSmoothResidual = 1e-10;

/// `iters` diffusion steps followed by per-row clamp to [0,1] and
/// renormalisation. iters == 0 returns the input unchanged.
Eigen::MatrixXd smooth_weights(const Eigen::Ref<const Eigen::MatrixXd>& weights, const SparseMatrix& laplacian,
                               double lambda, int iters);

struct BlendParams {
  double tau = 1e6;
  double lambda_diff = 0.1;
  int smoothing_iters = 1;
};

struct BlendState {
  Eigen::MatrixXd weights;  // vertices x K, rows are partitions of unity
  BlendParams params;
};

/// Distances -> gate -> diffusion for every vertex of the deformed state.
BlendState build_blend_state(const TetCage& cage, const SparseMatrix& laplacian, const DescriptorTable& table,
                             const DeformedVerts& deformed, const BlendParams& params);

/// Blend vector at a located point, renormalised to sum to one.
Eigen::VectorXd blend_at_location(const TetCage& cage, const BlendState& state, const Location& loc);

std::optional<Eigen::VectorXd> blendfield_at_point(const TetCage& cage, const DeformedVerts& deformed,
                                                   const TetBVH& bvh, const BlendState& state, const Vec3& point);

}  // namespace blendfields
