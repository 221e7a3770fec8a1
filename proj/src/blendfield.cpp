// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/blendfield.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCore>

namespace blendfields {

Neighborhoods build_neighborhoods(const TetCage& cage, std::size_t size) {
  Neighborhoods hoods;
  hoods.size = size;
  hoods.tets.reserve(cage.vertex_count());
  for (std::size_t v = 0; v < cage.vertex_count(); ++v) hoods.tets.push_back(tet_neighborhood(cage, v, size));
  return hoods;
}

RowMatrix compute_descriptors(const TetCage& cage, const Neighborhoods& hoods, const DeformedVerts& deformed) {
  const std::vector<double> dv = tet_volume_changes(cage, deformed);
  RowMatrix out(static_cast<Eigen::Index>(cage.vertex_count()), static_cast<Eigen::Index>(hoods.size));
  for (std::size_t v = 0; v < cage.vertex_count(); ++v) {
    const auto& hood = hoods.tets[v];
    for (std::size_t i = 0; i < hood.size(); ++i) {
      out(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(i)) = dv[hood[i]];
    }
  }
  return out;
}

DescriptorTable build_descriptor_table(const TetCage& cage, std::span<const DeformedVerts> training,
                                       std::size_t neighborhood_size) {
  if (training.empty()) throw DimensionMismatch("descriptor table needs at least one training expression");
  DescriptorTable table;
  table.neighborhoods = build_neighborhoods(cage, neighborhood_size);
  for (const DeformedVerts& d : training) table.expressions.push_back(compute_descriptors(cage, table.neighborhoods, d));
  return table;
}

Eigen::VectorXd descriptor_distances(const DescriptorTable& table, const Eigen::Ref<const Eigen::VectorXd>& descriptor,
                                     std::size_t vertex) {
  if (static_cast<std::size_t>(descriptor.size()) != table.descriptor_size()) {
    throw DimensionMismatch("descriptor length " + std::to_string(descriptor.size()) + " does not match table size " +
                            std::to_string(table.descriptor_size()));
  }
  const auto k = static_cast<Eigen::Index>(table.expression_count());
  Eigen::VectorXd out(k);
  for (Eigen::Index e = 0; e < k; ++e) {
    out[e] = (descriptor.transpose() - table.expressions[e].row(static_cast<Eigen::Index>(vertex))).squaredNorm();
  }
  return out;
}

Eigen::VectorXd descriptor_distances(const DescriptorTable& table, const TetCage& cage,
                                     const DeformedVerts& deformed, std::size_t vertex) {
  const LocalDescriptor g = local_descriptor(cage, deformed, vertex, table.descriptor_size());
  return descriptor_distances(table, g, vertex);
}

Eigen::VectorXd gate_weights(const Eigen::Ref<const Eigen::VectorXd>& distances, double tau) {
  const Eigen::VectorXd logits = -tau * distances;
  const double m = logits.maxCoeff();
  Eigen::VectorXd w = (logits.array() - m).exp().matrix();
  return w / w.sum();
}

Eigen::MatrixXd backward_euler_step(const Eigen::Ref<const Eigen::MatrixXd>& weights, const SparseMatrix& laplacian,
                                    double lambda) {
  const auto n = laplacian.rows();
  SparseMatrix system(n, n);
  system.setIdentity();
  system -= lambda * laplacian;

  Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg;
  cg.setTolerance(1e-13);
  cg.setMaxIterations(std::max<Eigen::Index>(100, 20 * n));
  cg.compute(system);

  Eigen::MatrixXd out(weights.rows(), weights.cols());
  for (Eigen::Index c = 0; c < weights.cols(); ++c) {
    const Eigen::VectorXd b = weights.col(c);
    const double bnorm = b.norm();
    if (bnorm == 0.0) {
      out.col(c).setZero();
      continue;
    }
    Eigen::VectorXd x = cg.solveWithGuess(b, b);
    const double rel = (system * x - b).norm() / bnorm;
    if (!(rel <= kSmoothResidual)) {
      throw SolverDiverged("diffusion solve residual " + std::to_string(rel) + " above tolerance");
    }
    out.col(c) = x;
  }
  return out;
}

Eigen::MatrixXd smooth_weights(const Eigen::Ref<const Eigen::MatrixXd>& weights, const SparseMatrix& laplacian,
                               double lambda, int iters) {
  Eigen::MatrixXd a = weights;
  if (iters <= 0) return a;
  for (int i = 0; i < iters; ++i) a = backward_euler_step(a, laplacian, lambda);
  const double k = static_cast<double>(a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    row = row.cwiseMax(0.0).cwiseMin(1.0);
    const double s = row.sum();
    if (s > 0.0) {
      row /= s;
    } else {
      row.setConstant(1.0 / k);
    }
  }
  return a;
}

BlendState build_blend_state(const TetCage& cage, const SparseMatrix& laplacian, const DescriptorTable& table,
                             const DeformedVerts& deformed, const BlendParams& params) {
  const RowMatrix current = compute_descriptors(cage, table.neighborhoods, deformed);
  const auto nv = static_cast<Eigen::Index>(cage.vertex_count());
  const auto k = static_cast<Eigen::Index>(table.expression_count());
  Eigen::MatrixXd raw(nv, k);
  for (Eigen::Index v = 0; v < nv; ++v) {
    const Eigen::VectorXd g = current.row(v).transpose();
    raw.row(v) = gate_weights(descriptor_distances(table, g, static_cast<std::size_t>(v)), params.tau).transpose();
  }
  BlendState state;
  state.params = params;
  state.weights = smooth_weights(raw, laplacian, params.lambda_diff, params.smoothing_iters);
  return state;
}

Eigen::VectorXd blend_at_location(const TetCage& cage, const BlendState& state, const Location& loc) {
  Eigen::VectorXd a = interpolate_vertex_field(cage, loc.tet, loc.bary, state.weights);
  // Barycentric weights may dip to -kBaryEps on faces.
  a = a.cwiseMax(0.0);
  const double s = a.sum();
  if (s > 0.0) return a / s;
  return Eigen::VectorXd::Constant(a.size(), 1.0 / static_cast<double>(a.size()));
}

std::optional<Eigen::VectorXd> blendfield_at_point(const TetCage& cage, const DeformedVerts& deformed,
                                                   const TetBVH& bvh, const BlendState& state, const Vec3& point) {
  const auto loc = locate_point(bvh, cage, deformed, point);
  if (!loc) return std::nullopt;
  return blend_at_location(cage, state, *loc);
}

}  // namespace blendfields
