// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "fgsn/error.hpp"
#include "fgsn/neuron_localizer.hpp"
#include "fgsn/tensor_store.hpp"

namespace fgsn {

/// W_safe = (delta * delta^T) / cols(delta). Symmetric PSD, d_out x d_out.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> gram_projection(
    const Eigen::MatrixBase<Derived>& delta) {
  using Matrix = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (delta.rows() == 0 || delta.cols() == 0) throw DataError("projection: delta has a zero-sized dimension");
  Matrix g = Matrix::Zero(delta.rows(), delta.rows());
  g.template selfadjointView<Eigen::Lower>().rankUpdate(delta.derived());
  g.template triangularView<Eigen::StrictlyUpper>() = g.transpose();
  return g / static_cast<typename Derived::Scalar>(delta.cols());
}

/// Orthogonal projector onto the column space of delta (U_r U_r^T); singular
/// values below rel_tol * sigma_max are treated as zero.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> orthonormal_projection(
    const Eigen::MatrixBase<Derived>& delta, typename Derived::Scalar rel_tol = 1e-10) {
  using Matrix = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (delta.rows() == 0 || delta.cols() == 0) throw DataError("projection: delta has a zero-sized dimension");
  const Eigen::BDCSVD<Matrix> svd(delta.derived(), Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  Eigen::Index rank = 0;
  if (s.size() > 0 && s[0] > 0)
    while (rank < s.size() && s[rank] > rel_tol * s[0]) ++rank;
  const Matrix u = svd.matrixU().leftCols(rank);
  return u * u.transpose();
}

enum class ProjectionKind { Gram, Orthonormal };

std::string_view projection_kind_tag(ProjectionKind k) noexcept;  // "gram" / "orthonormal"
ProjectionKind parse_projection_kind(std::string_view tag);

struct SafetyProjection {
  Eigen::MatrixXd w_safe;
  double normalizer = 1.0;  // columns of the source delta
  std::string source;       // tensor the delta came from
  ProjectionKind kind = ProjectionKind::Gram;
};

/// Builds W_safe from a 2-D delta record (d_out x d_in).
SafetyProjection build_projection(const TensorRecord& delta, ProjectionKind kind = ProjectionKind::Gram);

/// Keyed by "layers.{k}.{module}".
using ProjectionSet = std::map<std::string, SafetyProjection>;

/// One projection per mask-addressable adapter target, from aligned - base.
ProjectionSet build_projections(const ModelSnapshot& aligned, const ModelSnapshot& base, const LoraAdapter& adapter,
                                ProjectionKind kind = ProjectionKind::Gram);

/// Row j becomes (W_safe * source)_j where mask[j] = 1; all other rows are
/// copied from `current`. `source` is the matrix the projection acts on, which
/// is `current` itself for a single application.
Eigen::MatrixXd apply_masked_projection(const Eigen::MatrixXd& current, const Eigen::MatrixXd& source,
                                        std::span<const std::uint8_t> mask, const SafetyProjection& proj);

inline Eigen::MatrixXd apply_masked_projection(const Eigen::MatrixXd& b, std::span<const std::uint8_t> mask,
                                               const SafetyProjection& proj) {
  return apply_masked_projection(b, b, mask, proj);
}

struct LayerChange {
  std::size_t rows_projected = 0;
  std::size_t rows_changed = 0;  // rows whose values differ afterwards
  std::size_t rows_total = 0;
  double fraction = 0.0;         // rows_changed / rows_total
};

struct ChangeReport {
  std::map<int, LayerChange> per_layer;
  double overall_fraction = 0.0;  // changed scalars / scalars over the projected B matrices

  nlohmann::json to_json() const;
};

struct ProjectedAdapter {
  LoraAdapter adapter;
  ChangeReport report;
};

/// Projects every mask-addressable B matrix of layers with a nonempty mask.
/// A matrices and alpha pass through untouched.
ProjectedAdapter project_adapter(const LoraAdapter& adapter, const SafetyMask& mask, const ProjectionSet& projections);

/// The same row replacement applied to dense mlp.up / mlp.gate weights of an
/// already merged model. Projections are keyed like ProjectionSet.
ModelSnapshot project_dense(const ModelSnapshot& merged, const SafetyMask& mask, const ProjectionSet& projections);

struct EditFraction {
  std::uint64_t changed = 0;
  std::uint64_t total = 0;
  double overall = 0.0;
  std::map<int, double> per_layer;  // layers.{k}.* tensors only
};

/// Share of scalars whose value changed; tensors are matched by name.
EditFraction edit_fraction(std::span<const TensorRecord> before, std::span<const TensorRecord> after);
EditFraction edit_fraction(const ModelSnapshot& before, const ModelSnapshot& after);

enum class AdapterScope { All, BMatrices };
EditFraction edit_fraction(const LoraAdapter& before, const LoraAdapter& after,
                           AdapterScope scope = AdapterScope::All);

}  // namespace fgsn
