// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/projector.hpp"

#include <algorithm>

namespace fgsn {

using json = nlohmann::json;

std::string_view projection_kind_tag(ProjectionKind k) noexcept {
  return k == ProjectionKind::Gram ? "gram" : "orthonormal";
}

ProjectionKind parse_projection_kind(std::string_view tag) {
  if (tag == "gram") return ProjectionKind::Gram;
  if (tag == "orthonormal") return ProjectionKind::Orthonormal;
  throw ConfigError("unknown projection kind '" + std::string(tag) + "' (expected gram or orthonormal)");
}

SafetyProjection build_projection(const TensorRecord& delta, ProjectionKind kind) {
  if (delta.shape.size() != 2) throw DataError("projection: delta '" + delta.name + "' is not a 2-D matrix");
  const Eigen::MatrixXd d = delta.matrix();
  SafetyProjection p;
  p.source = delta.name;
  p.kind = kind;
  p.normalizer = static_cast<double>(d.cols());
  p.w_safe = kind == ProjectionKind::Gram ? gram_projection(d) : orthonormal_projection(d);
  if (!p.w_safe.allFinite()) throw NumericalError("projection: non-finite W_safe from '" + delta.name + "'");
  return p;
}

ProjectionSet build_projections(const ModelSnapshot& aligned, const ModelSnapshot& base, const LoraAdapter& adapter,
                                ProjectionKind kind) {
  ProjectionSet set;
  for (const auto& e : adapter.entries) {
    if (!is_neuron_row_module(e.module)) continue;
    set.emplace(e.key(), build_projection(diff_snapshot(aligned, base, layer_tensor_name(e.layer, e.module)), kind));
  }
  return set;
}

Eigen::MatrixXd apply_masked_projection(const Eigen::MatrixXd& current, const Eigen::MatrixXd& source,
                                        std::span<const std::uint8_t> mask, const SafetyProjection& proj) {
  const auto rows = current.rows();
  if (source.rows() != rows || source.cols() != current.cols())
    throw DataError("masked projection: source and current matrices differ in shape");
  if (static_cast<Eigen::Index>(mask.size()) != rows || proj.w_safe.rows() != rows || proj.w_safe.cols() != rows)
    throw DataError("masked projection: mask length " + std::to_string(mask.size()) + ", W_safe " +
                    std::to_string(proj.w_safe.rows()) + "x" + std::to_string(proj.w_safe.cols()) + ", rows " +
                    std::to_string(rows));
  bool any = false;
  for (auto m : mask) {
    if (m > 1) throw DataError("masked projection: mask values must be 0 or 1");
    any = any || m;
  }
  Eigen::MatrixXd out = current;
  if (!any) return out;
  const Eigen::MatrixXd projected = proj.w_safe * source;
  for (Eigen::Index j = 0; j < rows; ++j)
    if (mask[static_cast<std::size_t>(j)]) out.row(j) = projected.row(j);
  return out;
}

json ChangeReport::to_json() const {
  json layers = json::object();
  for (const auto& [l, c] : per_layer)
    layers[std::to_string(l)] = {{"rows_projected", c.rows_projected},
                                 {"rows_changed", c.rows_changed},
                                 {"rows_total", c.rows_total},
                                 {"fraction", c.fraction}};
  return {{"per_layer", layers}, {"overall_fraction", overall_fraction}};
}

namespace {

std::size_t changed_rows(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  std::size_t n = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) n += (a.row(r).array() != b.row(r).array()).any();
  return n;
}

const std::vector<std::uint8_t>& mask_row(const SafetyMask& mask, int layer) {
  if (layer < 0 || layer >= mask.n_layers())
    throw DataError("projection: mask has no layer " + std::to_string(layer));
  return mask.layers[static_cast<std::size_t>(layer)];
}

const SafetyProjection& find_projection(const ProjectionSet& projections, const std::string& key) {
  auto it = projections.find(key);
  if (it == projections.end()) throw DataError("projection: no safety projection for " + key);
  return it->second;
}

}  // namespace

ProjectedAdapter project_adapter(const LoraAdapter& adapter, const SafetyMask& mask, const ProjectionSet& projections) {
  ProjectedAdapter out{adapter, {}};
  for (auto& e : out.adapter.entries) {
    if (!is_neuron_row_module(e.module)) continue;
    const auto& row = mask_row(mask, e.layer);
    auto& change = out.report.per_layer[e.layer];
    change.rows_total += static_cast<std::size_t>(e.B.rows());
    const auto selected = static_cast<std::size_t>(std::count(row.begin(), row.end(), std::uint8_t{1}));
    if (selected == 0) continue;
    const Eigen::MatrixXd before = e.B;
    e.B = apply_masked_projection(before, row, find_projection(projections, e.key()));
    change.rows_projected += selected;
    change.rows_changed += changed_rows(before, e.B);
  }
  for (auto& [_, c] : out.report.per_layer)
    c.fraction = c.rows_total ? static_cast<double>(c.rows_changed) / static_cast<double>(c.rows_total) : 0.0;
  out.report.overall_fraction = edit_fraction(adapter, out.adapter, AdapterScope::BMatrices).overall;
  return out;
}

ModelSnapshot project_dense(const ModelSnapshot& merged, const SafetyMask& mask, const ProjectionSet& projections) {
  ModelSnapshot out = merged;
  for (int l = 0; l < merged.arch.n_layers; ++l) {
    const auto& row = mask_row(mask, l);
    if (std::count(row.begin(), row.end(), std::uint8_t{1}) == 0) continue;
    for (auto module : {kMlpGate, kMlpUp}) {
      const auto key = "layers." + std::to_string(l) + "." + std::string(module);
      auto it = projections.find(key);
      if (it == projections.end()) continue;
      const auto name = layer_tensor_name(l, module);
      const auto& w = merged.at(name);
      out.set(TensorRecord::from_matrix(name, apply_masked_projection(w.matrix(), row, it->second), w.dtype));
    }
  }
  return out;
}

EditFraction edit_fraction(std::span<const TensorRecord> before, std::span<const TensorRecord> after) {
  std::map<std::string_view, const TensorRecord*> lookup;
  for (const auto& r : after) lookup.emplace(r.name, &r);
  if (lookup.size() != before.size()) throw DataError("edit_fraction: before/after hold different tensor sets");
  EditFraction f;
  std::map<int, std::pair<std::uint64_t, std::uint64_t>> layer_counts;
  for (const auto& b : before) {
    auto it = lookup.find(b.name);
    if (it == lookup.end()) throw DataError("edit_fraction: '" + b.name + "' missing after edit");
    const auto& a = *it->second;
    if (a.shape != b.shape) throw DataError("edit_fraction: shape mismatch for '" + b.name + "'");
    const auto n = b.numel();
    std::uint64_t changed = 0;
    for (std::uint64_t i = 0; i < n; ++i) {
      const double x = b.at(static_cast<std::size_t>(i));
      const double y = a.at(static_cast<std::size_t>(i));
      // NaN payloads count as unchanged when both sides are NaN.
      changed += !(x == y || (x != x && y != y));
    }
    f.changed += changed;
    f.total += n;
    int layer;
    std::string module, suffix;
    if (parse_layer_tensor_name(b.name, layer, module, suffix)) {
      auto& lc = layer_counts[layer];
      lc.first += changed;
      lc.second += n;
    }
  }
  f.overall = f.total ? static_cast<double>(f.changed) / static_cast<double>(f.total) : 0.0;
  for (const auto& [l, c] : layer_counts)
    f.per_layer[l] = c.second ? static_cast<double>(c.first) / static_cast<double>(c.second) : 0.0;
  return f;
}

EditFraction edit_fraction(const ModelSnapshot& before, const ModelSnapshot& after) {
  return edit_fraction(before.records(), after.records());
}

EditFraction edit_fraction(const LoraAdapter& before, const LoraAdapter& after, AdapterScope scope) {
  auto pick = [scope](const LoraAdapter& a) {
    std::vector<TensorRecord> out;
    for (const auto& e : a.entries) {
      if (scope == AdapterScope::All)
        out.push_back(TensorRecord::from_matrix(layer_tensor_name(e.layer, e.module, "A"), e.A));
      if (scope == AdapterScope::All || is_neuron_row_module(e.module))
        out.push_back(TensorRecord::from_matrix(layer_tensor_name(e.layer, e.module, "B"), e.B));
    }
    return out;
  };
  return edit_fraction(pick(before), pick(after));
}

}  // namespace fgsn
