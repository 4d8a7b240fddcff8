// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fgsn/error.hpp"
#include "fgsn/layer_probe.hpp"
#include "fgsn/tensor_store.hpp"

namespace fgsn {

/// Neuron importance: (sum_i W(i, j)) * activation[j].
///
/// `input_weights` is laid out d_in x n_neurons, so column j holds the weights
/// feeding neuron j. A dense layer stored as [d_out, d_in] is passed transposed.
template <typename DerivedW, typename DerivedA>
Eigen::Matrix<typename DerivedW::Scalar, Eigen::Dynamic, 1> neuron_importance(
    const Eigen::MatrixBase<DerivedW>& input_weights, const Eigen::MatrixBase<DerivedA>& activations) {
  if (input_weights.cols() != activations.size())
    throw DataError("importance: " + std::to_string(input_weights.cols()) + " neurons but " +
                    std::to_string(activations.size()) + " activations");
  return input_weights.colwise().sum().transpose().cwiseProduct(activations);
}

/// |Top_x| for a population of n: ceil(x / 100 * n).
std::size_t top_count(double percent, std::size_t n);

/// Indices of the top `percent` scores, descending, ties broken by lower index.
template <typename Derived>
std::vector<int> top_indices(const Eigen::MatrixBase<Derived>& scores, double percent) {
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  idx.resize(top_count(percent, n));
  return idx;
}

struct ImportanceScores {
  std::vector<Eigen::VectorXd> harm;    // per layer, length d_ff
  std::vector<Eigen::VectorXd> benign;  // per layer, length d_ff
};

/// Scores every layer from the mlp.up weights of `model` and the corpus-mean
/// MLP activations of the two trace sets.
ImportanceScores score_layers(const ModelSnapshot& model, const TraceSet& harm, const TraceSet& benign);

/// Corpus mean of mlp_act_mean at one layer.
Eigen::VectorXd mean_activation(const TraceSet& traces, int layer);

struct ThresholdPolicy {
  double q = 20.0;      // base safety percentile
  double p = 20.0;      // benign-exclusion percentile
  double delta = 10.0;  // boost inside the safety window, percentage points
  int n = 5;            // window extent
  SafetyLayerWindow window;

  /// Throws ConfigError unless 0 <= p, q <= 100, q + delta <= 100, delta >= 0, n < L.
  void validate(int n_layers) const;

  bool operator==(const ThresholdPolicy&) const = default;
};

void to_json(nlohmann::json& j, const ThresholdPolicy& p);
void from_json(const nlohmann::json& j, ThresholdPolicy& p);

/// (q_l, p_l): q + delta inside the window, q outside; p is never boosted.
std::pair<double, double> effective_thresholds(const ThresholdPolicy& policy, int layer) noexcept;

struct SafetyMask {
  std::string dimension_tag;
  ThresholdPolicy policy;
  std::vector<std::string> created_from;
  std::vector<std::vector<std::uint8_t>> layers;  // per layer, 0/1 per neuron

  int n_layers() const noexcept { return static_cast<int>(layers.size()); }
  std::size_t count(int layer) const;
  std::size_t count() const;
  std::vector<int> selected(int layer) const;
  bool empty() const { return count() == 0; }

  bool operator==(const SafetyMask&) const = default;
};

/// Mask_l[j] = 1 iff j in Top_{q_l}(harm) and j not in Top_{p_l}(benign).
SafetyMask build_mask(const ImportanceScores& scores, const ThresholdPolicy& policy, std::string dimension_tag = {});

/// A mask with the given selected neurons per layer; for tests and constructed scenarios.
SafetyMask mask_from_indices(int n_layers, int d_ff, const std::vector<std::vector<int>>& selected,
                             std::string dimension_tag = {});

/// Directory layout: mask.json manifest + mask.bin with "layers.{l}.mask" tensors.
void save_mask(const SafetyMask& mask, const std::filesystem::path& dir);
SafetyMask load_mask(const std::filesystem::path& dir);

/// Parameters owned by one neuron row in each layer and the total they are
/// measured against. Derived from an adapter: row width = sum of B ranks over
/// the mask-addressable modules.
struct ParameterGeometry {
  std::vector<std::uint64_t> params_per_neuron;
  std::uint64_t total_params = 0;
};

ParameterGeometry adapter_geometry(const LoraAdapter& adapter, int n_layers);

struct MaskOverlap {
  std::size_t a = 0, b = 0;  // mask indices
  std::vector<std::size_t> per_layer;
  std::vector<std::optional<double>> jaccard_per_layer;  // nullopt when both sets are empty
  std::size_t total = 0;
  std::optional<double> jaccard;
};

struct MaskStats {
  std::vector<std::string> tags;
  std::vector<std::vector<std::size_t>> counts;  // [mask][layer]
  std::vector<std::size_t> totals;               // [mask]
  std::vector<MaskOverlap> overlaps;             // every pair a < b
  std::vector<double> neuron_fraction;           // [mask], selected / (L * d_ff)
  std::vector<std::optional<double>> param_fraction;  // [mask], when geometry is given
  std::optional<double> union_param_fraction;

  nlohmann::json to_json() const;
  std::string to_csv() const;  // layer,tag,count plus overlap rows
};

MaskStats mask_stats(std::span<const SafetyMask> masks, const ParameterGeometry* geometry = nullptr);

}  // namespace fgsn
