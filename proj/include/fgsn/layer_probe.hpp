// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fgsn/transformer.hpp"

namespace fgsn {

enum class CorpusLabel { Benign, Harmful };

struct PromptCorpus {
  std::string tag;
  CorpusLabel label = CorpusLabel::Benign;
  std::vector<std::string> texts;
  std::vector<std::vector<int>> prompts;
};

/// One prompt per non-empty line, UTF-8, tokenized with the byte tokenizer.
PromptCorpus load_corpus(const std::filesystem::path& path, CorpusLabel label, const TransformerConfig& config,
                         std::string tag = {});

/// S(k): corpus-mean of pooled hidden states, one vector per layer.
struct LayerMeanStates {
  std::vector<Eigen::VectorXd> layers;
};

enum class ModelTag { Base, Aligned };

struct LayerSimilarityProfile {
  Eigen::VectorXd sim;   // length L
  Eigen::VectorXd grad;  // length L-1, sim[k+1] - sim[k]
  ModelTag tag = ModelTag::Aligned;
};

enum class WindowMode { Formula, DataDriven };

std::string_view window_mode_tag(WindowMode m) noexcept;  // "formula" / "data"
WindowMode parse_window_mode(std::string_view tag);

/// Inclusive layer range [start, end].
struct SafetyLayerWindow {
  int start = 0;
  int end = 0;
  WindowMode mode = WindowMode::Formula;

  bool contains(int layer) const noexcept { return layer >= start && layer <= end; }
  bool operator==(const SafetyLayerWindow&) const = default;
};

/// <a, b> / (|a| |b|) clamped to [-1, 1]. Returns nullopt when either norm is zero.
template <typename DerivedA, typename DerivedB>
std::optional<typename DerivedA::Scalar> cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                                           const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar aa = a.squaredNorm();
  const Scalar bb = b.squaredNorm();
  if (aa == Scalar(0) || bb == Scalar(0)) return std::nullopt;
  Scalar denom = std::sqrt(aa * bb);
  if (!std::isfinite(denom) || denom == Scalar(0)) denom = std::sqrt(aa) * std::sqrt(bb);
  return std::clamp(a.dot(b) / denom, Scalar(-1), Scalar(1));
}

/// Forward differences v[k+1] - v[k]; empty for inputs shorter than two.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> forward_difference(const Eigen::MatrixBase<Derived>& v) {
  const Eigen::Index n = v.size();
  if (n < 2) return Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>(0);
  return v.tail(n - 1) - v.head(n - 1);
}

LayerMeanStates mean_states(std::span<const HiddenStateTrace> traces);
inline LayerMeanStates mean_states(const TraceSet& traces) { return mean_states(traces.prompts); }

/// Per-layer cosine similarity between benign and harmful mean states.
/// Throws NumericalError naming the layer when a mean vector has zero norm.
LayerSimilarityProfile cosine_profile(const LayerMeanStates& benign, const LayerMeanStates& harm,
                                      ModelTag tag = ModelTag::Aligned);

/// Formula mode: [floor(L/3), floor(L/3) + n] clamped to L-1; `profile` may be null.
/// Data-driven mode: the window [s, s+n] minimizing sum_{k=s}^{min(s+n, L-2)} grad[k],
/// ties toward the smaller s.
SafetyLayerWindow select_window(const LayerSimilarityProfile* profile, int n_layers, int n, WindowMode mode);

/// Data-driven selection on the aligned-minus-base gradient: the window where the
/// aligned model's similarity falls fastest relative to the base model.
SafetyLayerWindow select_divergence_window(const LayerSimilarityProfile& aligned, const LayerSimilarityProfile& base,
                                           int n);

/// CSV with columns layer,sim_base,sim_aligned,grad_base,grad_aligned. The last
/// row's gradient fields are empty.
void emit_profile_report(const LayerSimilarityProfile& base, const LayerSimilarityProfile& aligned,
                         const std::filesystem::path& path);
std::string format_profile_report(const LayerSimilarityProfile& base, const LayerSimilarityProfile& aligned);

/// Inverse of emit_profile_report: returns (base, aligned).
std::pair<LayerSimilarityProfile, LayerSimilarityProfile> parse_profile_report(std::string_view csv);

}  // namespace fgsn
