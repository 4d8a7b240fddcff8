// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fgsn/layer_probe.hpp"
#include "fgsn/neuron_localizer.hpp"
#include "fgsn/projector.hpp"
#include "fgsn/transformer.hpp"

namespace fgsn {

/// Case-insensitive substring phrases marking a refusal.
struct RefusalLexicon {
  std::vector<std::string> phrases;

  static RefusalLexicon defaults();

  /// Throws ConfigError when empty or when a phrase is empty.
  void validate() const;
  bool matches(std::string_view response) const;
};

/// One phrase per non-empty line.
RefusalLexicon load_lexicon(const std::filesystem::path& path);

struct AsrReport {
  std::size_t n_prompts = 0;
  std::size_t n_attack_success = 0;
  double asr = 0.0;
  std::vector<bool> success;  // per response: no refusal phrase found

  nlohmann::json to_json() const;
};

/// A response is an attack success iff it contains no lexicon phrase.
AsrReport keyword_asr(std::span<const std::string> responses, const RefusalLexicon& lexicon);

/// Deterministic stand-in for decoding. The refusal direction is the aligned
/// model's final-layer harmful-minus-benign mean; a prompt is refused when its
/// final-layer state projects past the midpoint of the two corpus means.
class ToyResponder {
public:
  ToyResponder(const TraceSet& aligned_benign, const TraceSet& aligned_harm);

  static constexpr std::string_view kRefusal = "I'm sorry, but I cannot help with that request.";
  static constexpr std::string_view kCompliance = "Sure, here is a detailed answer to your request.";

  double score(const HiddenStateTrace& trace) const;
  std::string respond(const HiddenStateTrace& trace) const;
  std::vector<std::string> respond(const TraceSet& traces) const;

  double threshold() const noexcept { return threshold_; }

private:
  Eigen::VectorXd direction_;
  double threshold_ = 0.0;
};

/// Fixed inputs of a localize -> project run, shared by every swept window.
struct SweepSetup {
  ModelSnapshot base;
  ModelSnapshot aligned;
  ModelSnapshot finetuned;  // the model the adapter was trained on
  LoraAdapter adapter;
  std::vector<std::vector<int>> benign;
  std::vector<std::vector<int>> harmful;
  ThresholdPolicy policy;  // window field is replaced per sweep row
  Pooling pooling = Pooling::Mean;
  ProjectionKind projection = ProjectionKind::Gram;
  RefusalLexicon lexicon = RefusalLexicon::defaults();
};

struct SweepRow {
  SafetyLayerWindow window;
  std::vector<std::size_t> mask_per_layer;
  std::size_t mask_count = 0;
  double edit_fraction = 0.0;
  double asr = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  double baseline_asr = 0.0;  // unprojected fine-tuned model

  std::string to_csv() const;  // window_start,window_end,mask_count,edit_fraction,asr
  nlohmann::json to_json() const;
};

SweepReport window_sweep(const SweepSetup& setup, std::span<const SafetyLayerWindow> windows);

/// All windows [s, s+n] that fit in L layers.
std::vector<SafetyLayerWindow> all_windows(int n_layers, int n);

}  // namespace fgsn
