// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgsn/continual.hpp"
#include "fgsn/evaluator.hpp"
#include "fgsn/layer_probe.hpp"
#include "fgsn/neuron_localizer.hpp"
#include "fgsn/projector.hpp"

namespace fgsn {

/// Declarative run description. Relative paths resolve against the directory
/// of the config file. Unknown keys are rejected.
struct RunConfig {
  int version = 1;
  std::filesystem::path base;
  std::filesystem::path aligned;
  std::filesystem::path finetuned;  // defaults to `aligned` when omitted
  std::filesystem::path adapter;
  std::filesystem::path benign_corpus;
  std::filesystem::path harmful_corpus;
  std::optional<std::filesystem::path> lexicon;
  ThresholdPolicy policy;  // window is filled in by the probe stage
  WindowMode window_mode = WindowMode::Formula;
  Pooling pooling = Pooling::Mean;
  ProjectionKind projection = ProjectionKind::Gram;
  std::string dimension = "universal";
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::vector<SafetyLayerWindow> sweep_windows;  // empty: every window of width n+1

  /// Paths exist and policy percentiles are in range; throws ConfigError.
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_json(const RunConfig& cfg);  // normalized, for run records

/// Stage outputs under cfg.out:
///   probe/      profile.csv, window.json
///   traces/     one trace container per (model, corpus)
///   masks/TAG/  mask.json, mask.bin, stats.json
///   projected/TAG/  adapter.json, adapter.bin, change_report.json
///   continual/  adapter/, ledger.jsonl, dimensions/TAG.json
///   sweep/      sweep.csv, sweep.json
///   report.json
namespace stage_paths {
std::filesystem::path window(const RunConfig& cfg);
std::filesystem::path profile(const RunConfig& cfg);
std::filesystem::path mask_dir(const RunConfig& cfg, const std::string& tag);
std::filesystem::path projected_dir(const RunConfig& cfg, const std::string& tag);
std::filesystem::path continual_dir(const RunConfig& cfg);
std::filesystem::path ledger(const RunConfig& cfg);
std::filesystem::path sweep_csv(const RunConfig& cfg);
std::filesystem::path report(const RunConfig& cfg);
}  // namespace stage_paths

struct ProbeResult {
  LayerSimilarityProfile base;
  LayerSimilarityProfile aligned;
  SafetyLayerWindow window;
};

ProbeResult cmd_probe(const RunConfig& cfg);
SafetyMask cmd_localize(const RunConfig& cfg);
ProjectedAdapter cmd_project(const RunConfig& cfg);
ContinualResult cmd_continual(const RunConfig& cfg);
SweepReport cmd_sweep(const RunConfig& cfg);
nlohmann::json cmd_report(const RunConfig& cfg);

SafetyLayerWindow load_window(const std::filesystem::path& path);

/// Builds a self-contained toy setup in `dir`: base/aligned snapshots (aligned
/// perturbed in `planted_layers`), a LoRA adapter on every mlp.up / mlp.gate,
/// the bundled corpora, and a config.json pointing at all of it.
struct ToyOptions {
  TransformerConfig arch;
  std::vector<int> planted_layers{4, 5, 6};
  double magnitude = 0.5;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  double lora_b_scale = 0.05;
  std::filesystem::path corpus_dir;  // holds benign.txt and harmful_*.txt
};

std::filesystem::path make_toy(const std::filesystem::path& dir, const ToyOptions& options);

/// Random LoRA entries on mlp.up and mlp.gate of every layer.
LoraAdapter make_toy_adapter(const TransformerConfig& arch, int rank, double alpha, double b_scale,
                             std::uint64_t seed);

}  // namespace fgsn
