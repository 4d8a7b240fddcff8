// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgsn/neuron_localizer.hpp"
#include "fgsn/projector.hpp"
#include "fgsn/tensor_store.hpp"

namespace fgsn {

using NeuronRef = std::pair<int, int>;  // (layer, neuron)

struct LedgerEntry {
  int layer = 0;
  int neuron = 0;
  std::string dimension;
  std::uint64_t step = 0;  // index of the continual application that projected it

  bool operator==(const LedgerEntry&) const = default;
};

/// Every (layer, neuron) whose adapter rows were projected, at most once each,
/// bound to the fine-tuned adapter they were projected from.
class ProjectionLedger {
public:
  ProjectionLedger() = default;
  ProjectionLedger(std::uint64_t baseline_hash, int n_layers, int d_ff)
      : baseline_hash_(baseline_hash), n_layers_(n_layers), d_ff_(d_ff) {}

  /// Fresh ledger bound to `baseline`; geometry comes from arch.
  static ProjectionLedger for_baseline(const LoraAdapter& baseline, const TransformerConfig& arch);

  std::uint64_t baseline_hash() const noexcept { return baseline_hash_; }
  int n_layers() const noexcept { return n_layers_; }
  int d_ff() const noexcept { return d_ff_; }
  std::uint64_t steps() const noexcept { return steps_; }
  const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  bool contains(int layer, int neuron) const { return index_.contains({layer, neuron}); }
  std::set<NeuronRef> neurons() const { return index_; }

  /// Throws DataError if the pair is already recorded or out of geometry.
  void add(int layer, int neuron, const std::string& dimension, std::uint64_t step);

  /// Marks the end of one continual application (even one that added nothing).
  void finish_step() noexcept { ++steps_; }

  /// Throws DataError when `adapter` is not the baseline this ledger belongs to.
  void verify_baseline(const LoraAdapter& adapter) const;

  bool operator==(const ProjectionLedger& o) const {
    return baseline_hash_ == o.baseline_hash_ && n_layers_ == o.n_layers_ && d_ff_ == o.d_ff_ &&
           steps_ == o.steps_ && entries_ == o.entries_;
  }

private:
  std::uint64_t baseline_hash_ = 0;
  int n_layers_ = 0;
  int d_ff_ = 0;
  std::uint64_t steps_ = 0;
  std::vector<LedgerEntry> entries_;
  std::set<NeuronRef> index_;
};

/// JSON-lines: a header object, then one entry object per line.
std::string format_ledger(const ProjectionLedger& ledger);
ProjectionLedger parse_ledger(std::string_view text);

void ledger_save(const ProjectionLedger& ledger, const std::filesystem::path& path);

/// When `baseline` is given the stored hash must match it.
ProjectionLedger ledger_load(const std::filesystem::path& path, const LoraAdapter* baseline = nullptr);

struct Partition {
  SafetyMask fresh;    // N_new: masked and not yet in the ledger
  SafetyMask overlap;  // masked and already projected
};

Partition partition_new(const SafetyMask& mask, const ProjectionLedger& ledger);

struct DimensionRecord {
  std::string tag;
  SafetyMask mask;
  std::vector<std::size_t> new_per_layer;
  std::vector<std::size_t> overlap_per_layer;
  std::size_t new_count = 0;
  std::size_t overlap_count = 0;
  double new_param_fraction = 0.0;  // newly projected adapter scalars / all adapter scalars

  nlohmann::json to_json() const;
};

struct ContinualResult {
  LoraAdapter adapter;
  ProjectionLedger ledger;
  DimensionRecord record;
};

/// Projects only N_new rows. Projected rows are computed from `baseline`, so
/// the outcome depends on which pairs were projected and not on the order.
ContinualResult continual_apply(const LoraAdapter& adapter, const LoraAdapter& baseline, const SafetyMask& mask,
                                const ProjectionSet& projections, const ProjectionLedger& ledger,
                                const std::string& tag);

/// Re-derives the adapter the ledger describes by projecting all of its rows from baseline.
LoraAdapter replay_ledger(const LoraAdapter& baseline, const ProjectionLedger& ledger,
                          const ProjectionSet& projections);

/// Value-comparison cross-check: (layer, neuron) pairs whose B rows differ from baseline.
std::set<NeuronRef> rows_differing(const LoraAdapter& adapter, const LoraAdapter& baseline);

}  // namespace fgsn
