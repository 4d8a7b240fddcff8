// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/continual.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace fgsn {

using json = nlohmann::json;

namespace {

constexpr std::string_view kLedgerFormat = "fgsn-ledger";

std::string hash_hex(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t parse_hash_hex(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw DataError("ledger: malformed baseline hash '" + s + "'");
  return std::stoull(s, nullptr, 16);
}

}  // namespace

ProjectionLedger ProjectionLedger::for_baseline(const LoraAdapter& baseline, const TransformerConfig& arch) {
  return ProjectionLedger(baseline.content_hash(), arch.n_layers, arch.d_ff);
}

void ProjectionLedger::add(int layer, int neuron, const std::string& dimension, std::uint64_t step) {
  if (layer < 0 || layer >= n_layers_ || neuron < 0 || neuron >= d_ff_)
    throw DataError("ledger: (" + std::to_string(layer) + ", " + std::to_string(neuron) + ") is outside the geometry");
  if (!index_.insert({layer, neuron}).second)
    throw DataError("ledger: (" + std::to_string(layer) + ", " + std::to_string(neuron) + ") was already projected");
  entries_.push_back({layer, neuron, dimension, step});
}

void ProjectionLedger::verify_baseline(const LoraAdapter& adapter) const {
  const auto h = adapter.content_hash();
  if (h != baseline_hash_)
    throw DataError("ledger: baseline hash mismatch (ledger " + hash_hex(baseline_hash_) + ", adapter " + hash_hex(h) +
                    "); the ledger belongs to a different fine-tuned adapter");
}

std::string format_ledger(const ProjectionLedger& ledger) {
  std::string out = json{{"format", kLedgerFormat},
                         {"version", 1},
                         {"baseline_hash", hash_hex(ledger.baseline_hash())},
                         {"n_layers", ledger.n_layers()},
                         {"d_ff", ledger.d_ff()},
                         {"steps", ledger.steps()}}
                        .dump();
  out += '\n';
  for (const auto& e : ledger.entries()) {
    out += json{{"layer", e.layer}, {"neuron", e.neuron}, {"dimension", e.dimension}, {"step", e.step}}.dump();
    out += '\n';
  }
  return out;
}

ProjectionLedger parse_ledger(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("ledger: empty file");
  ProjectionLedger ledger;
  std::uint64_t steps = 0;
  try {
    const auto header = json::parse(line);
    if (header.at("format").get<std::string>() != kLedgerFormat || header.at("version").get<int>() != 1)
      throw DataError("ledger: unsupported format header");
    ledger = ProjectionLedger(parse_hash_hex(header.at("baseline_hash").get<std::string>()),
                              header.at("n_layers").get<int>(), header.at("d_ff").get<int>());
    steps = header.at("steps").get<std::uint64_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto e = json::parse(line);
      const auto step = e.at("step").get<std::uint64_t>();
      if (step >= steps) throw DataError("ledger: entry step exceeds recorded step count");
      ledger.add(e.at("layer").get<int>(), e.at("neuron").get<int>(), e.at("dimension").get<std::string>(), step);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("ledger: corrupt file: ") + e.what());
  }
  while (ledger.steps() < steps) ledger.finish_step();
  return ledger;
}

void ledger_save(const ProjectionLedger& ledger, const std::filesystem::path& path) {
  write_text_file(path, format_ledger(ledger));
}

ProjectionLedger ledger_load(const std::filesystem::path& path, const LoraAdapter* baseline) {
  ProjectionLedger ledger;
  try {
    ledger = parse_ledger(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (baseline) ledger.verify_baseline(*baseline);
  return ledger;
}

Partition partition_new(const SafetyMask& mask, const ProjectionLedger& ledger) {
  if (mask.n_layers() != ledger.n_layers())
    throw DataError("partition: mask has " + std::to_string(mask.n_layers()) + " layers, ledger " +
                    std::to_string(ledger.n_layers()));
  Partition part{mask, mask};
  for (int l = 0; l < mask.n_layers(); ++l) {
    const auto& row = mask.layers[static_cast<std::size_t>(l)];
    if (static_cast<int>(row.size()) != ledger.d_ff())
      throw DataError("partition: mask width at layer " + std::to_string(l) + " does not match the ledger");
    for (std::size_t j = 0; j < row.size(); ++j) {
      const bool seen = ledger.contains(l, static_cast<int>(j));
      part.fresh.layers[static_cast<std::size_t>(l)][j] = row[j] && !seen;
      part.overlap.layers[static_cast<std::size_t>(l)][j] = row[j] && seen;
    }
  }
  return part;
}

json DimensionRecord::to_json() const {
  return {{"tag", tag},
          {"new_count", new_count},
          {"overlap_count", overlap_count},
          {"new_param_fraction", new_param_fraction},
          {"new_per_layer", new_per_layer},
          {"overlap_per_layer", overlap_per_layer}};
}

ContinualResult continual_apply(const LoraAdapter& adapter, const LoraAdapter& baseline, const SafetyMask& mask,
                                const ProjectionSet& projections, const ProjectionLedger& ledger,
                                const std::string& tag) {
  if (tag.empty()) throw ConfigError("continual: dimension tag must be nonempty");
  ledger.verify_baseline(baseline);
  if (adapter.entries.size() != baseline.entries.size())
    throw DataError("continual: adapter and baseline have different entries");

  const Partition part = partition_new(mask, ledger);
  ContinualResult out{adapter, ledger, {}};
  out.record.tag = tag;
  out.record.mask = mask;

  for (std::size_t i = 0; i < out.adapter.entries.size(); ++i) {
    auto& e = out.adapter.entries[i];
    const auto& base = baseline.entries[i];
    if (base.layer != e.layer || base.module != e.module || base.B.rows() != e.B.rows() || base.B.cols() != e.B.cols())
      throw DataError("continual: adapter entry " + e.key() + " does not match the baseline");
    if (!is_neuron_row_module(e.module)) continue;
    const auto& fresh = part.fresh.layers.at(static_cast<std::size_t>(e.layer));
    if (std::count(fresh.begin(), fresh.end(), std::uint8_t{1}) == 0) continue;
    auto it = projections.find(e.key());
    if (it == projections.end()) throw DataError("continual: no safety projection for " + e.key());
    e.B = apply_masked_projection(e.B, base.B, fresh, it->second);
  }

  const std::uint64_t step = ledger.steps();
  const auto geometry = adapter_geometry(adapter, mask.n_layers());
  std::uint64_t new_params = 0;
  for (int l = 0; l < mask.n_layers(); ++l) {
    const auto n_new = part.fresh.count(l);
    const auto n_old = part.overlap.count(l);
    out.record.new_per_layer.push_back(n_new);
    out.record.overlap_per_layer.push_back(n_old);
    out.record.new_count += n_new;
    out.record.overlap_count += n_old;
    new_params += n_new * geometry.params_per_neuron[static_cast<std::size_t>(l)];
    for (int j : part.fresh.selected(l)) out.ledger.add(l, j, tag, step);
  }
  out.ledger.finish_step();
  out.record.new_param_fraction =
      geometry.total_params ? static_cast<double>(new_params) / static_cast<double>(geometry.total_params) : 0.0;
  return out;
}

LoraAdapter replay_ledger(const LoraAdapter& baseline, const ProjectionLedger& ledger,
                          const ProjectionSet& projections) {
  ledger.verify_baseline(baseline);
  std::vector<std::vector<int>> selected(static_cast<std::size_t>(ledger.n_layers()));
  for (const auto& e : ledger.entries()) selected[static_cast<std::size_t>(e.layer)].push_back(e.neuron);
  const SafetyMask all = mask_from_indices(ledger.n_layers(), ledger.d_ff(), selected, "replay");
  LoraAdapter out = baseline;
  for (auto& e : out.entries) {
    if (!is_neuron_row_module(e.module)) continue;
    const auto& row = all.layers.at(static_cast<std::size_t>(e.layer));
    if (std::count(row.begin(), row.end(), std::uint8_t{1}) == 0) continue;
    auto it = projections.find(e.key());
    if (it == projections.end()) throw DataError("replay: no safety projection for " + e.key());
    e.B = apply_masked_projection(e.B, e.B, row, it->second);
  }
  return out;
}

std::set<NeuronRef> rows_differing(const LoraAdapter& adapter, const LoraAdapter& baseline) {
  if (adapter.entries.size() != baseline.entries.size())
    throw DataError("rows_differing: adapters have different entries");
  std::set<NeuronRef> out;
  for (std::size_t i = 0; i < adapter.entries.size(); ++i) {
    const auto& a = adapter.entries[i];
    const auto& b = baseline.entries[i];
    if (!is_neuron_row_module(a.module)) continue;
    if (a.B.rows() != b.B.rows() || a.B.cols() != b.B.cols())
      throw DataError("rows_differing: shape mismatch for " + a.key());
    for (Eigen::Index r = 0; r < a.B.rows(); ++r)
      if ((a.B.row(r).array() != b.B.row(r).array()).any()) out.insert({a.layer, static_cast<int>(r)});
  }
  return out;
}

}  // namespace fgsn
