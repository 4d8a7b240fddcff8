// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/neuron_localizer.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace fgsn {

using json = nlohmann::json;

std::size_t top_count(double percent, std::size_t n) {
  if (!(percent >= 0.0 && percent <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
  // The guard absorbs rounding in percent * n / 100 for non-integral percents.
  const double k = std::ceil(percent * static_cast<double>(n) / 100.0 - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

Eigen::VectorXd mean_activation(const TraceSet& traces, int layer) {
  if (traces.prompts.empty()) throw DataError("mean_activation: empty trace set '" + traces.corpus_tag + "'");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(traces.d_ff);
  for (const auto& p : traces.prompts) sum += p.layers.at(static_cast<std::size_t>(layer)).mlp_act_mean;
  return sum / static_cast<double>(traces.prompts.size());
}

ImportanceScores score_layers(const ModelSnapshot& model, const TraceSet& harm, const TraceSet& benign) {
  const int n_layers = model.arch.n_layers;
  if (harm.n_layers != n_layers || benign.n_layers != n_layers || harm.d_ff != model.arch.d_ff ||
      benign.d_ff != model.arch.d_ff)
    throw DataError("score_layers: trace geometry does not match the model");
  ImportanceScores scores;
  for (int l = 0; l < n_layers; ++l) {
    // mlp.up is stored [d_ff, d_model]; its transpose puts neuron j in column j.
    const Eigen::MatrixXd input_weights = model.matrix(layer_tensor_name(l, kMlpUp)).transpose();
    scores.harm.push_back(neuron_importance(input_weights, mean_activation(harm, l)));
    scores.benign.push_back(neuron_importance(input_weights, mean_activation(benign, l)));
  }
  return scores;
}

void ThresholdPolicy::validate(int n_layers) const {
  auto pct = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 100.0)) throw ConfigError(std::string("policy: ") + what + " must lie in [0, 100]");
  };
  pct(q, "q");
  pct(p, "p");
  if (!(delta >= 0.0)) throw ConfigError("policy: delta must be >= 0");
  if (q + delta > 100.0) throw ConfigError("policy: q + delta must not exceed 100");
  if (n < 0 || n >= n_layers) throw ConfigError("policy: window extent n must satisfy 0 <= n < L");
  if (window.start < 0 || window.start > window.end || window.end >= n_layers)
    throw ConfigError("policy: window must satisfy 0 <= start <= end < L");
}

void to_json(json& j, const ThresholdPolicy& p) {
  j = json{{"q", p.q},
           {"p", p.p},
           {"delta", p.delta},
           {"n", p.n},
           {"window", {{"start", p.window.start}, {"end", p.window.end}, {"mode", window_mode_tag(p.window.mode)}}}};
}

void from_json(const json& j, ThresholdPolicy& p) {
  p.q = j.at("q").get<double>();
  p.p = j.at("p").get<double>();
  p.delta = j.at("delta").get<double>();
  p.n = j.at("n").get<int>();
  const auto& w = j.at("window");
  p.window.start = w.at("start").get<int>();
  p.window.end = w.at("end").get<int>();
  p.window.mode = parse_window_mode(w.at("mode").get<std::string>());
}

std::pair<double, double> effective_thresholds(const ThresholdPolicy& policy, int layer) noexcept {
  return {policy.window.contains(layer) ? policy.q + policy.delta : policy.q, policy.p};
}

std::size_t SafetyMask::count(int layer) const {
  const auto& m = layers.at(static_cast<std::size_t>(layer));
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

std::size_t SafetyMask::count() const {
  std::size_t n = 0;
  for (int l = 0; l < n_layers(); ++l) n += count(l);
  return n;
}

std::vector<int> SafetyMask::selected(int layer) const {
  std::vector<int> out;
  const auto& m = layers.at(static_cast<std::size_t>(layer));
  for (std::size_t j = 0; j < m.size(); ++j)
    if (m[j]) out.push_back(static_cast<int>(j));
  return out;
}

SafetyMask build_mask(const ImportanceScores& scores, const ThresholdPolicy& policy, std::string dimension_tag) {
  const auto n_layers = static_cast<int>(scores.harm.size());
  if (scores.benign.size() != scores.harm.size()) throw DataError("build_mask: harm/benign layer counts differ");
  policy.validate(n_layers);
  SafetyMask mask;
  mask.dimension_tag = std::move(dimension_tag);
  mask.policy = policy;
  mask.layers.resize(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    const auto& harm = scores.harm[static_cast<std::size_t>(l)];
    const auto& benign = scores.benign[static_cast<std::size_t>(l)];
    if (harm.size() != benign.size()) throw DataError("build_mask: score lengths differ at layer " + std::to_string(l));
    if (!harm.allFinite() || !benign.allFinite())
      throw NumericalError("build_mask: non-finite importance score at layer " + std::to_string(l));
    const auto [q_l, p_l] = effective_thresholds(policy, l);
    auto& row = mask.layers[static_cast<std::size_t>(l)];
    row.assign(static_cast<std::size_t>(harm.size()), 0);
    for (int j : top_indices(harm, q_l)) row[static_cast<std::size_t>(j)] = 1;
    for (int j : top_indices(benign, p_l)) row[static_cast<std::size_t>(j)] = 0;
  }
  return mask;
}

SafetyMask mask_from_indices(int n_layers, int d_ff, const std::vector<std::vector<int>>& selected,
                             std::string dimension_tag) {
  SafetyMask mask;
  mask.dimension_tag = std::move(dimension_tag);
  mask.layers.assign(static_cast<std::size_t>(n_layers), std::vector<std::uint8_t>(static_cast<std::size_t>(d_ff), 0));
  if (selected.size() != mask.layers.size())
    throw DataError("mask: " + std::to_string(selected.size()) + " index lists for " + std::to_string(n_layers) +
                    " layers");
  for (std::size_t l = 0; l < selected.size(); ++l)
    for (int j : selected[l]) {
      if (j < 0 || j >= d_ff)
        throw DataError("mask: neuron " + std::to_string(j) + " out of range at layer " + std::to_string(l));
      mask.layers[l][static_cast<std::size_t>(j)] = 1;
    }
  return mask;
}

void save_mask(const SafetyMask& mask, const std::filesystem::path& dir) {
  std::vector<TensorRecord> records;
  for (int l = 0; l < mask.n_layers(); ++l) {
    const auto& m = mask.layers[static_cast<std::size_t>(l)];
    std::vector<double> v(m.begin(), m.end());
    records.push_back(TensorRecord::from_values("layers." + std::to_string(l) + ".mask",
                                                {static_cast<std::uint64_t>(v.size())}, v, DType::F32));
  }
  std::filesystem::create_directories(dir);
  save_container(records, dir / "mask.bin");
  const json manifest = {{"dimension_tag", mask.dimension_tag},
                         {"policy", mask.policy},
                         {"created_from", mask.created_from},
                         {"n_layers", mask.n_layers()}};
  write_text_file(dir / "mask.json", manifest.dump(2) + "\n");
}

SafetyMask load_mask(const std::filesystem::path& dir) {
  SafetyMask mask;
  int n_layers = 0;
  try {
    const auto manifest = json::parse(read_text_file(dir / "mask.json"));
    mask.dimension_tag = manifest.at("dimension_tag").get<std::string>();
    mask.policy = manifest.at("policy").get<ThresholdPolicy>();
    mask.created_from = manifest.at("created_from").get<std::vector<std::string>>();
    n_layers = manifest.at("n_layers").get<int>();
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/mask.json: " + e.what());
  }
  std::map<std::string, TensorRecord> tensors;
  for (auto& r : load_container(dir / "mask.bin")) {
    auto name = r.name;
    tensors.emplace(std::move(name), std::move(r));
  }
  if (tensors.size() != static_cast<std::size_t>(n_layers))
    throw DataError(dir.string() + ": mask container does not hold one tensor per layer");
  for (int l = 0; l < n_layers; ++l) {
    auto it = tensors.find("layers." + std::to_string(l) + ".mask");
    if (it == tensors.end() || it->second.shape.size() != 1)
      throw DataError(dir.string() + ": missing or malformed mask for layer " + std::to_string(l));
    std::vector<std::uint8_t> row(static_cast<std::size_t>(it->second.numel()));
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double v = it->second.at(j);
      if (v != 0.0 && v != 1.0) throw DataError(dir.string() + ": mask values must be 0 or 1");
      row[j] = v == 1.0 ? 1 : 0;
    }
    mask.layers.push_back(std::move(row));
  }
  return mask;
}

ParameterGeometry adapter_geometry(const LoraAdapter& adapter, int n_layers) {
  ParameterGeometry g;
  g.params_per_neuron.assign(static_cast<std::size_t>(n_layers), 0);
  g.total_params = adapter.parameter_count();
  for (const auto& e : adapter.entries) {
    if (is_neuron_row_module(e.module) && e.layer >= 0 && e.layer < n_layers)
      g.params_per_neuron[static_cast<std::size_t>(e.layer)] += static_cast<std::uint64_t>(e.B.cols());
  }
  return g;
}

MaskStats mask_stats(std::span<const SafetyMask> masks, const ParameterGeometry* geometry) {
  MaskStats st;
  if (masks.empty()) return st;
  const int n_layers = masks.front().n_layers();
  for (const auto& m : masks) {
    if (m.n_layers() != n_layers) throw DataError("mask_stats: masks differ in layer count");
    for (int l = 0; l < n_layers; ++l)
      if (m.layers[static_cast<std::size_t>(l)].size() != masks.front().layers[static_cast<std::size_t>(l)].size())
        throw DataError("mask_stats: masks differ in width at layer " + std::to_string(l));
  }
  if (geometry && geometry->params_per_neuron.size() != static_cast<std::size_t>(n_layers))
    throw DataError("mask_stats: parameter geometry has the wrong layer count");

  std::size_t neurons = 0;
  for (const auto& row : masks.front().layers) neurons += row.size();

  auto touched = [&](auto&& selected_in_layer) {
    std::uint64_t params = 0;
    for (int l = 0; l < n_layers; ++l)
      params += selected_in_layer(l) * geometry->params_per_neuron[static_cast<std::size_t>(l)];
    return geometry->total_params ? static_cast<double>(params) / static_cast<double>(geometry->total_params) : 0.0;
  };

  for (const auto& m : masks) {
    st.tags.push_back(m.dimension_tag);
    std::vector<std::size_t> c;
    for (int l = 0; l < n_layers; ++l) c.push_back(m.count(l));
    st.totals.push_back(m.count());
    st.counts.push_back(std::move(c));
    st.neuron_fraction.push_back(neurons ? static_cast<double>(m.count()) / static_cast<double>(neurons) : 0.0);
    if (geometry) st.param_fraction.push_back(touched([&](int l) { return m.count(l); }));
    else st.param_fraction.push_back(std::nullopt);
  }

  if (geometry) {
    st.union_param_fraction = touched([&](int l) {
      std::size_t n = 0;
      const auto width = masks.front().layers[static_cast<std::size_t>(l)].size();
      for (std::size_t j = 0; j < width; ++j) {
        bool any = false;
        for (const auto& m : masks) any = any || m.layers[static_cast<std::size_t>(l)][j];
        n += any;
      }
      return n;
    });
  }

  auto jaccard = [](std::size_t inter, std::size_t uni) -> std::optional<double> {
    if (uni == 0) return std::nullopt;
    return static_cast<double>(inter) / static_cast<double>(uni);
  };
  for (std::size_t a = 0; a < masks.size(); ++a) {
    for (std::size_t b = a + 1; b < masks.size(); ++b) {
      MaskOverlap ov{a, b, {}, {}, 0, std::nullopt};
      std::size_t total_union = 0;
      for (int l = 0; l < n_layers; ++l) {
        const auto& ra = masks[a].layers[static_cast<std::size_t>(l)];
        const auto& rb = masks[b].layers[static_cast<std::size_t>(l)];
        std::size_t inter = 0, uni = 0;
        for (std::size_t j = 0; j < ra.size(); ++j) {
          inter += (ra[j] && rb[j]);
          uni += (ra[j] || rb[j]);
        }
        ov.per_layer.push_back(inter);
        ov.jaccard_per_layer.push_back(jaccard(inter, uni));
        ov.total += inter;
        total_union += uni;
      }
      ov.jaccard = jaccard(ov.total, total_union);
      st.overlaps.push_back(std::move(ov));
    }
  }
  return st;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json MaskStats::to_json() const {
  json j;
  j["tags"] = tags;
  j["counts"] = counts;
  j["totals"] = totals;
  j["neuron_fraction"] = neuron_fraction;
  json pf = json::array();
  for (const auto& v : param_fraction) pf.push_back(optional_json(v));
  j["param_fraction"] = pf;
  j["union_param_fraction"] = optional_json(union_param_fraction);
  json ovs = json::array();
  for (const auto& o : overlaps) {
    json jl = json::array();
    for (const auto& v : o.jaccard_per_layer) jl.push_back(optional_json(v));
    ovs.push_back({{"a", tags[o.a]},
                   {"b", tags[o.b]},
                   {"per_layer", o.per_layer},
                   {"jaccard_per_layer", jl},
                   {"total", o.total},
                   {"jaccard", optional_json(o.jaccard)}});
  }
  j["overlaps"] = ovs;
  return j;
}

std::string MaskStats::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "kind,layer,a,b,count,jaccard\n";
  for (std::size_t m = 0; m < tags.size(); ++m)
    for (std::size_t l = 0; l < counts[m].size(); ++l) out << "count," << l << "," << tags[m] << ",," << counts[m][l] << ",\n";
  for (const auto& o : overlaps) {
    for (std::size_t l = 0; l < o.per_layer.size(); ++l) {
      out << "overlap," << l << "," << tags[o.a] << "," << tags[o.b] << "," << o.per_layer[l] << ",";
      if (o.jaccard_per_layer[l]) out << *o.jaccard_per_layer[l];
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace fgsn
