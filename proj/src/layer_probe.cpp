// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/layer_probe.hpp"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "fgsn/error.hpp"

namespace fgsn {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& field) {
  if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(field.c_str(), &end);
  if (end != field.c_str() + field.size()) throw DataError("profile csv: bad number '" + field + "'");
  return v;
}

}  // namespace

PromptCorpus load_corpus(const std::filesystem::path& path, CorpusLabel label, const TransformerConfig& config,
                         std::string tag) {
  PromptCorpus corpus;
  corpus.tag = tag.empty() ? path.stem().string() : std::move(tag);
  corpus.label = label;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    corpus.prompts.push_back(tokenize(line, config));
    corpus.texts.push_back(std::move(line));
  }
  if (corpus.prompts.empty()) throw DataError("corpus '" + path.string() + "' has no prompts");
  return corpus;
}

std::string_view window_mode_tag(WindowMode m) noexcept { return m == WindowMode::Formula ? "formula" : "data"; }

WindowMode parse_window_mode(std::string_view tag) {
  if (tag == "formula") return WindowMode::Formula;
  if (tag == "data" || tag == "data_driven") return WindowMode::DataDriven;
  throw ConfigError("unknown window mode '" + std::string(tag) + "' (expected formula or data)");
}

LayerMeanStates mean_states(std::span<const HiddenStateTrace> traces) {
  if (traces.empty()) throw DataError("mean_states: empty trace collection");
  const auto n_layers = traces.front().layers.size();
  LayerMeanStates out;
  out.layers.reserve(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    const auto dim = traces.front().layers[k].hidden_mean.size();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    for (const auto& t : traces) {
      if (t.layers.size() != n_layers || t.layers[k].hidden_mean.size() != dim)
        throw DataError("mean_states: traces have mismatched shapes");
      sum += t.layers[k].hidden_mean;
    }
    out.layers.push_back(sum / static_cast<double>(traces.size()));
  }
  return out;
}

LayerSimilarityProfile cosine_profile(const LayerMeanStates& benign, const LayerMeanStates& harm, ModelTag tag) {
  if (benign.layers.size() != harm.layers.size())
    throw DataError("cosine_profile: benign and harmful states have different layer counts");
  const auto n = static_cast<Eigen::Index>(benign.layers.size());
  LayerSimilarityProfile p;
  p.tag = tag;
  p.sim.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& b = benign.layers[static_cast<std::size_t>(k)];
    const auto& h = harm.layers[static_cast<std::size_t>(k)];
    if (b.size() != h.size()) throw DataError("cosine_profile: d_model mismatch at layer " + std::to_string(k));
    const auto s = cosine_similarity(b, h);
    if (!s) throw NumericalError("cosine_profile: zero-norm mean state at layer " + std::to_string(k));
    p.sim[k] = *s;
  }
  p.grad = forward_difference(p.sim);
  return p;
}

namespace {

SafetyLayerWindow steepest_window(const Eigen::VectorXd& grad, int n_layers, int n) {
  SafetyLayerWindow best{0, n, WindowMode::DataDriven};
  double best_score = std::numeric_limits<double>::infinity();
  for (int s = 0; s + n <= n_layers - 1; ++s) {
    double score = 0.0;
    for (int k = s; k <= std::min(s + n, n_layers - 2); ++k) score += grad[k];
    if (score < best_score) {
      best_score = score;
      best = {s, s + n, WindowMode::DataDriven};
    }
  }
  return best;
}

}  // namespace

SafetyLayerWindow select_window(const LayerSimilarityProfile* profile, int n_layers, int n, WindowMode mode) {
  if (n_layers < 1) throw ConfigError("select_window: layer count must be >= 1");
  if (n < 0 || n >= n_layers) throw ConfigError("select_window: window extent n must satisfy 0 <= n < L");
  if (mode == WindowMode::Formula) {
    const int start = n_layers / 3;
    return {start, std::min(start + n, n_layers - 1), WindowMode::Formula};
  }
  if (!profile) throw ConfigError("select_window: data-driven mode needs a similarity profile");
  if (profile->sim.size() != n_layers || profile->grad.size() != n_layers - 1)
    throw DataError("select_window: profile length does not match layer count");
  return steepest_window(profile->grad, n_layers, n);
}

SafetyLayerWindow select_divergence_window(const LayerSimilarityProfile& aligned, const LayerSimilarityProfile& base,
                                           int n) {
  const auto n_layers = static_cast<int>(aligned.sim.size());
  if (base.sim.size() != aligned.sim.size()) throw DataError("select_window: profiles differ in layer count");
  if (n < 0 || n >= n_layers) throw ConfigError("select_window: window extent n must satisfy 0 <= n < L");
  return steepest_window(aligned.grad - base.grad, n_layers, n);
}

std::string format_profile_report(const LayerSimilarityProfile& base, const LayerSimilarityProfile& aligned) {
  if (base.sim.size() != aligned.sim.size()) throw DataError("profile report: profiles differ in layer count");
  std::string out = "layer,sim_base,sim_aligned,grad_base,grad_aligned\n";
  const auto n = base.sim.size();
  for (Eigen::Index k = 0; k < n; ++k) {
    out += std::to_string(k) + "," + format_double(base.sim[k]) + "," + format_double(aligned.sim[k]) + ",";
    if (k + 1 < n) out += format_double(base.grad[k]) + "," + format_double(aligned.grad[k]);
    else out += ",";
    out += "\n";
  }
  return out;
}

void emit_profile_report(const LayerSimilarityProfile& base, const LayerSimilarityProfile& aligned,
                         const std::filesystem::path& path) {
  write_text_file(path, format_profile_report(base, aligned));
}

std::pair<LayerSimilarityProfile, LayerSimilarityProfile> parse_profile_report(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != "layer,sim_base,sim_aligned,grad_base,grad_aligned")
    throw DataError("profile csv: unexpected header");
  std::vector<std::array<double, 4>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 5) throw DataError("profile csv: expected 5 columns");
    if (std::stoul(fields[0]) != rows.size()) throw DataError("profile csv: layers out of order");
    rows.push_back({parse_double(fields[1]), parse_double(fields[2]), parse_double(fields[3]),
                    parse_double(fields[4])});
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  LayerSimilarityProfile base{Eigen::VectorXd(n), Eigen::VectorXd(std::max<Eigen::Index>(n - 1, 0)), ModelTag::Base};
  LayerSimilarityProfile aligned{Eigen::VectorXd(n), Eigen::VectorXd(std::max<Eigen::Index>(n - 1, 0)),
                                 ModelTag::Aligned};
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = rows[static_cast<std::size_t>(k)];
    base.sim[k] = r[0];
    aligned.sim[k] = r[1];
    if (k + 1 < n) {
      base.grad[k] = r[2];
      aligned.grad[k] = r[3];
    }
  }
  return {base, aligned};
}

}  // namespace fgsn
