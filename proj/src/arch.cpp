// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/arch.hpp"

#include <algorithm>
#include <charconv>

#include "fgsn/error.hpp"

namespace fgsn {

void TransformerConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("transformer config: ") + what + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) throw ConfigError("transformer config: d_model must be divisible by n_heads");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"d_model", c.d_model},         {"d_ff", c.d_ff},
                     {"n_heads", c.n_heads},     {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  static const std::vector<std::string> keys = {"n_layers",   "d_model",     "d_ff", "n_heads",
                                                "vocab_size", "max_seq_len", "seed"};
  if (!j.is_object()) throw ConfigError("transformer config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("transformer config: unknown key '" + k + "'");
  }
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("transformer config: ") + e.what());
  }
  c.validate();
}

std::string layer_tensor_name(int layer, std::string_view module, std::string_view suffix) {
  std::string out = "layers.";
  out += std::to_string(layer);
  out += '.';
  out += module;
  out += '.';
  out += suffix;
  return out;
}

bool parse_layer_tensor_name(std::string_view name, int& layer, std::string& module, std::string& suffix) {
  constexpr std::string_view prefix = "layers.";
  if (!name.starts_with(prefix)) return false;
  name.remove_prefix(prefix.size());
  const auto dot = name.find('.');
  if (dot == std::string_view::npos || dot == 0) return false;
  auto [ptr, ec] = std::from_chars(name.data(), name.data() + dot, layer);
  if (ec != std::errc{} || ptr != name.data() + dot) return false;
  name.remove_prefix(dot + 1);
  const auto last = name.rfind('.');
  if (last == std::string_view::npos || last == 0 || last + 1 == name.size()) return false;
  module = std::string(name.substr(0, last));
  suffix = std::string(name.substr(last + 1));
  return true;
}

std::vector<TensorSpec> required_tensors(const TransformerConfig& config) {
  const auto dm = static_cast<std::uint64_t>(config.d_model);
  const auto dff = static_cast<std::uint64_t>(config.d_ff);
  std::vector<TensorSpec> specs{{std::string(kEmbedName), {static_cast<std::uint64_t>(config.vocab_size), dm}},
                                {std::string(kFinalNormName), {dm}}};
  for (int k = 0; k < config.n_layers; ++k) {
    specs.push_back({layer_tensor_name(k, kAttnNorm), {dm}});
    for (auto module : {kAttnQ, kAttnK, kAttnV, kAttnO}) specs.push_back({layer_tensor_name(k, module), {dm, dm}});
    specs.push_back({layer_tensor_name(k, kMlpNorm), {dm}});
    specs.push_back({layer_tensor_name(k, kMlpGate), {dff, dm}});
    specs.push_back({layer_tensor_name(k, kMlpUp), {dff, dm}});
    specs.push_back({layer_tensor_name(k, kMlpDown), {dm, dff}});
  }
  std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return specs;
}

std::vector<std::string> required_tensor_names(const TransformerConfig& config) {
  std::vector<std::string> names;
  for (auto& spec : required_tensors(config)) names.push_back(std::move(spec.name));
  return names;
}

bool is_neuron_row_module(std::string_view module) { return module == kMlpUp || module == kMlpGate; }

}  // namespace fgsn
