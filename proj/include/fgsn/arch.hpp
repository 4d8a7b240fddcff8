// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace fgsn {

/// Geometry of the decoder-only reference transformer.
struct TransformerConfig {
  int n_layers = 12;
  int d_model = 32;
  int d_ff = 64;
  int n_heads = 4;
  int vocab_size = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a dimension is non-positive or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const TransformerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

// Per-layer modules. The MLP is gated: act = silu(gate x) * (up x), out = down act.
inline constexpr std::string_view kAttnNorm = "attn_norm";
inline constexpr std::string_view kAttnQ = "attn.q";
inline constexpr std::string_view kAttnK = "attn.k";
inline constexpr std::string_view kAttnV = "attn.v";
inline constexpr std::string_view kAttnO = "attn.o";
inline constexpr std::string_view kMlpNorm = "mlp_norm";
inline constexpr std::string_view kMlpGate = "mlp.gate";
inline constexpr std::string_view kMlpUp = "mlp.up";
inline constexpr std::string_view kMlpDown = "mlp.down";

inline constexpr std::string_view kEmbedName = "embed.weight";
inline constexpr std::string_view kFinalNormName = "final_norm.weight";

/// "layers.{k}.{module}.{suffix}" with suffix one of weight, A, B, mask.
std::string layer_tensor_name(int layer, std::string_view module, std::string_view suffix = "weight");

/// Parses a name produced by layer_tensor_name. Returns false for global tensors.
bool parse_layer_tensor_name(std::string_view name, int& layer, std::string& module, std::string& suffix);

struct TensorSpec {
  std::string name;
  std::vector<std::uint64_t> shape;
};

/// Every tensor a complete snapshot of this geometry must contain, sorted by name.
std::vector<TensorSpec> required_tensors(const TransformerConfig& config);
std::vector<std::string> required_tensor_names(const TransformerConfig& config);

/// True for modules whose output rows are MLP hidden units (mask-addressable).
bool is_neuron_row_module(std::string_view module);

}  // namespace fgsn
