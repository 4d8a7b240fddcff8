// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fgsn/arch.hpp"
#include "fgsn/tensor_store.hpp"

namespace fgsn {

/// How per-position block outputs are reduced to one vector per layer.
enum class Pooling { Mean, Last };

std::string_view pooling_tag(Pooling p) noexcept;
Pooling parse_pooling(std::string_view tag);

struct LayerState {
  Eigen::VectorXd hidden_mean;   // d_model, residual stream after the block
  Eigen::VectorXd mlp_act_mean;  // d_ff, gated activation feeding mlp.down
};

/// Per-layer pooled states for one prompt.
struct HiddenStateTrace {
  std::vector<LayerState> layers;
};

/// Traces of one corpus through one model, in prompt order.
struct TraceSet {
  std::string corpus_tag;
  int n_layers = 0;
  int d_model = 0;
  int d_ff = 0;
  std::vector<HiddenStateTrace> prompts;

  /// Throws DataError on ragged shapes or non-finite values.
  void validate() const;
};

/// Deterministic 64-bit stream seed for the tensor `name` under `seed`.
std::uint64_t tensor_stream_seed(std::uint64_t seed, std::string_view name) noexcept;

/// Uniform values in [-1, 1) drawn from mt19937_64(stream_seed) in row-major order,
/// using the top 53 bits of each draw.
Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t stream_seed);

/// Pseudo-random weights fully determined by config (including config.seed).
ModelSnapshot init_model(const TransformerConfig& config, DType dtype = DType::F64);

/// Adds magnitude * uniform_matrix(...) to mlp.gate/up/down of each listed layer;
/// all other tensors are copied unchanged.
ModelSnapshot perturb_layers(const ModelSnapshot& snapshot, const std::set<int>& layers, double magnitude,
                             std::uint64_t seed);

/// Runs the pre-norm causal decoder and pools each block output over positions.
HiddenStateTrace forward_trace(const ModelSnapshot& snapshot, std::span<const int> tokens,
                               Pooling pooling = Pooling::Mean);

/// Byte-level toy tokenizer: token = byte % vocab_size, truncated to max_seq_len.
std::vector<int> tokenize(std::string_view text, const TransformerConfig& config);

/// Traces every prompt (in parallel, results kept in prompt order).
TraceSet trace_corpus(const ModelSnapshot& snapshot, std::span<const std::vector<int>> prompts, Pooling pooling,
                      std::string corpus_tag);

/// Directory layout: trace.json manifest + trace.bin container with
/// "prompt_{i}/layer_{k}/hidden_mean" and "prompt_{i}/layer_{k}/mlp_act_mean".
void save_traces(const TraceSet& traces, const std::filesystem::path& dir);
TraceSet load_traces(const std::filesystem::path& dir);

}  // namespace fgsn
