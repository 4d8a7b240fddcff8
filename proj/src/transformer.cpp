// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/transformer.hpp"

#include <cmath>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "fgsn/error.hpp"
#include "fgsn/parallel.hpp"

namespace fgsn {

namespace {

using json = nlohmann::json;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kNormEps = 1e-6;

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct BlockWeights {
  VectorXd attn_norm, mlp_norm;
  MatrixXd q, k, v, o, gate, up, down;
};

struct ModelWeights {
  TransformerConfig arch;
  MatrixXd embed;
  std::vector<BlockWeights> blocks;

  explicit ModelWeights(const ModelSnapshot& s) : arch(s.arch) {
    if (const auto missing = s.missing_tensors(); !missing.empty())
      throw DataError("snapshot incomplete, missing '" + missing.front() + "'");
    embed = s.matrix(std::string(kEmbedName));
    blocks.resize(static_cast<std::size_t>(arch.n_layers));
    for (int l = 0; l < arch.n_layers; ++l) {
      auto& b = blocks[static_cast<std::size_t>(l)];
      b.attn_norm = s.at(layer_tensor_name(l, kAttnNorm)).values();
      b.mlp_norm = s.at(layer_tensor_name(l, kMlpNorm)).values();
      b.q = s.matrix(layer_tensor_name(l, kAttnQ));
      b.k = s.matrix(layer_tensor_name(l, kAttnK));
      b.v = s.matrix(layer_tensor_name(l, kAttnV));
      b.o = s.matrix(layer_tensor_name(l, kAttnO));
      b.gate = s.matrix(layer_tensor_name(l, kMlpGate));
      b.up = s.matrix(layer_tensor_name(l, kMlpUp));
      b.down = s.matrix(layer_tensor_name(l, kMlpDown));
    }
  }
};

// Row-wise RMS normalization with a learned gain.
MatrixXd rms_norm(const MatrixXd& x, const VectorXd& gain) {
  MatrixXd out(x.rows(), x.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    const double inv = 1.0 / std::sqrt(x.row(t).squaredNorm() / static_cast<double>(x.cols()) + kNormEps);
    out.row(t) = (x.row(t) * inv).cwiseProduct(gain.transpose());
  }
  return out;
}

MatrixXd causal_attention(const MatrixXd& n, const BlockWeights& b, int n_heads) {
  const Index seq = n.rows();
  const Index d_head = n.cols() / n_heads;
  const MatrixXd q = n * b.q.transpose();
  const MatrixXd k = n * b.k.transpose();
  const MatrixXd v = n * b.v.transpose();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  MatrixXd heads(seq, n.cols());
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * d_head, d_head);
    const auto kh = k.middleCols(h * d_head, d_head);
    const auto vh = v.middleCols(h * d_head, d_head);
    for (Index t = 0; t < seq; ++t) {
      VectorXd scores = (kh.topRows(t + 1) * qh.row(t).transpose()) * scale;
      scores = (scores.array() - scores.maxCoeff()).exp();
      scores /= scores.sum();
      heads.block(t, h * d_head, 1, d_head) = scores.transpose() * vh.topRows(t + 1);
    }
  }
  return heads * b.o.transpose();
}

HiddenStateTrace run_forward(const ModelWeights& w, std::span<const int> tokens, Pooling pooling) {
  const auto& arch = w.arch;
  if (tokens.empty()) throw DataError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > arch.max_seq_len)
    throw DataError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                    std::to_string(arch.max_seq_len));
  const auto seq = static_cast<Index>(tokens.size());
  MatrixXd x(seq, arch.d_model);
  for (Index t = 0; t < seq; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= arch.vocab_size) throw DataError("forward: token id " + std::to_string(id) + " out of range");
    x.row(t) = w.embed.row(id);
  }

  auto pool = [&](const MatrixXd& m) -> VectorXd {
    if (pooling == Pooling::Last) return m.row(seq - 1).transpose();
    return m.colwise().mean().transpose();
  };

  HiddenStateTrace trace;
  trace.layers.reserve(w.blocks.size());
  for (const auto& b : w.blocks) {
    x += causal_attention(rms_norm(x, b.attn_norm), b, arch.n_heads);
    const MatrixXd m = rms_norm(x, b.mlp_norm);
    const MatrixXd g = m * b.gate.transpose();
    const MatrixXd u = m * b.up.transpose();
    const MatrixXd act = (g.array() / (1.0 + (-g.array()).exp())) * u.array();
    x += act * b.down.transpose();
    trace.layers.push_back({pool(x), pool(act)});
  }
  return trace;
}

}  // namespace

std::string_view pooling_tag(Pooling p) noexcept { return p == Pooling::Mean ? "mean" : "last"; }

Pooling parse_pooling(std::string_view tag) {
  if (tag == "mean") return Pooling::Mean;
  if (tag == "last") return Pooling::Last;
  throw ConfigError("unknown pooling '" + std::string(tag) + "' (expected mean or last)");
}

void TraceSet::validate() const {
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    if (static_cast<int>(p.layers.size()) != n_layers)
      throw DataError("trace " + corpus_tag + ": prompt " + std::to_string(i) + " has wrong layer count");
    for (const auto& l : p.layers) {
      if (l.hidden_mean.size() != d_model || l.mlp_act_mean.size() != d_ff)
        throw DataError("trace " + corpus_tag + ": prompt " + std::to_string(i) + " has wrong vector length");
      if (!l.hidden_mean.allFinite() || !l.mlp_act_mean.allFinite())
        throw DataError("trace " + corpus_tag + ": prompt " + std::to_string(i) + " has non-finite values");
    }
  }
}

std::uint64_t tensor_stream_seed(std::uint64_t seed, std::string_view name) noexcept {
  const auto h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
  return splitmix64(seed ^ splitmix64(h));
}

MatrixXd uniform_matrix(Index rows, Index cols, std::uint64_t stream_seed) {
  std::mt19937_64 gen(stream_seed);
  MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(gen() >> 11) * 0x1.0p-52 - 1.0;
  return m;
}

ModelSnapshot init_model(const TransformerConfig& config, DType dtype) {
  config.validate();
  ModelSnapshot s;
  s.arch = config;
  s.role = SnapshotRole::Base;
  for (const auto& spec : required_tensors(config)) {
    if (spec.shape.size() == 1) {
      const VectorXd ones = VectorXd::Ones(static_cast<Index>(spec.shape[0]));
      s.set(TensorRecord::from_vector(spec.name, ones, dtype));
      continue;
    }
    const auto rows = static_cast<Index>(spec.shape[0]);
    const auto cols = static_cast<Index>(spec.shape[1]);
    MatrixXd m = uniform_matrix(rows, cols, tensor_stream_seed(config.seed, spec.name));
    if (spec.name != kEmbedName) m *= std::sqrt(3.0 / static_cast<double>(cols));
    s.set(TensorRecord::from_matrix(spec.name, m, dtype));
  }
  return s;
}

ModelSnapshot perturb_layers(const ModelSnapshot& snapshot, const std::set<int>& layers, double magnitude,
                             std::uint64_t seed) {
  for (int l : layers) {
    if (l < 0 || l >= snapshot.arch.n_layers)
      throw DataError("perturb: layer " + std::to_string(l) + " out of range");
  }
  ModelSnapshot out = snapshot;
  if (magnitude == 0.0) return out;
  for (int l : layers) {
    for (auto module : {kMlpGate, kMlpUp, kMlpDown}) {
      const auto name = layer_tensor_name(l, module);
      const auto& w = snapshot.at(name);
      const MatrixXd m = w.matrix();
      const MatrixXd noisy = m + magnitude * uniform_matrix(m.rows(), m.cols(), tensor_stream_seed(seed, name));
      out.set(TensorRecord::from_matrix(name, noisy, w.dtype));
    }
  }
  return out;
}

HiddenStateTrace forward_trace(const ModelSnapshot& snapshot, std::span<const int> tokens, Pooling pooling) {
  return run_forward(ModelWeights(snapshot), tokens, pooling);
}

std::vector<int> tokenize(std::string_view text, const TransformerConfig& config) {
  std::vector<int> ids;
  for (unsigned char c : text) {
    if (static_cast<int>(ids.size()) == config.max_seq_len) break;
    ids.push_back(static_cast<int>(c) % config.vocab_size);
  }
  return ids;
}

TraceSet trace_corpus(const ModelSnapshot& snapshot, std::span<const std::vector<int>> prompts, Pooling pooling,
                      std::string corpus_tag) {
  const ModelWeights weights(snapshot);
  TraceSet set;
  set.corpus_tag = std::move(corpus_tag);
  set.n_layers = snapshot.arch.n_layers;
  set.d_model = snapshot.arch.d_model;
  set.d_ff = snapshot.arch.d_ff;
  set.prompts.resize(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) { set.prompts[i] = run_forward(weights, prompts[i], pooling); });
  return set;
}

namespace {

std::string trace_name(std::size_t prompt, int layer, std::string_view what) {
  return "prompt_" + std::to_string(prompt) + "/layer_" + std::to_string(layer) + "/" + std::string(what);
}

}  // namespace

void save_traces(const TraceSet& traces, const std::filesystem::path& dir) {
  traces.validate();
  std::vector<TensorRecord> records;
  for (std::size_t i = 0; i < traces.prompts.size(); ++i) {
    for (int k = 0; k < traces.n_layers; ++k) {
      const auto& l = traces.prompts[i].layers[static_cast<std::size_t>(k)];
      records.push_back(TensorRecord::from_vector(trace_name(i, k, "hidden_mean"), l.hidden_mean));
      records.push_back(TensorRecord::from_vector(trace_name(i, k, "mlp_act_mean"), l.mlp_act_mean));
    }
  }
  std::filesystem::create_directories(dir);
  save_container(records, dir / "trace.bin");
  const json manifest = {{"n_prompts", traces.prompts.size()}, {"L", traces.n_layers},
                         {"d_model", traces.d_model},          {"d_ff", traces.d_ff},
                         {"corpus_tag", traces.corpus_tag}};
  write_text_file(dir / "trace.json", manifest.dump(2) + "\n");
}

TraceSet load_traces(const std::filesystem::path& dir) {
  TraceSet set;
  std::size_t n_prompts = 0;
  try {
    const auto manifest = json::parse(read_text_file(dir / "trace.json"));
    n_prompts = manifest.at("n_prompts").get<std::size_t>();
    set.n_layers = manifest.at("L").get<int>();
    set.d_model = manifest.at("d_model").get<int>();
    set.d_ff = manifest.at("d_ff").get<int>();
    set.corpus_tag = manifest.at("corpus_tag").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/trace.json: " + e.what());
  }
  std::map<std::string, TensorRecord> tensors;
  for (auto& r : load_container(dir / "trace.bin")) {
    auto name = r.name;
    tensors.emplace(std::move(name), std::move(r));
  }
  auto fetch = [&](const std::string& name, int expected) -> VectorXd {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError(dir.string() + ": missing trace tensor '" + name + "'");
    if (it->second.numel() != static_cast<std::uint64_t>(expected) || it->second.shape.size() != 1)
      throw DataError(dir.string() + ": trace tensor '" + name + "' has the wrong shape");
    return it->second.values();
  };
  set.prompts.resize(n_prompts);
  for (std::size_t i = 0; i < n_prompts; ++i) {
    for (int k = 0; k < set.n_layers; ++k)
      set.prompts[i].layers.push_back(
          {fetch(trace_name(i, k, "hidden_mean"), set.d_model), fetch(trace_name(i, k, "mlp_act_mean"), set.d_ff)});
  }
  if (tensors.size() != 2 * n_prompts * static_cast<std::size_t>(set.n_layers))
    throw DataError(dir.string() + ": trace container holds unexpected tensors");
  set.validate();
  return set;
}

}  // namespace fgsn
