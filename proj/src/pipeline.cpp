// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/pipeline.hpp"

#include <algorithm>
#include <set>

#include "fgsn/error.hpp"

namespace fgsn {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename F>
auto run_stage(const char* name, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    const std::string what = std::string(name) + ": " + e.what();
    switch (e.kind()) {
      case Error::Kind::Config: throw ConfigError(what);
      case Error::Kind::Data: throw DataError(what);
      case Error::Kind::Numerical: throw NumericalError(what);
    }
    throw;
  } catch (const fs::filesystem_error& e) {
    throw DataError(std::string(name) + ": " + e.what());
  }
}

fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base_dir / path).lexically_normal();
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

json window_json(const SafetyLayerWindow& w) {
  return {{"start", w.start}, {"end", w.end}, {"mode", window_mode_tag(w.mode)}};
}

TraceSet trace_and_save(const RunConfig& cfg, const ModelSnapshot& model, const PromptCorpus& corpus,
                        const std::string& model_tag) {
  auto traces = trace_corpus(model, corpus.prompts, cfg.pooling, model_tag + "_" + corpus.tag);
  save_traces(traces, cfg.out / "traces" / traces.corpus_tag);
  return traces;
}

struct Models {
  ModelSnapshot base, aligned, finetuned;
  LoraAdapter adapter;
};

Models load_models(const RunConfig& cfg) {
  Models m{load_snapshot(cfg.base), load_snapshot(cfg.aligned), load_snapshot(cfg.finetuned), load_adapter(cfg.adapter)};
  if (!(m.base.arch == m.aligned.arch) || !(m.base.arch == m.finetuned.arch))
    throw DataError("base, aligned and finetuned snapshots have different architectures");
  check_same_geometry(m.base, m.aligned);
  check_same_geometry(m.base, m.finetuned);
  m.adapter.validate(&m.base.arch);
  return m;
}

RefusalLexicon lexicon_for(const RunConfig& cfg) {
  return cfg.lexicon ? load_lexicon(*cfg.lexicon) : RefusalLexicon::defaults();
}

ThresholdPolicy policy_for(const RunConfig& cfg, int n_layers) {
  ThresholdPolicy policy = cfg.policy;
  policy.window = load_window(stage_paths::window(cfg));
  policy.validate(n_layers);
  return policy;
}

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  if (version != 1) throw ConfigError("config: unsupported version " + std::to_string(version));
  auto exists = [](const fs::path& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string("config: '") + what + "' is required");
    if (!fs::exists(p)) throw ConfigError(std::string("config: ") + what + " path '" + p.string() + "' does not exist");
  };
  exists(base, "base");
  exists(aligned, "aligned");
  exists(finetuned, "finetuned");
  exists(adapter, "adapter");
  exists(benign_corpus, "benign_corpus");
  exists(harmful_corpus, "harmful_corpus");
  if (lexicon) exists(*lexicon, "lexicon");
  if (out.empty()) throw ConfigError("config: 'out' is required");
  if (dimension.empty()) throw ConfigError("config: 'dimension' must be nonempty");
  if (!(policy.q >= 0 && policy.q <= 100) || !(policy.p >= 0 && policy.p <= 100) || !(policy.delta >= 0) ||
      policy.q + policy.delta > 100 || policy.n < 0)
    throw ConfigError("config: policy requires 0 <= p, q <= 100, delta >= 0, q + delta <= 100, n >= 0");
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  static const std::set<std::string> keys = {"version",    "base",        "aligned",     "finetuned",  "adapter",
                                             "benign_corpus", "harmful_corpus", "lexicon", "policy",  "window_mode",
                                             "pooling",    "projection",  "dimension",   "out",        "seed",
                                             "sweep_windows"};
  static const std::set<std::string> policy_keys = {"q", "p", "delta", "n"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!keys.contains(k)) throw ConfigError("config: unknown key '" + k + "'");
  RunConfig cfg;
  try {
    if (!j.contains("version")) throw ConfigError("config: 'version' is required");
    cfg.version = j.at("version").get<int>();
    cfg.base = resolve(base_dir, j.at("base").get<std::string>());
    cfg.aligned = resolve(base_dir, j.at("aligned").get<std::string>());
    cfg.finetuned = j.contains("finetuned") ? resolve(base_dir, j.at("finetuned").get<std::string>()) : cfg.aligned;
    cfg.adapter = resolve(base_dir, j.at("adapter").get<std::string>());
    cfg.benign_corpus = resolve(base_dir, j.at("benign_corpus").get<std::string>());
    cfg.harmful_corpus = resolve(base_dir, j.at("harmful_corpus").get<std::string>());
    if (j.contains("lexicon")) cfg.lexicon = resolve(base_dir, j.at("lexicon").get<std::string>());
    if (j.contains("policy")) {
      const auto& jp = j.at("policy");
      if (!jp.is_object()) throw ConfigError("config: policy must be an object");
      for (const auto& [k, _] : jp.items())
        if (!policy_keys.contains(k)) throw ConfigError("config: unknown policy key '" + k + "'");
      cfg.policy.q = jp.value("q", cfg.policy.q);
      cfg.policy.p = jp.value("p", cfg.policy.p);
      cfg.policy.delta = jp.value("delta", cfg.policy.delta);
      cfg.policy.n = jp.value("n", cfg.policy.n);
    }
    if (j.contains("window_mode")) cfg.window_mode = parse_window_mode(j.at("window_mode").get<std::string>());
    if (j.contains("pooling")) cfg.pooling = parse_pooling(j.at("pooling").get<std::string>());
    if (j.contains("projection")) cfg.projection = parse_projection_kind(j.at("projection").get<std::string>());
    cfg.dimension = j.value("dimension", cfg.dimension);
    cfg.out = resolve(base_dir, j.at("out").get<std::string>());
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("sweep_windows")) {
      for (const auto& w : j.at("sweep_windows")) {
        if (!w.is_array() || w.size() != 2) throw ConfigError("config: sweep_windows entries must be [start, end]");
        cfg.sweep_windows.push_back({w[0].get<int>(), w[1].get<int>(), WindowMode::Formula});
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j, path.parent_path());
}

json run_config_json(const RunConfig& cfg) {
  json sw = json::array();
  for (const auto& w : cfg.sweep_windows) sw.push_back({w.start, w.end});
  return {{"version", cfg.version},
          {"policy", {{"q", cfg.policy.q}, {"p", cfg.policy.p}, {"delta", cfg.policy.delta}, {"n", cfg.policy.n}}},
          {"window_mode", window_mode_tag(cfg.window_mode)},
          {"pooling", pooling_tag(cfg.pooling)},
          {"projection", projection_kind_tag(cfg.projection)},
          {"dimension", cfg.dimension},
          {"seed", cfg.seed},
          {"sweep_windows", sw}};
}

namespace stage_paths {
fs::path window(const RunConfig& cfg) { return cfg.out / "probe" / "window.json"; }
fs::path profile(const RunConfig& cfg) { return cfg.out / "probe" / "profile.csv"; }
fs::path mask_dir(const RunConfig& cfg, const std::string& tag) { return cfg.out / "masks" / tag; }
fs::path projected_dir(const RunConfig& cfg, const std::string& tag) { return cfg.out / "projected" / tag; }
fs::path continual_dir(const RunConfig& cfg) { return cfg.out / "continual"; }
fs::path ledger(const RunConfig& cfg) { return cfg.out / "continual" / "ledger.jsonl"; }
fs::path sweep_csv(const RunConfig& cfg) { return cfg.out / "sweep" / "sweep.csv"; }
fs::path report(const RunConfig& cfg) { return cfg.out / "report.json"; }
}  // namespace stage_paths

SafetyLayerWindow load_window(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("window file '" + path.string() + "' not found; run probe first");
  const auto j = read_json(path);
  try {
    return {j.at("start").get<int>(), j.at("end").get<int>(), parse_window_mode(j.at("mode").get<std::string>())};
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

ProbeResult cmd_probe(const RunConfig& cfg) {
  return run_stage("probe", [&] {
    cfg.validate();
    const auto base = load_snapshot(cfg.base);
    const auto aligned = load_snapshot(cfg.aligned);
    if (!(base.arch == aligned.arch)) throw DataError("base and aligned snapshots have different architectures");
    check_same_geometry(base, aligned);
    const int n_layers = base.arch.n_layers;
    const auto benign = load_corpus(cfg.benign_corpus, CorpusLabel::Benign, base.arch);
    const auto harmful = load_corpus(cfg.harmful_corpus, CorpusLabel::Harmful, base.arch);

    ProbeResult r;
    r.base = cosine_profile(mean_states(trace_and_save(cfg, base, benign, "base")),
                            mean_states(trace_and_save(cfg, base, harmful, "base")), ModelTag::Base);
    r.aligned = cosine_profile(mean_states(trace_and_save(cfg, aligned, benign, "aligned")),
                               mean_states(trace_and_save(cfg, aligned, harmful, "aligned")), ModelTag::Aligned);
    if (cfg.policy.n >= n_layers) throw ConfigError("policy n must be smaller than the layer count");
    r.window = cfg.window_mode == WindowMode::Formula
                   ? select_window(nullptr, n_layers, cfg.policy.n, WindowMode::Formula)
                   : select_divergence_window(r.aligned, r.base, cfg.policy.n);

    emit_profile_report(r.base, r.aligned, stage_paths::profile(cfg));
    json w = window_json(r.window);
    w["n"] = cfg.policy.n;
    w["n_layers"] = n_layers;
    write_json(stage_paths::window(cfg), w);
    return r;
  });
}

SafetyMask cmd_localize(const RunConfig& cfg) {
  return run_stage("localize", [&] {
    cfg.validate();
    const auto finetuned = load_snapshot(cfg.finetuned);
    const auto adapter = load_adapter(cfg.adapter);
    const auto policy = policy_for(cfg, finetuned.arch.n_layers);
    const auto merged = merge_adapter(finetuned, adapter);
    const auto benign = load_corpus(cfg.benign_corpus, CorpusLabel::Benign, merged.arch);
    const auto harmful = load_corpus(cfg.harmful_corpus, CorpusLabel::Harmful, merged.arch);
    const auto t_benign = trace_and_save(cfg, merged, benign, "finetuned");
    const auto t_harm = trace_and_save(cfg, merged, harmful, "finetuned");

    auto mask = build_mask(score_layers(merged, t_harm, t_benign), policy, cfg.dimension);
    mask.created_from = {t_benign.corpus_tag, t_harm.corpus_tag};
    const auto dir = stage_paths::mask_dir(cfg, cfg.dimension);
    save_mask(mask, dir);
    const auto geometry = adapter_geometry(adapter, merged.arch.n_layers);
    write_json(dir / "stats.json", mask_stats(std::span(&mask, 1), &geometry).to_json());
    return mask;
  });
}

ProjectedAdapter cmd_project(const RunConfig& cfg) {
  return run_stage("project", [&] {
    cfg.validate();
    const auto models = load_models(cfg);
    const auto mask = load_mask(stage_paths::mask_dir(cfg, cfg.dimension));
    const auto projections = build_projections(models.aligned, models.base, models.adapter, cfg.projection);
    auto projected = project_adapter(models.adapter, mask, projections);

    const auto dir = stage_paths::projected_dir(cfg, cfg.dimension);
    save_adapter(projected.adapter, dir);
    json report = projected.report.to_json();
    report["dimension"] = cfg.dimension;
    report["projection"] = projection_kind_tag(cfg.projection);
    report["edit_fraction_all_adapter"] = edit_fraction(models.adapter, projected.adapter).overall;

    // Keyword ASR of the toy responder before and after the edit.
    const auto lexicon = lexicon_for(cfg);
    const auto benign = load_corpus(cfg.benign_corpus, CorpusLabel::Benign, models.base.arch);
    const auto harmful = load_corpus(cfg.harmful_corpus, CorpusLabel::Harmful, models.base.arch);
    const ToyResponder responder(trace_corpus(models.aligned, benign.prompts, cfg.pooling, "aligned_benign"),
                                 trace_corpus(models.aligned, harmful.prompts, cfg.pooling, "aligned_harmful"));
    auto asr_of = [&](const LoraAdapter& a) {
      const auto traces = trace_corpus(merge_adapter(models.finetuned, a), harmful.prompts, cfg.pooling, "eval");
      return keyword_asr(responder.respond(traces), lexicon);
    };
    report["asr_before"] = asr_of(models.adapter).to_json();
    report["asr_after"] = asr_of(projected.adapter).to_json();
    write_json(dir / "change_report.json", report);
    return projected;
  });
}

ContinualResult cmd_continual(const RunConfig& cfg) {
  return run_stage("continual", [&] {
    cfg.validate();
    const auto models = load_models(cfg);
    const auto mask = load_mask(stage_paths::mask_dir(cfg, cfg.dimension));
    const auto projections = build_projections(models.aligned, models.base, models.adapter, cfg.projection);
    const auto dir = stage_paths::continual_dir(cfg);
    const auto ledger_path = stage_paths::ledger(cfg);
    const auto ledger = fs::exists(ledger_path) ? ledger_load(ledger_path, &models.adapter)
                                                : ProjectionLedger::for_baseline(models.adapter, models.base.arch);
    const auto current = fs::exists(dir / "adapter" / "adapter.json") ? load_adapter(dir / "adapter") : models.adapter;

    auto result = continual_apply(current, models.adapter, mask, projections, ledger, cfg.dimension);
    save_adapter(result.adapter, dir / "adapter");
    ledger_save(result.ledger, ledger_path);
    json rec = result.record.to_json();
    rec["step"] = ledger.steps();
    write_json(dir / "dimensions" / (cfg.dimension + ".json"), rec);
    return result;
  });
}

SweepReport cmd_sweep(const RunConfig& cfg) {
  return run_stage("sweep", [&] {
    cfg.validate();
    auto models = load_models(cfg);
    SweepSetup setup{std::move(models.base), std::move(models.aligned), std::move(models.finetuned),
                     std::move(models.adapter), {}, {}, cfg.policy, cfg.pooling, cfg.projection, lexicon_for(cfg)};
    const auto& arch = setup.base.arch;
    setup.benign = load_corpus(cfg.benign_corpus, CorpusLabel::Benign, arch).prompts;
    setup.harmful = load_corpus(cfg.harmful_corpus, CorpusLabel::Harmful, arch).prompts;
    if (cfg.policy.n >= arch.n_layers) throw ConfigError("policy n must be smaller than the layer count");
    const auto windows = cfg.sweep_windows.empty() ? all_windows(arch.n_layers, cfg.policy.n) : cfg.sweep_windows;
    for (const auto& w : windows)
      if (w.start < 0 || w.start > w.end || w.end >= arch.n_layers)
        throw ConfigError("sweep window [" + std::to_string(w.start) + ", " + std::to_string(w.end) +
                          "] is outside the model");
    auto report = window_sweep(setup, windows);
    write_text_file(stage_paths::sweep_csv(cfg), report.to_csv());
    write_json(cfg.out / "sweep" / "sweep.json", report.to_json());
    return report;
  });
}

json cmd_report(const RunConfig& cfg) {
  return run_stage("report", [&] {
    std::vector<std::string> missing;
    auto need = [&](const fs::path& p) {
      if (!fs::exists(p)) missing.push_back(fs::relative(p, cfg.out).generic_string());
    };
    need(stage_paths::window(cfg));
    need(stage_paths::profile(cfg));
    need(cfg.out / "masks");
    need(cfg.out / "projected");
    if (!missing.empty()) {
      std::string msg = "missing inputs:";
      for (const auto& m : missing) msg += " " + m;
      throw DataError(msg);
    }

    json bundle;
    bundle["format"] = "fgsn-report";
    bundle["version"] = 1;
    bundle["config"] = run_config_json(cfg);
    bundle["lexicon"] = lexicon_for(cfg).phrases;

    const auto [base, aligned] = parse_profile_report(read_text_file(stage_paths::profile(cfg)));
    auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    bundle["probe"] = {{"window", window_json(load_window(stage_paths::window(cfg)))},
                       {"sim_base", vec(base.sim)},
                       {"sim_aligned", vec(aligned.sim)},
                       {"grad_base", vec(base.grad)},
                       {"grad_aligned", vec(aligned.grad)}};

    std::vector<SafetyMask> masks;
    std::vector<std::string> tags;
    for (const auto& entry : fs::directory_iterator(cfg.out / "masks"))
      if (entry.is_directory()) tags.push_back(entry.path().filename().string());
    std::sort(tags.begin(), tags.end());
    json jm = json::object();
    for (const auto& tag : tags) {
      masks.push_back(load_mask(stage_paths::mask_dir(cfg, tag)));
      std::vector<std::size_t> per_layer;
      for (int l = 0; l < masks.back().n_layers(); ++l) per_layer.push_back(masks.back().count(l));
      jm[tag] = {{"count", masks.back().count()}, {"per_layer", per_layer}, {"policy", masks.back().policy}};
    }
    if (masks.empty()) throw DataError("missing inputs: masks/<dimension>");
    bundle["masks"] = jm;
    const auto adapter = load_adapter(cfg.adapter);
    const auto geometry = adapter_geometry(adapter, masks.front().n_layers());
    bundle["mask_stats"] = mask_stats(masks, &geometry).to_json();

    json jp = json::object();
    for (const auto& entry : fs::directory_iterator(cfg.out / "projected")) {
      const auto report_path = entry.path() / "change_report.json";
      if (fs::exists(report_path)) jp[entry.path().filename().string()] = read_json(report_path);
    }
    if (jp.empty()) throw DataError("missing inputs: projected/<dimension>/change_report.json");
    bundle["projection"] = jp;

    bundle["continual"] = nullptr;
    if (fs::exists(stage_paths::ledger(cfg))) {
      const auto ledger = ledger_load(stage_paths::ledger(cfg), &adapter);
      json per_dim = json::object();
      for (const auto& e : ledger.entries()) per_dim[e.dimension] = per_dim.value(e.dimension, 0) + 1;
      json dims = json::array();
      const auto dim_dir = stage_paths::continual_dir(cfg) / "dimensions";
      if (fs::exists(dim_dir)) {
        std::vector<json> recs;
        for (const auto& entry : fs::directory_iterator(dim_dir)) recs.push_back(read_json(entry.path()));
        std::sort(recs.begin(), recs.end(), [](const json& a, const json& b) {
          return std::make_pair(a.at("step").get<std::uint64_t>(), a.at("tag").get<std::string>()) <
                 std::make_pair(b.at("step").get<std::uint64_t>(), b.at("tag").get<std::string>());
        });
        for (auto& r : recs) dims.push_back(std::move(r));
      }
      bundle["continual"] = {{"ledger",
                              {{"entries", ledger.size()},
                               {"steps", ledger.steps()},
                               {"per_dimension", per_dim}}},
                             {"dimensions", dims}};
    }

    bundle["sweep"] = nullptr;
    if (fs::exists(cfg.out / "sweep" / "sweep.json")) bundle["sweep"] = read_json(cfg.out / "sweep" / "sweep.json");

    write_json(stage_paths::report(cfg), bundle);
    return bundle;
  });
}

// ---------------------------------------------------------------------------

LoraAdapter make_toy_adapter(const TransformerConfig& arch, int rank, double alpha, double b_scale,
                             std::uint64_t seed) {
  if (rank < 1) throw ConfigError("toy adapter: rank must be >= 1");
  LoraAdapter adapter;
  for (int l = 0; l < arch.n_layers; ++l) {
    for (auto module : {kMlpGate, kMlpUp}) {
      LoraEntry e;
      e.layer = l;
      e.module = std::string(module);
      e.alpha = alpha;
      e.A = uniform_matrix(rank, arch.d_model, tensor_stream_seed(seed, layer_tensor_name(l, module, "A"))) *
            std::sqrt(3.0 / arch.d_model);
      e.B = uniform_matrix(arch.d_ff, rank, tensor_stream_seed(seed, layer_tensor_name(l, module, "B"))) * b_scale;
      adapter.entries.push_back(std::move(e));
    }
  }
  return adapter;
}

fs::path make_toy(const fs::path& dir, const ToyOptions& options) {
  options.arch.validate();
  const auto base = init_model(options.arch);
  auto aligned = perturb_layers(base, std::set<int>(options.planted_layers.begin(), options.planted_layers.end()),
                                options.magnitude, options.arch.seed + 1);
  aligned.role = SnapshotRole::Aligned;
  save_snapshot(base, dir / "models" / "base");
  save_snapshot(aligned, dir / "models" / "aligned");
  save_adapter(make_toy_adapter(options.arch, options.lora_rank, options.lora_alpha, options.lora_b_scale,
                                options.arch.seed + 2),
               dir / "models" / "adapter");

  if (options.corpus_dir.empty() || !fs::is_directory(options.corpus_dir))
    throw ConfigError("toy: corpus directory '" + options.corpus_dir.string() + "' not found");
  fs::create_directories(dir / "corpora");
  for (const auto& entry : fs::directory_iterator(options.corpus_dir)) {
    if (entry.path().extension() != ".txt") continue;
    fs::copy_file(entry.path(), dir / "corpora" / entry.path().filename(), fs::copy_options::overwrite_existing);
  }
  if (!fs::exists(dir / "corpora" / "benign.txt") || !fs::exists(dir / "corpora" / "harmful_universal.txt"))
    throw ConfigError("toy: corpus directory must hold benign.txt and harmful_universal.txt");

  json cfg = {{"version", 1},
              {"base", "models/base"},
              {"aligned", "models/aligned"},
              {"adapter", "models/adapter"},
              {"benign_corpus", "corpora/benign.txt"},
              {"harmful_corpus", "corpora/harmful_universal.txt"},
              {"policy", {{"q", 20}, {"p", 20}, {"delta", 10}, {"n", std::min(5, options.arch.n_layers - 1)}}},
              {"window_mode", "formula"},
              {"pooling", "mean"},
              {"projection", "gram"},
              {"dimension", "universal"},
              {"out", "run"},
              {"seed", options.arch.seed}};
  if (fs::exists(dir / "corpora" / "refusal_lexicon.txt")) cfg["lexicon"] = "corpora/refusal_lexicon.txt";
  const auto path = dir / "config.json";
  write_json(path, cfg);
  return path;
}

}  // namespace fgsn
