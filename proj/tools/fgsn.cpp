// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver for the safety-neuron pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fgsn/error.hpp"
#include "fgsn/pipeline.hpp"

#ifndef FGSN_DATA_DIR
#define FGSN_DATA_DIR "data"
#endif

namespace fs = std::filesystem;

namespace {

struct GlobalFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string pooling;
  std::string window_mode;
  std::string dimension;
  std::string harmful;
};

fgsn::RunConfig resolve_config(const GlobalFlags& g) {
  if (g.config.empty()) throw fgsn::ConfigError("--config is required");
  if (!fs::exists(g.config)) throw fgsn::ConfigError("config file '" + g.config + "' not found");
  auto cfg = fgsn::load_run_config(g.config);
  if (!g.out.empty()) cfg.out = fs::absolute(g.out).lexically_normal();
  if (g.seed) cfg.seed = *g.seed;
  if (!g.pooling.empty()) cfg.pooling = fgsn::parse_pooling(g.pooling);
  if (!g.window_mode.empty()) cfg.window_mode = fgsn::parse_window_mode(g.window_mode);
  if (!g.dimension.empty()) cfg.dimension = g.dimension;
  if (!g.harmful.empty()) cfg.harmful_corpus = fs::absolute(g.harmful).lexically_normal();
  return cfg;
}

void print_window(const fgsn::SafetyLayerWindow& w) {
  std::printf("window [%d, %d] (%s)\n", w.start, w.end, std::string(fgsn::window_mode_tag(w.mode)).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained safety neurons: localize and project safety-critical MLP neurons"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags g;
  app.add_option("--config", g.config, "Run config (JSON)");
  app.add_option("--out", g.out, "Override the output directory");
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--pooling", g.pooling, "Token pooling")->check(CLI::IsMember({"mean", "last"}));
  app.add_option("--window-mode", g.window_mode, "Safety-layer window selection")
      ->check(CLI::IsMember({"formula", "data"}));

  auto* probe = app.add_subcommand("probe", "Trace base/aligned models and select the safety-layer window");
  auto* localize = app.add_subcommand("localize", "Score neurons of the fine-tuned model and write a mask");
  auto* project = app.add_subcommand("project", "Project masked adapter rows onto the safety subspace");
  auto* continual = app.add_subcommand("continual", "Apply a new dimension mask incrementally via the ledger");
  auto* sweep = app.add_subcommand("sweep", "Localize and project for every candidate window");
  auto* report = app.add_subcommand("report", "Bundle stage outputs into report.json");
  auto* all = app.add_subcommand("all", "Run probe, localize, project and report");
  for (auto* sub : {localize, project, continual, sweep, all}) {
    sub->add_option("--dimension", g.dimension, "Risk dimension tag");
    sub->add_option("--harmful", g.harmful, "Harmful corpus for this dimension");
  }

  auto* toy = app.add_subcommand("toy", "Generate a toy model setup with planted safety layers");
  std::string toy_dir;
  fgsn::ToyOptions toy_options;
  std::string corpus_dir = FGSN_DATA_DIR;
  toy->add_option("dir", toy_dir, "Target directory")->required();
  toy->add_option("--layers", toy_options.arch.n_layers, "Number of layers");
  toy->add_option("--d-model", toy_options.arch.d_model, "Model width");
  toy->add_option("--d-ff", toy_options.arch.d_ff, "MLP width");
  toy->add_option("--heads", toy_options.arch.n_heads, "Attention heads");
  toy->add_option("--planted", toy_options.planted_layers, "Layers perturbed in the aligned model");
  toy->add_option("--magnitude", toy_options.magnitude, "Relative perturbation magnitude");
  toy->add_option("--lora-rank", toy_options.lora_rank, "Adapter rank");
  toy->add_option("--corpora", corpus_dir, "Directory with benign.txt and harmful_*.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : fgsn::ConfigError("").exit_code();
  }

  try {
    if (toy->parsed()) {
      if (g.seed) toy_options.arch.seed = *g.seed;
      toy_options.corpus_dir = corpus_dir;
      const auto path = fgsn::make_toy(toy_dir, toy_options);
      std::printf("wrote %s\n", path.string().c_str());
      return 0;
    }
    const auto cfg = resolve_config(g);
    if (probe->parsed() || all->parsed()) {
      const auto r = fgsn::cmd_probe(cfg);
      print_window(r.window);
    }
    if (localize->parsed() || all->parsed()) {
      const auto mask = fgsn::cmd_localize(cfg);
      std::printf("mask %s: %zu neurons\n", mask.dimension_tag.c_str(), mask.count());
    }
    if (project->parsed() || all->parsed()) {
      const auto p = fgsn::cmd_project(cfg);
      std::printf("projected %s: edit fraction %.6g\n", cfg.dimension.c_str(), p.report.overall_fraction);
    }
    if (continual->parsed()) {
      const auto c = fgsn::cmd_continual(cfg);
      std::printf("continual %s: %zu new, %zu overlapping\n", cfg.dimension.c_str(), c.record.new_count,
                  c.record.overlap_count);
    }
    if (sweep->parsed()) {
      const auto s = fgsn::cmd_sweep(cfg);
      std::fputs(s.to_csv().c_str(), stdout);
    }
    if (report->parsed() || all->parsed()) {
      fgsn::cmd_report(cfg);
      std::printf("wrote %s\n", fgsn::stage_paths::report(cfg).string().c_str());
    }
  } catch (const fgsn::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return fgsn::DataError("").exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
