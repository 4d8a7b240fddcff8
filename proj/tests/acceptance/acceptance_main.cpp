// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fgsn/continual.hpp"
#include "fgsn/error.hpp"
#include "fgsn/pipeline.hpp"
#include "../oracles.hpp"
#include "../test_util.hpp"

using namespace fgsn;
namespace o = fgsn::oracle;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1 -------------------------------------------------------------------------
Check oracle_equivalence() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  double e_mean = 0, e_cos = 0, e_imp = 0, e_gram = 0, e_apply = 0;
  std::size_t mask_mismatch = 0;
  constexpr int kInstances = 120;
  for (int i = 0; i < kInstances; ++i) {
    const int rows = o::random_int(rng, 1, 64), cols = o::random_int(rng, 1, 64);

    // Corpus-mean hidden states.
    std::vector<HiddenStateTrace> traces(static_cast<std::size_t>(o::random_int(rng, 1, 16)));
    std::vector<o::Vec> raw;
    for (auto& t : traces) {
      t.layers.push_back({o::random_vector(rng, cols), Eigen::VectorXd::Zero(1)});
      raw.push_back(o::to_vec(t.layers[0].hidden_mean));
    }
    e_mean = std::max(e_mean, o::max_rel_err(o::mean(raw), mean_states(traces).layers[0]));

    // Per-layer cosine similarity.
    const Eigen::VectorXd a = o::random_vector(rng, cols), b = o::random_vector(rng, cols);
    const auto p = cosine_profile({{a}}, {{b}});
    e_cos = std::max(e_cos, std::abs(p.sim[0] - o::cosine(o::to_vec(a), o::to_vec(b))));

    // Importance.
    const Eigen::MatrixXd w = o::random_matrix(rng, rows, cols);
    const Eigen::VectorXd act = o::random_vector(rng, cols);
    e_imp = std::max(e_imp, o::max_rel_err(o::importance(o::to_mat(w), o::to_vec(act)), neuron_importance(w, act)));

    // Mask.
    ImportanceScores s{{o::random_vector(rng, cols)}, {o::random_vector(rng, cols)}};
    ThresholdPolicy pol;
    pol.q = o::random_int(rng, 0, 90);
    pol.p = o::random_int(rng, 0, 100);
    pol.delta = o::random_int(rng, 0, 100 - static_cast<int>(pol.q));
    pol.n = 0;
    pol.window = {0, 0, WindowMode::Formula};
    const auto mask = build_mask(s, pol);
    if (mask.layers[0] != o::mask_layer(o::to_vec(s.harm[0]), o::to_vec(s.benign[0]), pol.q + pol.delta, pol.p))
      ++mask_mismatch;

    // Safety projection and masked row replacement.
    const Eigen::MatrixXd delta = o::random_matrix(rng, rows, cols);
    const Eigen::MatrixXd g = gram_projection(delta);
    e_gram = std::max(e_gram, o::max_rel_err(o::gram(o::to_mat(delta)), g));
    const Eigen::MatrixXd bm = o::random_matrix(rng, rows, o::random_int(rng, 1, 16));
    std::vector<std::uint8_t> m(static_cast<std::size_t>(rows));
    for (auto& v : m) v = static_cast<std::uint8_t>(o::random_int(rng, 0, 1));
    SafetyProjection sp;
    sp.w_safe = g;
    e_apply = std::max(e_apply, o::max_rel_err(o::masked_apply(o::to_mat(bm), m, o::to_mat(g)),
                                               apply_masked_projection(bm, m, sp)));
  }
  c.expect(e_mean <= 1e-12, "mean rel err " + fmt(e_mean));
  c.expect(e_cos <= 1e-12, "cosine err " + fmt(e_cos));
  c.expect(e_imp <= 1e-12, "importance rel err " + fmt(e_imp));
  c.expect(mask_mismatch == 0, std::to_string(mask_mismatch) + " mask mismatches");
  c.expect(e_gram <= 1e-10, "gram rel err " + fmt(e_gram));
  c.expect(e_apply <= 1e-10, "masked projection rel err " + fmt(e_apply));
  const double secs = elapsed_s(t0);
  c.expect(secs < 30.0, "took " + fmt(secs) + " s");
  if (c.ok)
    c.detail = std::to_string(kInstances) + " instances; max errs mean " + fmt(e_mean) + ", cos " + fmt(e_cos) +
               ", imp " + fmt(e_imp) + ", gram " + fmt(e_gram) + ", apply " + fmt(e_apply) + "; " + fmt(secs) + " s";
  return c;
}

// 2 -------------------------------------------------------------------------
Check window_formula() {
  Check c;
  const auto w = select_window(nullptr, 32, 5, WindowMode::Formula);
  c.expect(w.start == 10 && w.end == 15, "got [" + std::to_string(w.start) + ", " + std::to_string(w.end) + "]");
  if (c.ok) c.detail = "L=32, n=5 -> [10, 15]";
  return c;
}

// 3 -------------------------------------------------------------------------
Check mask_properties() {
  Check c;
  std::mt19937_64 rng(3003);
  for (int set = 0; set < 50 && c.ok; ++set) {
    const int L = o::random_int(rng, 4, 16), d_ff = o::random_int(rng, 1, 128);
    ImportanceScores s;
    for (int l = 0; l < L; ++l) {
      s.harm.push_back(o::random_vector(rng, d_ff));
      s.benign.push_back(o::random_vector(rng, d_ff));
    }
    ThresholdPolicy pol;
    pol.q = o::random_int(rng, 0, 80);
    pol.p = o::random_int(rng, 0, 60);
    pol.delta = o::random_int(rng, 1, 20);
    pol.n = o::random_int(rng, 0, L - 1);
    pol.window = select_window(nullptr, L, pol.n, WindowMode::Formula);
    const auto mask = build_mask(s, pol);
    ThresholdPolicy flat = pol;
    flat.delta = 0;
    const auto base_mask = build_mask(s, flat);
    for (int l = 0; l < L; ++l) {
      const auto [q, p] = effective_thresholds(pol, l);
      const auto benign_top = top_indices(s.benign[l], p);
      for (int j : mask.selected(l))
        c.expect(std::find(benign_top.begin(), benign_top.end(), j) == benign_top.end(),
                 "(a) neuron " + std::to_string(j) + " in benign top set");
      if (pol.window.contains(l))
        for (int j : base_mask.selected(l))
          c.expect(mask.layers[l][j] == 1, "(b) boosted mask misses neuron " + std::to_string(j));
    }
    for (int x = 0; x <= 100; x += 10) {
      const std::size_t want = (static_cast<std::size_t>(x) * static_cast<std::size_t>(d_ff) + 99) / 100;
      c.expect(top_indices(s.harm[0], x).size() == want, "(c) |Top_" + std::to_string(x) + "| wrong");
    }
    c.expect(build_mask(s, pol) == mask, "(d) rerun differs");
  }
  if (c.ok) c.detail = "50 score sets; exclusion, delta-superset, ceil counts, determinism";
  return c;
}

// 4 -------------------------------------------------------------------------
Check projection_algebra() {
  Check c;
  std::mt19937_64 rng(4004);
  double sym = 0, min_q = 0;
  for (int i = 0; i < 50; ++i) {
    const int rows = o::random_int(rng, 1, 48), cols = o::random_int(rng, 1, 48);
    const Eigen::MatrixXd delta = o::random_matrix(rng, rows, cols);
    SafetyProjection sp = build_projection(TensorRecord::from_matrix("d", delta));
    sym = std::max(sym, (sp.w_safe - sp.w_safe.transpose()).cwiseAbs().maxCoeff());
    for (int k = 0; k < 10; ++k) {
      Eigen::VectorXd x = o::random_vector(rng, rows);
      x /= std::max(x.norm(), 1e-300);
      min_q = std::min(min_q, x.dot(sp.w_safe * x));
    }
    const Eigen::MatrixXd b = o::random_matrix(rng, rows, o::random_int(rng, 1, 8));
    std::vector<std::uint8_t> m(static_cast<std::size_t>(rows));
    for (auto& v : m) v = static_cast<std::uint8_t>(o::random_int(rng, 0, 1));
    const Eigen::MatrixXd out = apply_masked_projection(b, m, sp);
    for (int r = 0; r < rows; ++r)
      if (!m[r]) c.expect((out.row(r).array() == b.row(r).array()).all(), "unmasked row changed");

    SafetyProjection zero = build_projection(TensorRecord::from_matrix("z", Eigen::MatrixXd::Zero(rows, cols)));
    const Eigen::MatrixXd z = apply_masked_projection(b, m, zero);
    for (int r = 0; r < rows; ++r)
      if (m[r]) c.expect((z.row(r).array() == 0.0).all(), "zero delta left a masked row nonzero");
  }
  c.expect(sym <= 1e-12, "symmetry defect " + fmt(sym));
  c.expect(min_q >= -1e-10, "quadratic form " + fmt(min_q));
  if (c.ok) c.detail = "50 deltas; symmetry defect " + fmt(sym) + ", min x'Wx " + fmt(min_q);
  return c;
}

// 5 -------------------------------------------------------------------------
Check continual_invariants() {
  Check c;
  TransformerConfig arch;
  arch.n_layers = 6;
  arch.d_model = 16;
  arch.d_ff = 32;
  arch.n_heads = 2;
  const auto base = init_model(arch);
  const auto aligned = perturb_layers(base, {2, 3}, 0.3, 5);
  const auto adapter = make_toy_adapter(arch, 4, 8.0, 0.1, 6);
  const auto proj = build_projections(aligned, base, adapter);
  const auto fresh = ProjectionLedger::for_baseline(adapter, arch);
  auto mask = [&](std::vector<std::vector<int>> sel) { return mask_from_indices(6, 32, sel); };
  auto bytes = [](const LoraAdapter& a) { return serialize_container(a.records()); };

  // (a) repetition.
  const auto m = mask({{1, 2}, {}, {3, 4, 5}, {0}, {}, {31}});
  const auto r1 = continual_apply(adapter, adapter, m, proj, fresh, "u");
  const auto r2 = continual_apply(r1.adapter, adapter, m, proj, r1.ledger, "u");
  c.expect(edit_fraction(r1.adapter, r2.adapter).changed == 0, "(a) repeat changed parameters");
  c.expect(r2.ledger.size() == r1.ledger.size(), "(a) repeat added ledger entries");

  // (b) disjoint orders.
  const auto x = mask({{0}, {1}, {}, {}, {7}, {}}), y = mask({{5}, {}, {9}, {}, {}, {2}});
  const auto rx = continual_apply(adapter, adapter, x, proj, fresh, "x");
  const auto rxy = continual_apply(rx.adapter, adapter, y, proj, rx.ledger, "y");
  const auto ry = continual_apply(adapter, adapter, y, proj, fresh, "y");
  const auto ryx = continual_apply(ry.adapter, adapter, x, proj, ry.ledger, "x");
  c.expect(bytes(rxy.adapter) == bytes(ryx.adapter), "(b) orders differ");

  // (c) replay over a random sequence with overlaps.
  std::mt19937_64 rng(5005);
  auto cur = adapter;
  auto ledger = fresh;
  for (int step = 0; step < 6; ++step) {
    std::vector<std::vector<int>> sel(6);
    for (auto& l : sel)
      for (int j = 0; j < 32; ++j)
        if (o::random_int(rng, 0, 5) == 0) l.push_back(j);
    auto r = continual_apply(cur, adapter, mask(sel), proj, ledger, "d" + std::to_string(step));
    cur = std::move(r.adapter);
    ledger = std::move(r.ledger);
  }
  c.expect(bytes(replay_ledger(adapter, ledger, proj)) == bytes(cur), "(c) replay differs");
  const auto reloaded = parse_ledger(format_ledger(ledger));
  c.expect(bytes(replay_ledger(adapter, reloaded, proj)) == bytes(cur), "(c) replay from serialized ledger differs");

  // (d) nested four-dimension sequence.
  const std::vector<std::vector<std::vector<int>>> nested{
      {{0, 1, 2, 3, 4, 5}, {0, 1, 2, 3}, {0, 1, 2}, {0, 1}, {0}, {0}},
      {{0, 1, 2, 3, 4, 5, 6}, {0, 1, 2, 3, 4}, {0, 1, 2}, {0, 1}, {0}, {0}},
      {{0, 1, 2, 3, 4, 5, 6}, {0, 1, 2, 3, 4}, {0, 1, 2, 3}, {0, 1}, {0}, {0}},
      {{0, 1, 2, 3, 4, 5, 6}, {0, 1, 2, 3, 4}, {0, 1, 2, 3}, {0, 1}, {0}, {0}},
  };
  const std::vector<std::string> tags{"universal", "animal_abuse", "child_abuse", "terrorism"};
  cur = adapter;
  ledger = fresh;
  double prev = 1.0;
  std::string fracs;
  for (std::size_t i = 0; i < nested.size(); ++i) {
    auto r = continual_apply(cur, adapter, mask(nested[i]), proj, ledger, tags[i]);
    c.expect(r.record.new_param_fraction <= prev, "(d) new-parameter fraction increased at " + tags[i]);
    prev = r.record.new_param_fraction;
    fracs += (i ? ", " : "") + fmt(prev);
    cur = std::move(r.adapter);
    ledger = std::move(r.ledger);
  }
  if (c.ok) c.detail = "repeat no-op, commutative, replay bit-exact, nested fractions " + fracs;
  return c;
}

// 6 -------------------------------------------------------------------------
Check planted_divergence() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  auto run = [&](const test::TempDir& dir) {
    ToyOptions opt;
    opt.corpus_dir = test::data_dir();
    auto cfg = load_run_config(make_toy(dir.path(), opt));
    cfg.window_mode = WindowMode::DataDriven;
    cfg.policy.n = 2;
    const auto probe = cmd_probe(cfg);
    const auto mask = cmd_localize(cfg);
    return std::make_tuple(probe.window, mask, read_text_file(stage_paths::profile(cfg)),
                           read_text_file(stage_paths::mask_dir(cfg, cfg.dimension) / "mask.bin"));
  };
  test::TempDir a, b;
  const auto [w, mask, csv, bin] = run(a);
  const auto [w2, mask2, csv2, bin2] = run(b);
  const bool overlaps = w.start <= 6 && w.end >= 4;
  c.expect(overlaps, "window [" + std::to_string(w.start) + ", " + std::to_string(w.end) + "] misses {4,5,6}");
  std::size_t inside = 0;
  for (int l = w.start; l <= w.end; ++l) {
    c.expect(mask.count(l) > 0, "empty mask at window layer " + std::to_string(l));
    inside += mask.count(l);
  }
  c.expect(w == w2 && csv == csv2 && bin == bin2, "rerun differs");
  const double secs = elapsed_s(t0);
  c.expect(secs < 60.0, "took " + fmt(secs) + " s");
  if (c.ok)
    c.detail = "window [" + std::to_string(w.start) + ", " + std::to_string(w.end) + "], " + std::to_string(inside) +
               " neurons inside, deterministic, " + fmt(secs) + " s";
  return c;
}

// 7 -------------------------------------------------------------------------
Check similarity_bounds() {
  Check c;
  TransformerConfig arch;
  const auto base = init_model(arch);
  const auto aligned = perturb_layers(base, {4, 5, 6}, 0.5, 1);
  const auto benign = load_corpus(test::data_dir() / "benign.txt", CorpusLabel::Benign, arch);
  std::size_t n_values = 0;
  double scale_err = 0;
  std::mt19937_64 rng(7007);
  for (const char* name : {"benign.txt", "harmful_universal.txt", "harmful_animal_abuse.txt",
                           "harmful_child_abuse.txt", "harmful_terrorism.txt"}) {
    const auto harm = load_corpus(test::data_dir() / name, CorpusLabel::Harmful, arch);
    for (const auto* model : {&base, &aligned}) {
      const auto sb = mean_states(trace_corpus(*model, benign.prompts, Pooling::Mean, "b"));
      const auto sh = mean_states(trace_corpus(*model, harm.prompts, Pooling::Mean, "h"));
      const auto p = cosine_profile(sb, sh);
      for (Eigen::Index k = 0; k < p.sim.size(); ++k, ++n_values)
        c.expect(p.sim[k] >= -1.0 && p.sim[k] <= 1.0, "sim out of range: " + fmt(p.sim[k]));
      auto rb = sb, rh = sh;
      for (std::size_t k = 0; k < rb.layers.size(); ++k) {
        rb.layers[k] *= std::exp(o::random_vector(rng, 1, -5, 5)[0]);
        rh.layers[k] *= std::exp(o::random_vector(rng, 1, -5, 5)[0]);
      }
      scale_err = std::max(scale_err, (cosine_profile(rb, rh).sim - p.sim).cwiseAbs().maxCoeff());
    }
  }
  std::mt19937_64 rng2(7008);
  for (int i = 0; i < 200; ++i) {
    const int d = o::random_int(rng2, 1, 64);
    const Eigen::VectorXd a = o::random_vector(rng2, d);
    const auto p = cosine_profile({{a}}, {{a * -3.0}});
    c.expect(p.sim[0] >= -1.0 && p.sim[0] <= 1.0, "antiparallel sim out of range");
    ++n_values;
  }
  c.expect(scale_err <= 1e-12, "scale-invariance error " + fmt(scale_err));
  if (c.ok) c.detail = std::to_string(n_values) + " sim values in [-1, 1], rescale error " + fmt(scale_err);
  return c;
}

// 8 -------------------------------------------------------------------------
Check container_io() {
  Check c;
  std::mt19937_64 rng(8008);
  std::vector<TensorRecord> records;
  std::size_t empties = 0;
  for (int i = 0; i < 1000; ++i) {
    const int rank = o::random_int(rng, 0, 3);
    std::vector<std::uint64_t> shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::uint64_t>(o::random_int(rng, 0, 5)));
      numel *= shape.back();
    }
    empties += numel == 0;
    std::vector<double> values(numel);
    for (auto& v : values) v = o::random_vector(rng, 1, -1e6, 1e6)[0];
    records.push_back(TensorRecord::from_values("t/" + std::to_string(i), shape, values,
                                                i % 3 ? DType::F64 : DType::F32));
  }
  test::TempDir dir;
  save_container(records, dir / "c.bin");
  auto loaded = load_container(dir / "c.bin");
  std::sort(records.begin(), records.end(), [](auto& a, auto& b) { return a.name < b.name; });
  c.expect(loaded == records, "round trip differs");
  c.expect(empties > 0, "no 0-element shapes generated");

  std::vector<TensorRecord> small(records.begin(), records.begin() + 20);
  const auto bytes = serialize_container(small);
  std::size_t truncations = 0;
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    bool threw = false;
    try {
      parse_container(std::span(bytes.data(), len));
    } catch (const DataError&) {
      threw = true;
    }
    c.expect(threw, "truncated length " + std::to_string(len) + " parsed");
    ++truncations;
  }
  std::size_t corrupted = 0;
  for (int i = 0; i < 2000; ++i) {
    auto bad = bytes;
    const auto pos = static_cast<std::size_t>(o::random_int(rng, 0, static_cast<int>(bad.size()) - 1));
    bad[pos] = static_cast<std::uint8_t>(o::random_int(rng, 0, 255));
    try {
      parse_container(bad);
    } catch (const DataError&) {
      ++corrupted;
    }
  }
  if (c.ok)
    c.detail = "1000 tensors (" + std::to_string(empties) + " empty) bit-exact; " + std::to_string(truncations) +
               " truncations rejected; " + std::to_string(corrupted) + "/2000 byte flips rejected, none crashed";
  return c;
}

// 9 -------------------------------------------------------------------------
Check reporting_fidelity() {
  Check c;
  const Eigen::MatrixXd before = Eigen::MatrixXd::Ones(1000, 1);
  Eigen::MatrixXd after = before;
  for (int r = 0; r < 54; ++r) after(r, 0) = 2.0;
  const std::vector<TensorRecord> rb{TensorRecord::from_matrix("layers.0.mlp.up.B", before)};
  const std::vector<TensorRecord> ra{TensorRecord::from_matrix("layers.0.mlp.up.B", after)};
  const double ef = edit_fraction(rb, ra).overall;
  c.expect(ef == 0.054, "edit fraction " + fmt(ef));

  const std::vector<std::string> responses{"I'm sorry, but I cannot help.", "Sure, here it is.",
                                           "As an AI, I must decline."};
  const double asr = keyword_asr(responses, RefusalLexicon::defaults()).asr;
  c.expect(asr == 1.0 / 3.0, "asr " + fmt(asr));

  std::mt19937_64 rng(9009);
  double max_err = 0;
  for (int i = 0; i < 20; ++i) {
    const int L = o::random_int(rng, 2, 40);
    LayerSimilarityProfile base{o::random_vector(rng, L), {}, ModelTag::Base};
    LayerSimilarityProfile al{o::random_vector(rng, L), {}, ModelTag::Aligned};
    base.grad = forward_difference(base.sim);
    al.grad = forward_difference(al.sim);
    const auto [pb, pa] = parse_profile_report(format_profile_report(base, al));
    max_err = std::max({max_err, (pb.sim - base.sim).cwiseAbs().maxCoeff(), (pa.sim - al.sim).cwiseAbs().maxCoeff(),
                        (pb.grad - base.grad).cwiseAbs().maxCoeff(), (pa.grad - al.grad).cwiseAbs().maxCoeff()});
  }
  c.expect(max_err <= 1e-12, "csv parse-back error " + fmt(max_err));
  if (c.ok) c.detail = "edit fraction 0.054, asr 1/3, csv parse-back error " + fmt(max_err);
  return c;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Check()>>> criteria{
      {"1 oracle equivalence", oracle_equivalence},   {"2 window formula", window_formula},
      {"3 mask properties", mask_properties},         {"4 projection algebra", projection_algebra},
      {"5 continual invariants", continual_invariants}, {"6 planted divergence", planted_divergence},
      {"7 similarity bounds", similarity_bounds},     {"8 container i/o", container_io},
      {"9 reporting fidelity", reporting_fidelity},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Check c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    failures += !c.ok;
    std::printf("%s  AC%s: %s\n", c.ok ? "PASS" : "FAIL", name.c_str(), c.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
