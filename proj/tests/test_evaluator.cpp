// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <fstream>

#include "fgsn/error.hpp"
#include "fgsn/evaluator.hpp"
#include "fgsn/pipeline.hpp"
#include "test_util.hpp"

using namespace fgsn;

TEST(Asr, ThreeResponseFixture) {
  const std::vector<std::string> responses{"I'm sorry, I can't do that.", "Sure! Step one is ...",
                                           "I cannot help with that"};
  const auto r = keyword_asr(responses, RefusalLexicon::defaults());
  EXPECT_EQ(r.n_prompts, 3u);
  EXPECT_EQ(r.n_attack_success, 1u);
  EXPECT_EQ(r.asr, 1.0 / 3.0);
  EXPECT_EQ(r.success, (std::vector<bool>{false, true, false}));
}

TEST(Asr, AllRefusalsAndCaseInsensitivity) {
  const std::vector<std::string> responses(4, "I cannot help with that");
  EXPECT_EQ(keyword_asr(responses, RefusalLexicon::defaults()).asr, 0.0);
  const std::vector<std::string> upper{"I CANNOT HELP"};
  EXPECT_EQ(keyword_asr(upper, RefusalLexicon::defaults()).asr, 0.0);
}

TEST(Asr, Errors) {
  const std::vector<std::string> none;
  EXPECT_THROW(keyword_asr(none, RefusalLexicon::defaults()), DataError);
  const std::vector<std::string> one{"x"};
  EXPECT_THROW(keyword_asr(one, RefusalLexicon{}), ConfigError);
  EXPECT_THROW(keyword_asr(one, RefusalLexicon{{"ok", ""}}), ConfigError);
}

TEST(Asr, MonotoneUnderLexiconGrowth) {
  const std::vector<std::string> responses{"Sure thing", "No way", "I apologize", "Here you go", "Nope, never"};
  RefusalLexicon lex{{"I apologize"}};
  double prev = keyword_asr(responses, lex).asr;
  for (const char* extra : {"No way", "never", "Here"}) {
    lex.phrases.emplace_back(extra);
    const double now = keyword_asr(responses, lex).asr;
    EXPECT_LE(now, prev);
    EXPECT_GE(now, 0.0);
    prev = now;
  }
}

TEST(Lexicon, LoadFromFile) {
  test::TempDir dir;
  {
    std::ofstream f(dir / "lex.txt");
    f << "I refuse\n\nnot today\r\n";
  }
  const auto lex = load_lexicon(dir / "lex.txt");
  EXPECT_EQ(lex.phrases, (std::vector<std::string>{"I refuse", "not today"}));
  {
    std::ofstream f(dir / "empty.txt");
  }
  EXPECT_THROW(load_lexicon(dir / "empty.txt"), ConfigError);
  const auto bundled = load_lexicon(test::data_dir() / "refusal_lexicon.txt");
  EXPECT_EQ(bundled.phrases, RefusalLexicon::defaults().phrases);
}

namespace {

SweepSetup toy_setup() {
  TransformerConfig arch;
  SweepSetup s;
  s.base = init_model(arch);
  s.aligned = perturb_layers(s.base, {4, 5, 6}, 0.5, arch.seed + 1);
  s.finetuned = s.aligned;
  s.adapter = make_toy_adapter(arch, 4, 8.0, 0.05, arch.seed + 2);
  s.benign = load_corpus(test::data_dir() / "benign.txt", CorpusLabel::Benign, arch).prompts;
  s.harmful = load_corpus(test::data_dir() / "harmful_universal.txt", CorpusLabel::Harmful, arch).prompts;
  s.policy.n = 2;
  return s;
}

}  // namespace

TEST(Responder, AlignedModelRefusesMoreHarmfulThanBenign) {
  const auto s = toy_setup();
  const auto benign = trace_corpus(s.aligned, s.benign, Pooling::Mean, "b");
  const auto harm = trace_corpus(s.aligned, s.harmful, Pooling::Mean, "h");
  const ToyResponder r(benign, harm);
  const auto lex = RefusalLexicon::defaults();
  EXPECT_LT(keyword_asr(r.respond(harm), lex).asr, keyword_asr(r.respond(benign), lex).asr);
  EXPECT_TRUE(lex.matches(ToyResponder::kRefusal));
  EXPECT_FALSE(lex.matches(ToyResponder::kCompliance));
}

TEST(Sweep, OneWindowOneRowAndDeterministic) {
  const auto s = toy_setup();
  const std::vector<SafetyLayerWindow> one{{4, 6, WindowMode::Formula}};
  const auto a = window_sweep(s, one);
  ASSERT_EQ(a.rows.size(), 1u);
  const auto b = window_sweep(s, one);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  EXPECT_GE(a.rows[0].asr, 0.0);
  EXPECT_LE(a.rows[0].asr, 1.0);
  EXPECT_EQ(a.to_csv().substr(0, a.to_csv().find('\n')), "window_start,window_end,mask_count,edit_fraction,asr");
}

TEST(Sweep, CoveringWindowSelectsMoreInPlantedLayers) {
  const auto s = toy_setup();
  const std::vector<SafetyLayerWindow> windows{{4, 6, WindowMode::Formula}, {9, 11, WindowMode::Formula}};
  const auto r = window_sweep(s, windows);
  auto planted = [](const SweepRow& row) { return row.mask_per_layer[4] + row.mask_per_layer[5] + row.mask_per_layer[6]; };
  EXPECT_GT(planted(r.rows[0]), planted(r.rows[1]));
}

TEST(Sweep, AllWindows) {
  const auto w = all_windows(6, 2);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w.front().start, 0);
  EXPECT_EQ(w.back().end, 5);
}
