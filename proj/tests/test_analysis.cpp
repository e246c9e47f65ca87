// Copyright 2026 The ta-workbench Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "kappa_oracle.hpp"
#include "ta/analysis.hpp"

using namespace ta;
using namespace ta::analysis;
using codebook::AssignmentItem;

namespace {

Assignment single(const std::string& coder, const std::vector<std::string>& labels) {
  Assignment a{coder, {}};
  for (std::size_t i = 0; i < labels.size(); ++i) a.items["r" + std::to_string(i)] = {{labels[i]}, false};
  return a;
}

Assignment binary(const std::string& coder, const std::vector<int>& bits) {
  Assignment a{coder, {}};
  for (std::size_t i = 0; i < bits.size(); ++i) {
    AssignmentItem it;
    if (bits[i]) it.codes.insert("X");
    it.uncodable = !bits[i];
    a.items["r" + std::to_string(i)] = it;
  }
  return a;
}

Codebook triage_book() {
  return {"Q",
          {{"Written Records and Notes", {{"Digital Notes", "d", {}}, {"Notes", "d", {}}}},
           {"Tools", {{"Password Manager", "d", {}}}},
           {"Sentiment", {{"Positive", "d", {}}}},
           {"Function", {{"Relaxing", "d", {}}, {"sleep-inducing", "d", {}}}}},
          1};
}

Codebook letters_book(std::size_t n, std::size_t themes) {
  Codebook cb{"Q", {}, 1};
  for (std::size_t t = 0; t < themes; ++t) cb.themes.push_back({"T" + std::to_string(t), {}});
  for (std::size_t i = 0; i < n; ++i) cb.themes[i % themes].codes.push_back({"L" + std::to_string(i), "d", {}});
  return cb;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

Vector vec(std::vector<double> c) { return Vector{std::move(c)}; }

}  // namespace

TEST(Kappa, HandComputedSingleLabel) {
  const auto r = cohens_kappa(single("A", {"A", "A", "B", "B"}), single("B", {"A", "B", "B", "B"}),
                              KappaMode::single_label);
  EXPECT_DOUBLE_EQ(r.observed_agreement, 0.75);
  EXPECT_DOUBLE_EQ(r.expected_agreement, 0.5);
  EXPECT_DOUBLE_EQ(r.kappa, 0.5);
  EXPECT_EQ(r.items, 4u);
  EXPECT_EQ(r.decisions, 4u);
}

TEST(Kappa, HandComputedBinary) {
  const auto r = cohens_kappa(binary("A", {1, 1, 0, 0, 1}), binary("B", {1, 0, 0, 0, 1}),
                              KappaMode::multi_label_binary);
  EXPECT_NEAR(r.observed_agreement, 0.8, 1e-15);
  EXPECT_NEAR(r.expected_agreement, 0.48, 1e-15);
  EXPECT_NEAR(r.kappa, 0.32 / 0.52, 1e-15);
  EXPECT_NEAR(r.kappa, 0.6154, 5e-5);
}

TEST(Kappa, DegenerateCases) {
  auto r = cohens_kappa(single("A", {"A", "A"}), single("B", {"A", "A"}), KappaMode::single_label);
  EXPECT_EQ(r.kappa, 1.0);
  EXPECT_EQ(r.expected_agreement, 1.0);
  r = cohens_kappa(single("A", {"A", "A"}), single("B", {"B", "B"}), KappaMode::single_label);
  EXPECT_LE(r.kappa, 0.0);
  EXPECT_EQ(kappa_from_pairs({}).kappa, 1.0);
}

TEST(Kappa, UncodableIsItsOwnCategory) {
  auto a = single("A", {"A", "B"});
  auto b = single("B", {"A", "B"});
  a.items["r9"] = {{}, true};
  b.items["r9"] = {{}, true};
  EXPECT_EQ(cohens_kappa(a, b, KappaMode::single_label).kappa, 1.0);
  b.items["r9"] = {{"A"}, false};
  EXPECT_LT(cohens_kappa(a, b, KappaMode::single_label).kappa, 1.0);
}

TEST(Kappa, Errors) {
  auto a = single("A", {"A", "B"});
  auto b = single("B", {"A"});
  EXPECT_EQ(code_of([&] { cohens_kappa(a, b, KappaMode::single_label); }), ErrorCode::ItemSetMismatch);
  b = single("B", {"A", "B"});
  b.items["r1"].codes.insert("C");
  EXPECT_EQ(code_of([&] { cohens_kappa(a, b, KappaMode::single_label); }), ErrorCode::ModeViolation);
  b.items["r1"] = {{}, false};
  EXPECT_EQ(code_of([&] { cohens_kappa(a, b, KappaMode::single_label); }), ErrorCode::ModeViolation);
  const std::set<std::string> universe{"a"};
  EXPECT_EQ(code_of([&] { cohens_kappa(a, single("B", {"A", "B"}), KappaMode::multi_label_binary, &universe); }),
            ErrorCode::UnknownCode);
  EXPECT_EQ(code_of([] { cohens_kappa(Assignment{"A", {}}, Assignment{"B", {}}, KappaMode::single_label); }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { mode_from_string("triple"); }), ErrorCode::InvalidArgument);
}

TEST(Kappa, LabelCaseIsFolded) {
  const auto r = cohens_kappa(single("A", {"Notes", "Memory"}), single("B", {"notes", "MEMORY"}),
                              KappaMode::single_label);
  EXPECT_EQ(r.kappa, 1.0);
}

TEST(Kappa, MatchesContingencyOracle) {
  testkit::Gen g(101);
  for (int iter = 0; iter < 300; ++iter) {
    const auto labels = testkit::label_pool(static_cast<std::size_t>(g.between(1, 5)));
    const auto n = static_cast<std::size_t>(g.between(1, 20));
    const bool single_mode = g.coin();
    const auto [a, b] = testkit::random_pair(g, labels, n, single_mode);
    if (single_mode) {
      const auto want = testkit::oracle_single(a, b);
      const auto got = cohens_kappa(a, b, KappaMode::single_label);
      ASSERT_NEAR(got.kappa, want.kappa, 1e-12);
      ASSERT_NEAR(got.observed_agreement, want.po, 1e-12);
      ASSERT_NEAR(got.expected_agreement, want.pe, 1e-12);
    } else {
      const std::set<std::string> universe(labels.begin(), labels.end());
      const auto want = testkit::oracle_multi(a, b, universe);
      ASSERT_NEAR(cohens_kappa(a, b, KappaMode::multi_label_binary, &universe).kappa, want.kappa, 1e-12);
    }
  }
}

TEST(Kappa, IdentitySymmetryRelabelPermutation) {
  testkit::Gen g(202);
  for (int iter = 0; iter < 200; ++iter) {
    const auto labels = testkit::label_pool(static_cast<std::size_t>(g.between(2, 5)));
    const bool single_mode = g.coin();
    const auto mode = single_mode ? KappaMode::single_label : KappaMode::multi_label_binary;
    const auto [a, b] = testkit::random_pair(g, labels, static_cast<std::size_t>(g.between(2, 20)), single_mode);
    EXPECT_EQ(cohens_kappa(a, a, mode).kappa, 1.0);
    const double k = cohens_kappa(a, b, mode).kappa;
    EXPECT_NEAR(cohens_kappa(b, a, mode).kappa, k, 1e-12);

    auto shuffled = labels;
    std::shuffle(shuffled.begin(), shuffled.end(), g.engine());
    std::map<std::string, std::string> m;
    for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]] = "M" + shuffled[i];
    EXPECT_NEAR(cohens_kappa(testkit::relabel(a, m), testkit::relabel(b, m), mode).kappa, k, 1e-12);

    const auto [pa, pb] = testkit::permute_items(g, a, b);
    EXPECT_NEAR(cohens_kappa(pa, pb, mode).kappa, k, 1e-12);
  }
}

TEST(ThemeKappa, SameThemeCountsAsAgreement) {
  const auto cb = triage_book();
  Assignment a{"HC", {{"r1", {{"Digital Notes"}, false}}, {"r2", {{"Password Manager"}, false}}}};
  Assignment b{"MC", {{"r1", {{"Notes"}, false}}, {"r2", {{"Password Manager"}, false}}}};
  EXPECT_LT(cohens_kappa(a, b, KappaMode::single_label).observed_agreement, 1.0);
  const auto t = kappa_by_theme(a, b, cb, KappaMode::single_label);
  EXPECT_EQ(t.observed_agreement, 1.0);
  EXPECT_EQ(t.kappa, 1.0);
  EXPECT_EQ(t.level, Level::theme);
  EXPECT_EQ(kappa_by_theme(a, a, cb, KappaMode::multi_label_binary).kappa, 1.0);

  b.items["r2"] = {{"Cloud Sync"}, false};
  EXPECT_EQ(code_of([&] { kappa_by_theme(a, b, cb, KappaMode::single_label); }), ErrorCode::UnknownCode);
}

TEST(ThemeKappa, ObservedAgreementNeverBelowCodeLevel) {
  testkit::Gen g(303);
  for (int iter = 0; iter < 300; ++iter) {
    const auto n = static_cast<std::size_t>(g.between(2, 8));
    const auto cb = letters_book(n, static_cast<std::size_t>(g.between(1, static_cast<int>(n))));
    const auto [a, b] = testkit::random_pair(g, testkit::label_pool(n), 15, true);
    const auto code = cohens_kappa(a, b, KappaMode::single_label);
    const auto theme = kappa_by_theme(a, b, cb, KappaMode::single_label);
    ASSERT_GE(theme.observed_agreement, code.observed_agreement);
  }
}

TEST(Stratified, StrataAndMissing) {
  const auto cb = triage_book();
  Assignment a{"HC", {{"r1", {{"Notes"}, false}}, {"r2", {{"Positive"}, false}}, {"r3", {{"Relaxing"}, false}}}};
  auto b = a;
  b.coder = "MC";
  std::map<std::string, PoolTag> tags{{"r1", PoolTag::seen}, {"r2", PoolTag::seen}, {"r3", PoolTag::seen}};
  auto rep = stratified_report(a, b, cb, tags, KappaMode::single_label);
  EXPECT_EQ(rep.strata.count("unseen"), 0u);
  EXPECT_EQ(rep.missing_strata, std::vector<std::string>{"unseen"});
  EXPECT_EQ(rep.strata.at("seen").kappa, 1.0);
  EXPECT_EQ(rep.strata.at("all").kappa, 1.0);

  tags["r3"] = PoolTag::unseen;
  rep = stratified_report(a, b, cb, tags, KappaMode::multi_label_binary);
  EXPECT_EQ(rep.strata.size(), 3u);
  for (const auto& [name, r] : rep.strata) EXPECT_EQ(r.kappa, 1.0) << name;

  tags.erase("r2");
  EXPECT_EQ(code_of([&] { stratified_report(a, b, cb, tags, KappaMode::single_label); }), ErrorCode::MissingPoolTag);
}

TEST(Stratified, PooledValueIsRecomputed) {
  const auto cb = letters_book(3, 3);
  // Seen: perfect; unseen: one flip. The pooled kappa comes from all items.
  Assignment a{"A", {}}, b{"B", {}};
  std::map<std::string, PoolTag> tags;
  const std::vector<std::pair<std::string, std::string>> rows = {
      {"L0", "L0"}, {"L1", "L1"}, {"L2", "L2"}, {"L0", "L1"}, {"L1", "L1"}, {"L2", "L2"}, {"L0", "L0"}, {"L2", "L0"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto id = "r" + std::to_string(i);
    a.items[id] = {{rows[i].first}, false};
    b.items[id] = {{rows[i].second}, false};
    tags[id] = i < 3 ? PoolTag::seen : PoolTag::unseen;
  }
  const auto rep = stratified_report(a, b, cb, tags, KappaMode::single_label);
  EXPECT_DOUBLE_EQ(rep.strata.at("seen").kappa, 1.0);
  EXPECT_NEAR(rep.strata.at("unseen").kappa, 7.0 / 17.0, 1e-15);
  EXPECT_NEAR(rep.strata.at("all").kappa, 27.0 / 43.0, 1e-15);
}

TEST(Cosine, HandValues) {
  EXPECT_NEAR(cosine_similarity(vec({1, 1}), vec({1, 0})), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cosine_similarity(vec({1, 1}), vec({1, 0})), 0.70711, 5e-6);
  EXPECT_EQ(cosine_similarity(vec({1, 0}), vec({0, 1})), 0.0);
  EXPECT_NEAR(cosine_similarity(vec({3, -4}), vec({3, -4})), 1.0, 1e-15);
  EXPECT_EQ(code_of([] { cosine_similarity(vec({1, 0}), vec({1, 0, 0})); }), ErrorCode::DimensionMismatch);
  EXPECT_EQ(code_of([] { cosine_similarity(vec({0, 0}), vec({1, 0})); }), ErrorCode::ZeroVector);
}

TEST(Cosine, ScaleInvarianceAndRange) {
  testkit::Gen g(404);
  for (int iter = 0; iter < 500; ++iter) {
    const auto dim = static_cast<std::size_t>(g.between(1, 16));
    const auto u = testkit::random_vector(g, dim);
    const auto v = testkit::random_vector(g, dim);
    auto scaled = u;
    const double c = g.real(0.01, 100.0);
    for (auto& x : scaled.components) x *= c;
    const double s = cosine_similarity(u, v);
    EXPECT_NEAR(cosine_similarity(scaled, v), s, 1e-12);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_NEAR(cosine_similarity(u, u), 1.0, 1e-12);
  }
}

TEST(Match, IdenticalSetsScorePerfectly) {
  const std::vector<codebook::Code> codes = {{"Notes", "written", {}}, {"Memorization", "memory", {}}};
  auto embed = [](const std::vector<std::string>& ts) {
    std::vector<Vector> out;
    for (const auto& t : ts) out.push_back(llm::hash_embedding(t));
    return out;
  };
  const auto r = match_codes(codes, codes, {}, embed);
  EXPECT_NEAR(r.similarity, 1.0, 1e-12);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_TRUE(r.unmatched_gold.empty());
  EXPECT_EQ(r.tau, 0.8);

  const std::vector<codebook::Code> nonsense = {{"zorblax", "", {}}, {"quindle", "", {}}};
  const auto miss = match_codes(nonsense, codes, {0.99, true}, embed);
  EXPECT_EQ(miss.accuracy, 0.0);
  EXPECT_EQ(miss.recall, 0.0);
  EXPECT_EQ(miss.unmatched_gold.size(), 2u);
  for (const auto& p : miss.pairs) EXPECT_FALSE(p.matched);
}

TEST(Match, RecallCountsDistinctGoldHits) {
  const std::map<std::string, Vector> table = {
      {"g1", vec({1, 0})}, {"g2", vec({0, 1})}, {"a", vec({1, 0.01})}, {"b", vec({1, -0.01})}};
  auto embed = [&](const std::vector<std::string>& ts) {
    std::vector<Vector> out;
    for (const auto& t : ts) out.push_back(table.at(t));
    return out;
  };
  const std::vector<codebook::Code> gen = {{"a", "", {}}, {"b", "", {}}};
  const std::vector<codebook::Code> gold = {{"g1", "", {}}, {"g2", "", {}}};
  const auto r = match_codes(gen, gold, {}, embed);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.recall, 0.5);
  EXPECT_EQ(r.unmatched_gold, std::vector<std::string>{"g2"});
  EXPECT_EQ(r.pairs[1].gold, "g1");
  EXPECT_EQ(code_of([&] { match_codes({}, gold, {}, embed); }), ErrorCode::EmptyInput);
  EXPECT_EQ(code_of([&] { match_codes(gen, gold, {0.0, true}, embed); }), ErrorCode::InvalidArgument);
}

TEST(Match, EmbeddingTextUsesDefinition) {
  EXPECT_EQ(embedding_text({"Notes", "written down", {}}, true), "Notes: written down");
  EXPECT_EQ(embedding_text({"Notes", "written down", {}}, false), "Notes");
  EXPECT_EQ(embedding_text({"Notes", " ", {}}, true), "Notes");
}

TEST(Triage, CategoriesFromExamples) {
  const auto cb = triage_book();
  Assignment a{"HC",
               {{"r1", {{"Digital Notes"}, false}},
                {"r2", {{"Positive", "Relaxing", "sleep-inducing"}, false}},
                {"r3", {{"Password Manager"}, false}},
                {"r4", {{"Notes"}, false}}}};
  Assignment b{"C3",
               {{"r1", {{"Notes"}, false}},
                {"r2", {{"Relaxing", "sleep-inducing"}, false}},
                {"r3", {{"Positive"}, false}},
                {"r4", {{"notes"}, false}}}};
  const auto rep = triage_mismatches(a, b, cb);
  EXPECT_EQ(rep.compared, 4u);
  ASSERT_EQ(rep.items.size(), 3u);
  EXPECT_EQ(rep.items[0].category, MismatchCategory::Ambiguity);
  EXPECT_EQ(rep.items[1].category, MismatchCategory::Granularity);
  EXPECT_EQ(rep.items[2].category, MismatchCategory::Distinction);
  const auto j = to_json(rep);
  EXPECT_EQ(j["counts"]["Total"], 3);
  EXPECT_EQ(j["counts"]["Ambiguity"], 1);
}

TEST(Triage, ExclusiveAndExhaustive) {
  testkit::Gen g(505);
  for (int iter = 0; iter < 200; ++iter) {
    const auto cb = letters_book(6, static_cast<std::size_t>(g.between(1, 4)));
    const auto [a, b] = testkit::random_pair(g, testkit::label_pool(6), 20, false);
    const auto rep = triage_mismatches(a, b, cb);
    std::size_t mismatched = 0;
    for (const auto& [id, ia] : a.items) mismatched += ia.codes != b.items.at(id).codes;
    std::size_t total = 0;
    for (const auto& [_, n] : rep.counts) total += n;
    ASSERT_EQ(total, mismatched);
    ASSERT_EQ(rep.items.size(), mismatched);
  }
}

TEST(Report, PairsLevelsAndTable) {
  const auto cb = triage_book();
  Assignment hc{"HC", {{"r1", {{"Digital Notes"}, false}}, {"r2", {{"Positive"}, false}}}};
  Assignment mc{"MC", {{"r1", {{"Notes"}, false}}, {"r2", {{"Positive"}, false}}}};
  const std::map<std::string, PoolTag> tags{{"r1", PoolTag::seen}, {"r2", PoolTag::unseen}};
  const auto report = evaluation_report({hc, mc}, cb, tags, {KappaMode::single_label, {Level::code, Level::theme}});
  ASSERT_EQ(report["pairs"].size(), 2u);
  EXPECT_EQ(report["pairs"][0]["level"], "code");
  EXPECT_EQ(report["pairs"][1]["strata"]["all"]["kappa"], 1.0);
  const auto table = render_table(report);
  EXPECT_NE(table.find("HC + MC"), std::string::npos);
  EXPECT_NE(table.find("theme"), std::string::npos);
  EXPECT_EQ(code_of([&] { evaluation_report({hc}, cb, tags, {}); }), ErrorCode::InsufficientAssignments);

  const auto untagged = evaluation_report({hc, hc}, cb, {}, {});
  EXPECT_EQ(untagged["pairs"][0]["missing_strata"], json::array({"unseen"}));
  EXPECT_NE(render_table(untagged).find("--"), std::string::npos);
}
