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

#include "generators.hpp"
#include "ta/codebook.hpp"

using namespace ta;
using namespace ta::codebook;

namespace {

Codebook pm_book() {
  return {"How do you manage your passwords?",
          {{"Written Records and Notes",
            {{"Digital Notes", "passwords kept in a notes app", {}}, {"Notes", "passwords written down", {}}}},
           {"Tools", {{"Password Manager", "dedicated password software", {}}}}},
          1};
}

}  // namespace

TEST(Validate, PaperStyleBookIsValid) {
  const auto r = validate_codebook(pm_book());
  EXPECT_TRUE(r.ok()) << r.summary();
  EXPECT_NO_THROW(require_valid(pm_book()));
}

TEST(Validate, ReportsEachViolationKind) {
  auto cb = pm_book();
  cb.themes[1].codes.push_back({"notes", "same label, other case", {}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::DuplicateAcrossThemes));

  cb = pm_book();
  cb.themes[0].codes.push_back({"NOTES", "dup", {}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::DuplicateWithinTheme));

  cb = pm_book();
  cb.themes.push_back({"Empty", {}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::EmptyTheme));

  cb = pm_book();
  cb.themes.push_back({" ", {{"X", "x", {}}}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::EmptyThemeName));

  cb = pm_book();
  cb.themes.push_back({"tools", {{"X", "x", {}}}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::DuplicateThemeName));

  cb = pm_book();
  cb.themes[0].codes.push_back({"", "no label", {}});
  EXPECT_TRUE(validate_codebook(cb).has(ViolationKind::EmptyLabel));

  cb = pm_book();
  cb.themes[0].codes[0].definition = "  ";
  const auto r = validate_codebook(cb);
  EXPECT_TRUE(r.has(ViolationKind::EmptyDefinition));
  EXPECT_NE(r.summary().find("Digital Notes"), std::string::npos);
  try {
    require_valid(cb);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidCodebook);
  }
}

TEST(Merge, CaseInsensitiveLabelsMerge) {
  const std::vector<InitialCode> codes = {{"r1", "q1", "written notes", "Notes"},
                                          {"r2", "q2", "written notes", "notes"},
                                          {"r3", "q3", "calming", "Relaxing"},
                                          {"r4", "q4", "paper notes", "NOTES"}};
  const auto merged = merge_duplicate_codes(codes);
  ASSERT_EQ(merged.size(), 2u);
  EXPECT_EQ(merged[0].label, "Notes");
  EXPECT_EQ(merged[0].provenance, (std::vector<std::string>{"r1", "r2", "r4"}));
  EXPECT_EQ(merged[0].definition, "written notes; paper notes");
  EXPECT_EQ(merged[1].label, "Relaxing");
}

TEST(Merge, UniqueLabelsAreIdentityAndMergeIsIdempotent) {
  testkit::Gen g(5);
  for (int i = 0; i < 100; ++i) {
    std::vector<InitialCode> codes;
    const int n = g.between(1, 15);
    for (int k = 0; k < n; ++k) {
      auto label = "L" + std::to_string(g.between(0, 5));
      if (g.coin()) label[0] = 'l';
      codes.push_back({"r" + std::to_string(g.between(0, 6)), "q", "def " + std::to_string(g.between(0, 2)), label});
    }
    const auto once = merge_duplicate_codes(codes);
    EXPECT_EQ(merge_duplicate_codes(once), once);
    std::set<std::string> keys;
    for (const auto& c : once) EXPECT_TRUE(keys.insert(text::fold(c.label)).second);
  }
  const std::vector<Code> unique = {{"A", "a", {"r1"}}, {"B", "b", {"r2"}}};
  EXPECT_EQ(merge_duplicate_codes(unique), unique);
}

TEST(Lookup, ThemeOfAndIndex) {
  const auto cb = pm_book();
  EXPECT_EQ(theme_of("Digital Notes", cb), "Written Records and Notes");
  EXPECT_EQ(theme_of("digital notes", cb), "Written Records and Notes");
  try {
    theme_of("Sticky Notes", cb);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownCode);
  }
  ThemeIndex index(cb);
  for (const auto& t : cb.themes)
    for (const auto& c : t.codes) EXPECT_EQ(index.theme_of(c.label), t.name);
  EXPECT_EQ(*index.canonical("password MANAGER"), "Password Manager");
  EXPECT_EQ(index.canonical("nope"), nullptr);
  EXPECT_NE(find_code("notes", cb), nullptr);
  EXPECT_EQ(cb.labels().size(), cb.code_count());
}

TEST(SameContent, IgnoresVersionAndProvenance) {
  auto a = pm_book(), b = pm_book();
  b.version = 7;
  b.themes[0].codes[0].provenance = {"r9"};
  EXPECT_TRUE(same_content(a, b));
  b.themes[0].codes[0].definition += "!";
  EXPECT_FALSE(same_content(a, b));
}

TEST(Assignment, Validation) {
  const auto cb = pm_book();
  Assignment ok{"HC", {{"r1", {{"Notes"}, false}}, {"r2", {{}, true}}}};
  EXPECT_NO_THROW(validate_assignment(ok, cb));
  Assignment empty{"HC", {{"r1", {{}, false}}}};
  EXPECT_THROW(validate_assignment(empty, cb), Error);
  Assignment unknown{"HC", {{"r1", {{"Sticky"}, false}}}};
  try {
    validate_assignment(unknown, cb);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownCode);
  }
}

TEST(Json, RoundTripsAndErrors) {
  auto cb = pm_book();
  cb.themes[0].codes[0].provenance = {"r1", "r2"};
  cb.version = 3;
  EXPECT_EQ(codebook_from_json(to_json(cb)), cb);
  Assignment a{"MC", {{"r1", {{"Notes", "Digital Notes"}, false}}, {"r2", {{}, true}}}};
  EXPECT_EQ(assignment_from_json(to_json(a)), a);
  const InitialCode ic{"r1", "quote", "def", "Label"};
  EXPECT_EQ(initial_code_from_json(to_json(ic)), ic);
  try {
    codebook_from_json(json{{"themes", 3}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
  }
  const json dup = {{"coder", "HC"},
                    {"items", json::array({{{"response_id", "r1"}, {"codes", json::array()}},
                                           {{"response_id", "r1"}, {"codes", json::array()}}})}};
  try {
    assignment_from_json(dup);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateId);
  }
}
