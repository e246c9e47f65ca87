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

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "ta/error.hpp"
#include "ta/text.hpp"

namespace ta::codebook {

using json = nlohmann::ordered_json;

/// One coding action extracted from a single response.
struct InitialCode {
  std::string response_id;
  std::string quote;
  std::string definition;
  std::string label;

  friend bool operator==(const InitialCode&, const InitialCode&) = default;
};

struct Code {
  std::string label;
  std::string definition;
  std::vector<std::string> provenance;  // contributing response ids

  friend bool operator==(const Code&, const Code&) = default;
};

struct Theme {
  std::string name;
  std::vector<Code> codes;

  friend bool operator==(const Theme&, const Theme&) = default;
};

struct Codebook {
  std::string question;
  std::vector<Theme> themes;
  int version = 1;

  std::size_t code_count() const {
    std::size_t n = 0;
    for (const auto& t : themes) n += t.codes.size();
    return n;
  }
  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& t : themes)
      for (const auto& c : t.codes) out.push_back(c.label);
    return out;
  }
  friend bool operator==(const Codebook&, const Codebook&) = default;
};

// Structural equality that ignores version numbers and provenance; used to
// decide whether a revision actually changes anything.
inline bool same_content(const Codebook& a, const Codebook& b) {
  if (a.themes.size() != b.themes.size()) return false;
  for (std::size_t i = 0; i < a.themes.size(); ++i) {
    const auto& ta = a.themes[i];
    const auto& tb = b.themes[i];
    if (ta.name != tb.name || ta.codes.size() != tb.codes.size()) return false;
    for (std::size_t k = 0; k < ta.codes.size(); ++k)
      if (ta.codes[k].label != tb.codes[k].label || ta.codes[k].definition != tb.codes[k].definition)
        return false;
  }
  return true;
}

// ---- validation -----------------------------------------------------------

enum class ViolationKind {
  DuplicateAcrossThemes,
  DuplicateWithinTheme,
  EmptyTheme,
  EmptyThemeName,
  DuplicateThemeName,
  EmptyLabel,
  EmptyDefinition,
};

inline std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::DuplicateAcrossThemes: return "DuplicateAcrossThemes";
    case ViolationKind::DuplicateWithinTheme: return "DuplicateWithinTheme";
    case ViolationKind::EmptyTheme: return "EmptyTheme";
    case ViolationKind::EmptyThemeName: return "EmptyThemeName";
    case ViolationKind::DuplicateThemeName: return "DuplicateThemeName";
    case ViolationKind::EmptyLabel: return "EmptyLabel";
    case ViolationKind::EmptyDefinition: return "EmptyDefinition";
  }
  return "?";
}

struct Violation {
  ViolationKind kind;
  std::string theme;
  std::string label;  // empty for theme-level violations

  std::string describe() const {
    std::string s(to_string(kind));
    s += " (theme '" + theme + "'";
    if (!label.empty()) s += ", code '" + label + "'";
    return s + ")";
  }
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(ViolationKind k) const {
    return std::any_of(violations.begin(), violations.end(),
                       [k](const Violation& v) { return v.kind == k; });
  }
  std::string summary() const {
    std::vector<std::string> parts;
    for (const auto& v : violations) parts.push_back(v.describe());
    return text::join(parts, "; ");
  }
};

inline ValidationReport validate_codebook(const Codebook& cb) {
  ValidationReport report;
  std::unordered_map<std::string, std::string> owner;  // folded label -> theme
  std::set<std::string> theme_names;
  for (const auto& theme : cb.themes) {
    if (text::is_blank(theme.name))
      report.violations.push_back({ViolationKind::EmptyThemeName, theme.name, {}});
    else if (!theme_names.insert(text::fold(theme.name)).second)
      report.violations.push_back({ViolationKind::DuplicateThemeName, theme.name, {}});
    if (theme.codes.empty()) report.violations.push_back({ViolationKind::EmptyTheme, theme.name, {}});
    for (const auto& code : theme.codes) {
      if (text::is_blank(code.label)) {
        report.violations.push_back({ViolationKind::EmptyLabel, theme.name, code.label});
        continue;
      }
      if (text::is_blank(code.definition))
        report.violations.push_back({ViolationKind::EmptyDefinition, theme.name, code.label});
      auto [it, inserted] = owner.emplace(text::fold(code.label), theme.name);
      if (!inserted)
        report.violations.push_back({it->second == theme.name ? ViolationKind::DuplicateWithinTheme
                                                              : ViolationKind::DuplicateAcrossThemes,
                                     theme.name, code.label});
    }
  }
  return report;
}

inline void require_valid(const Codebook& cb) {
  auto report = validate_codebook(cb);
  if (!report.ok()) throw Error(ErrorCode::InvalidCodebook, report.summary());
}

// ---- merging --------------------------------------------------------------

namespace detail {

inline void add_unique(std::vector<std::string>& v, const std::string& s) {
  if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
}

constexpr std::string_view kDefinitionSeparator = "; ";

template <typename Item, typename Fold>
std::vector<Code> merge_by_label(const std::vector<Item>& items, Fold&& absorb) {
  std::vector<Code> out;
  std::vector<std::vector<std::string>> defs;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& item : items) {
    auto key = text::fold(item.label);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back(Code{item.label, {}, {}});
      defs.emplace_back();
    }
    absorb(out[it->second], defs[it->second], item);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::string joined;
    for (const auto& d : defs[i]) {
      if (!joined.empty()) joined += kDefinitionSeparator;
      joined += d;
    }
    out[i].definition = std::move(joined);
  }
  return out;
}

}  // namespace detail

/// Codes whose labels fold to the same key become one entry: the first label
/// spelling wins, provenance is unioned, distinct definitions are joined with
/// "; ". Output follows first-occurrence order.
inline std::vector<Code> merge_duplicate_codes(const std::vector<InitialCode>& codes) {
  return detail::merge_by_label(codes, [](Code& code, std::vector<std::string>& defs,
                                          const InitialCode& ic) {
    detail::add_unique(code.provenance, ic.response_id);
    if (!text::is_blank(ic.definition)) detail::add_unique(defs, text::trim(ic.definition));
  });
}

inline std::vector<Code> merge_duplicate_codes(const std::vector<Code>& codes) {
  return detail::merge_by_label(codes, [](Code& code, std::vector<std::string>& defs,
                                          const Code& c) {
    for (const auto& p : c.provenance) detail::add_unique(code.provenance, p);
    if (!text::is_blank(c.definition)) detail::add_unique(defs, text::trim(c.definition));
  });
}

// ---- lookup ---------------------------------------------------------------

inline const std::string& theme_of(std::string_view label, const Codebook& cb) {
  const auto key = text::fold(label);
  for (const auto& theme : cb.themes)
    for (const auto& code : theme.codes)
      if (text::fold(code.label) == key) return theme.name;
  throw Error(ErrorCode::UnknownCode, "code '" + std::string(label) + "' is not in the codebook");
}

inline const Code* find_code(std::string_view label, const Codebook& cb) {
  const auto key = text::fold(label);
  for (const auto& theme : cb.themes)
    for (const auto& code : theme.codes)
      if (text::fold(code.label) == key) return &code;
  return nullptr;
}

// Folded label -> theme name for repeated lookups.
class ThemeIndex {
 public:
  explicit ThemeIndex(const Codebook& cb) {
    for (const auto& theme : cb.themes)
      for (const auto& code : theme.codes) {
        by_label_.emplace(text::fold(code.label), theme.name);
        canonical_.emplace(text::fold(code.label), code.label);
      }
  }
  const std::string& theme_of(std::string_view label) const {
    auto it = by_label_.find(text::fold(label));
    if (it == by_label_.end())
      throw Error(ErrorCode::UnknownCode, "code '" + std::string(label) + "' is not in the codebook");
    return it->second;
  }
  bool contains(std::string_view label) const { return by_label_.count(text::fold(label)) > 0; }
  // Stored spelling of a label, looked up case-insensitively.
  const std::string* canonical(std::string_view label) const {
    auto it = canonical_.find(text::fold(label));
    return it == canonical_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<std::string, std::string> by_label_;
  std::unordered_map<std::string, std::string> canonical_;
};

// ---- assignments ----------------------------------------------------------

struct AssignmentItem {
  std::set<std::string> codes;
  bool uncodable = false;

  friend bool operator==(const AssignmentItem&, const AssignmentItem&) = default;
};

/// One coder's labels per response.
struct Assignment {
  std::string coder;
  std::map<std::string, AssignmentItem> items;

  std::set<std::string> ids() const {
    std::set<std::string> out;
    for (const auto& [id, _] : items) out.insert(id);
    return out;
  }
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

inline void validate_assignment(const Assignment& a, const Codebook& cb) {
  ThemeIndex index(cb);
  for (const auto& [id, item] : a.items) {
    if (item.codes.empty() && !item.uncodable)
      throw Error(ErrorCode::InvalidAssignment,
                  "coder '" + a.coder + "' left response '" + id + "' without codes");
    for (const auto& label : item.codes)
      if (!index.contains(label))
        throw Error(ErrorCode::UnknownCode, "coder '" + a.coder + "' used '" + label +
                                                "' on response '" + id + "', not in the codebook");
  }
}

// ---- JSON -----------------------------------------------------------------

inline json to_json(const Codebook& cb) {
  json themes = json::array();
  for (const auto& t : cb.themes) {
    json codes = json::array();
    for (const auto& c : t.codes) {
      json jc = {{"label", c.label}, {"definition", c.definition}};
      if (!c.provenance.empty()) jc["provenance"] = c.provenance;
      codes.push_back(std::move(jc));
    }
    themes.push_back({{"name", t.name}, {"codes", std::move(codes)}});
  }
  return {{"question", cb.question}, {"version", cb.version}, {"themes", std::move(themes)}};
}

inline Codebook codebook_from_json(const json& j) {
  try {
    Codebook cb;
    cb.question = j.value("question", std::string{});
    cb.version = j.value("version", 1);
    for (const auto& jt : j.at("themes")) {
      Theme t{jt.at("name").get<std::string>(), {}};
      for (const auto& jc : jt.at("codes")) {
        Code c{jc.at("label").get<std::string>(), jc.value("definition", std::string{}), {}};
        if (jc.contains("provenance")) c.provenance = jc["provenance"].get<std::vector<std::string>>();
        t.codes.push_back(std::move(c));
      }
      cb.themes.push_back(std::move(t));
    }
    return cb;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("codebook: ") + e.what());
  }
}

inline json to_json(const Assignment& a) {
  json items = json::array();
  for (const auto& [id, item] : a.items)
    items.push_back({{"response_id", id},
                     {"codes", std::vector<std::string>(item.codes.begin(), item.codes.end())},
                     {"uncodable", item.uncodable}});
  return {{"coder", a.coder}, {"items", std::move(items)}};
}

inline Assignment assignment_from_json(const json& j) {
  try {
    Assignment a;
    a.coder = j.at("coder").get<std::string>();
    for (const auto& ji : j.at("items")) {
      AssignmentItem item;
      for (const auto& c : ji.at("codes")) item.codes.insert(c.get<std::string>());
      item.uncodable = ji.value("uncodable", false);
      const auto id = ji.at("response_id").get<std::string>();
      if (!a.items.emplace(id, std::move(item)).second)
        throw Error(ErrorCode::DuplicateId, "assignment lists response '" + id + "' twice");
    }
    return a;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("assignment: ") + e.what());
  }
}

inline json to_json(const InitialCode& c) {
  return {{"response_id", c.response_id},
          {"quote", c.quote},
          {"definition", c.definition},
          {"label", c.label}};
}

inline InitialCode initial_code_from_json(const json& j) {
  return {j.at("response_id").get<std::string>(), j.at("quote").get<std::string>(),
          j.at("definition").get<std::string>(), j.at("label").get<std::string>()};
}

}  // namespace ta::codebook
