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

// Prompt rendering for extraction, grouping, refinement and deductive coding,
// plus parsers that turn model replies back into codebook types.

#include <map>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ta/codebook.hpp"
#include "ta/corpus.hpp"
#include "ta/error.hpp"
#include "ta/text.hpp"

namespace ta::promptkit {

using json = nlohmann::ordered_json;
using codebook::Code;
using codebook::Codebook;
using codebook::InitialCode;
using codebook::Theme;

// Byte-identical to assets/prompts/*.v1.txt.
namespace templates {

inline constexpr std::string_view kInitialCodes =
    "Task: {goal}\n"
    "\n"
    "Here are examples for how to generate the codes. For each example, you will see one response "
    "with the codes step by step.\n"
    "\n"
    "These responses are the answer of the question: {question}.\n"
    "\n"
    "Each generated code have the format: 'quote' refers to /mentions 'definition of the code'. "
    "Therefore, we got a code: 'Code'.\n"
    "\n"
    "Exemplars: {exemplars}\n"
    "\n"
    "{target}";

inline constexpr std::string_view kCodeGrouping =
    "Here is the survey question: {question}\n"
    "\n"
    "{codes}\n"
    "\n"
    "Please organize the codes into themes in JSON format. Ensure that each code belongs to only "
    "one theme. Assign a name to each theme.\n"
    "\n"
    "If there are any duplicate codes, please merge them into a single entry.\n"
    "\n"
    "The expected output format should follow this structure: <Name of the theme>: <List of codes "
    "and their definition belonging to the theme>";

inline constexpr std::string_view kCodeRefinement =
    "Here is your version.\n"
    "{mc_version}\n"
    "Here is the revised version.\n"
    "{hc_version}\n"
    "{hc_actions}\n"
    "\n"
    "What do you think?\n"
    "Please generate the revised themes.\n"
    "Please list the parts with which you agree and disagree and the reason in JSON.";

inline constexpr std::string_view kDeductiveCoding =
    "Here is the survey question: {question}\n"
    "\n"
    "Here is the final codebook. Each theme lists its codes as <code>: <definition>.\n"
    "{codebook}\n"
    "\n"
    "Code the response below using only codes from the codebook. A response may receive several "
    "codes. If no code fits, return an empty list.\n"
    "\n"
    "Response: {response}\n"
    "\n"
    "Return the chosen codes as a JSON list of code labels, for example [\"<code>\", \"<code>\"].";

}  // namespace templates

/// Single-pass `{slot}` substitution. Only names present in `slots` are
/// replaced; substituted text is never rescanned.
inline std::string render_template(std::string_view tmpl,
                                   const std::map<std::string, std::string, std::less<>>& slots) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        auto it = slots.find(tmpl.substr(i + 1, close - i - 1));
        if (it != slots.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

// ---- exemplars ------------------------------------------------------------

struct Action {
  std::string quote;
  std::string definition;
  std::string label;

  friend bool operator==(const Action&, const Action&) = default;
};

struct Exemplar {
  std::string response_text;
  std::vector<Action> actions;

  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

struct ExemplarSet {
  std::vector<Exemplar> exemplars;
  std::string study_goal;
  std::string question;

  friend bool operator==(const ExemplarSet&, const ExemplarSet&) = default;
};

inline constexpr std::size_t kMinExemplars = 4;
inline constexpr std::size_t kMaxExemplars = 8;

struct RenderOptions {
  // When false, an out-of-range exemplar count becomes a warning.
  bool strict_exemplar_count = true;
};

inline std::string render_action(const Action& a) {
  return "'" + a.quote + "' refers to /mentions '" + a.definition +
         "'. Therefore, we got a code: '" + a.label + "'.";
}

inline std::vector<std::string> validate_exemplars(const ExemplarSet& ex, const RenderOptions& opts = {}) {
  std::vector<std::string> warnings;
  const auto n = ex.exemplars.size();
  if (n < kMinExemplars || n > kMaxExemplars) {
    const auto msg = "got " + std::to_string(n) + " exemplars, expected 4 to 8";
    if (opts.strict_exemplar_count) throw Error(ErrorCode::ExemplarCountOutOfRange, msg);
    warnings.push_back(msg);
  }
  auto single_line = [](std::string_view s) {
    return !text::is_blank(s) && s.find('\n') == std::string_view::npos && s.find('\r') == std::string_view::npos;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = ex.exemplars[i];
    const auto where = "exemplar " + std::to_string(i + 1);
    if (text::is_blank(e.response_text)) throw Error(ErrorCode::InvalidExemplar, where + " has no response text");
    if (e.actions.empty()) throw Error(ErrorCode::InvalidExemplar, where + " has no actions");
    for (const auto& a : e.actions)
      if (!single_line(a.quote) || !single_line(a.definition) || !single_line(a.label))
        throw Error(ErrorCode::InvalidExemplar,
                    where + ": quote, definition and label must be non-empty single lines");
  }
  return warnings;
}

inline std::string render_exemplars(const ExemplarSet& ex) {
  std::string out;
  for (std::size_t i = 0; i < ex.exemplars.size(); ++i) {
    out += i == 0 ? "\n" : "\n\n";
    const auto& e = ex.exemplars[i];
    out += "Response: " + e.response_text;
    for (const auto& a : e.actions) out += "\n" + render_action(a);
  }
  return out;
}

inline std::string render_initial_code_prompt(const ExemplarSet& ex, const corpus::Response& response,
                                              const RenderOptions& opts = {},
                                              std::vector<std::string>* warnings = nullptr) {
  auto w = validate_exemplars(ex, opts);
  if (warnings) warnings->insert(warnings->end(), w.begin(), w.end());
  return render_template(templates::kInitialCodes, {{"goal", ex.study_goal},
                                                    {"question", ex.question},
                                                    {"exemplars", render_exemplars(ex)},
                                                    {"target", "Response: " + response.text}});
}

inline std::string batch_header(std::string_view id) { return "Response [" + std::string(id) + "]"; }

/// Several target responses in one extraction prompt. The reply is split on
/// the `Response [<id>]` headers by parse_batch_actions.
inline std::string render_initial_code_prompt_batch(const ExemplarSet& ex,
                                                    const std::vector<corpus::Response>& batch,
                                                    const RenderOptions& opts = {},
                                                    std::vector<std::string>* warnings = nullptr) {
  auto w = validate_exemplars(ex, opts);
  if (warnings) warnings->insert(warnings->end(), w.begin(), w.end());
  std::string target;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (i) target += "\n";
    target += batch_header(batch[i].id) + ": " + batch[i].text;
  }
  return render_template(templates::kInitialCodes, {{"goal", ex.study_goal},
                                                    {"question", ex.question},
                                                    {"exemplars", render_exemplars(ex)},
                                                    {"target", target}});
}

// ---- grouping -------------------------------------------------------------

inline std::string render_code_list(const std::vector<Code>& codes) {
  std::string out;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (i) out += "\n";
    out += std::to_string(i + 1) + ". " + codes[i].label + ": " + codes[i].definition;
  }
  return out;
}

inline std::string render_grouping_prompt(std::string_view question, const std::vector<Code>& codes) {
  if (codes.empty()) throw Error(ErrorCode::EmptyCodeList, "no codes to group");
  return render_template(templates::kCodeGrouping,
                         {{"question", std::string(question)}, {"codes", render_code_list(codes)}});
}

// ---- refinement -----------------------------------------------------------

struct ChangeRationale {
  std::string change;
  std::string rationale;

  friend bool operator==(const ChangeRationale&, const ChangeRationale&) = default;
};

/// Theme name -> [{label, definition}], the shape the grouping reply uses.
inline json themes_object(const Codebook& cb) {
  json obj = json::object();
  for (const auto& t : cb.themes) {
    json codes = json::array();
    for (const auto& c : t.codes) codes.push_back({{"label", c.label}, {"definition", c.definition}});
    obj[t.name] = std::move(codes);
  }
  return obj;
}

inline json actions_array(const std::vector<ChangeRationale>& actions) {
  json arr = json::array();
  for (const auto& a : actions) arr.push_back({{"change", a.change}, {"reason", a.rationale}});
  return arr;
}

inline std::string render_refinement_prompt(const Codebook& mc_themes, const Codebook& hc_revision,
                                            const std::vector<ChangeRationale>& actions) {
  if (mc_themes.question != hc_revision.question)
    throw Error(ErrorCode::QuestionMismatch, "the two codebooks answer different questions");
  if (actions.empty()) {
    if (codebook::same_content(mc_themes, hc_revision))
      throw Error(ErrorCode::EmptyRevision, "no changes and no stated actions");
    throw Error(ErrorCode::EmptyRationale, "the revision changes the codebook but states no actions");
  }
  return render_template(templates::kCodeRefinement,
                         {{"mc_version", themes_object(mc_themes).dump(2)},
                          {"hc_version", themes_object(hc_revision).dump(2)},
                          {"hc_actions", actions_array(actions).dump(2)}});
}

// ---- deductive coding -----------------------------------------------------

inline std::string render_codebook_listing(const Codebook& cb) {
  std::string out;
  for (std::size_t i = 0; i < cb.themes.size(); ++i) {
    if (i) out += "\n";
    out += "Theme: " + cb.themes[i].name;
    for (const auto& c : cb.themes[i].codes) out += "\n- " + c.label + ": " + c.definition;
  }
  return out;
}

inline std::string render_deductive_prompt(const Codebook& cb, const corpus::Response& response) {
  codebook::require_valid(cb);
  return render_template(templates::kDeductiveCoding, {{"question", cb.question},
                                                       {"codebook", render_codebook_listing(cb)},
                                                       {"response", response.text}});
}

// ---- parsing: code actions ------------------------------------------------

struct ActionParse {
  std::vector<InitialCode> codes;
  std::vector<std::string> residue;  // non-blank lines with no parseable action
};

namespace detail {

// Straight, single and double curly quotes.
inline const std::string kQuote = R"((?:'|"|\xE2\x80\x98|\xE2\x80\x99|\xE2\x80\x9C|\xE2\x80\x9D))";

inline const std::regex& action_regex() {
  static const std::regex re(
      R"((?:^|[\s:(*>\-]))" + kQuote + R"((.+?))" + kQuote +
          R"(\s+(?:refers to\s*/\s*mentions|refers to|mentions)\s*:?\s+)" + kQuote + R"(?(.+?))" +
          kQuote + R"(?\s*[.;,]?\s*(?:Therefore|Thus),?\s+we got a code\s*:\s*)" + kQuote +
          R"((.+?))" + kQuote + R"(\s*\.?(?=\s|$))",
      std::regex::ECMAScript | std::regex::icase);
  return re;
}

}  // namespace detail

/// Non-throwing scan; the caller decides whether zero actions is an error.
inline ActionParse scan_code_actions(std::string_view reply, std::string_view response_id) {
  ActionParse out;
  for (auto line_view : text::split_lines(reply)) {
    const std::string line(line_view);
    if (text::is_blank(line)) continue;
    bool any = false;
    for (std::sregex_iterator it(line.begin(), line.end(), detail::action_regex()), end; it != end; ++it) {
      any = true;
      out.codes.push_back({std::string(response_id), text::trim((*it)[1].str()),
                           text::trim((*it)[2].str()), text::trim((*it)[3].str())});
    }
    if (!any) out.residue.push_back(line);
  }
  return out;
}

inline ActionParse parse_code_actions(std::string_view reply, std::string_view response_id) {
  auto parsed = scan_code_actions(reply, response_id);
  if (parsed.codes.empty())
    throw Error(ErrorCode::NoActionsFound,
                "reply for '" + std::string(response_id) + "' has no code actions; residue: " +
                    text::join(parsed.residue, " | "));
  return parsed;
}

/// Splits a batch reply on `Response [<id>]` headers. Text before the first
/// header is residue of the first id.
inline std::map<std::string, ActionParse> parse_batch_actions(std::string_view reply,
                                                              const std::vector<std::string>& ids) {
  static const std::regex header(R"(^\s*\**\s*Response\s*\[([^\]]+)\])", std::regex::icase);
  std::map<std::string, std::string> sections;
  std::string current = ids.empty() ? std::string{} : ids.front();
  for (auto line_view : text::split_lines(reply)) {
    const std::string line(line_view);
    std::smatch m;
    if (std::regex_search(line, m, header)) {
      current = text::trim(m[1].str());
      continue;
    }
    sections[current] += line + "\n";
  }
  std::map<std::string, ActionParse> out;
  for (const auto& id : ids) out[id] = scan_code_actions(sections[id], id);
  return out;
}

// ---- parsing: JSON replies ------------------------------------------------

/// Parses a JSON reply, allowing one repair pass: the first fenced code
/// block, or failing that the outermost {...} span.
inline json parse_json_reply(std::string_view reply) {
  auto try_parse = [](std::string_view s) -> std::optional<json> {
    auto j = json::parse(s.begin(), s.end(), nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    return j;
  };
  if (auto j = try_parse(text::trim_view(reply))) return *j;
  const auto fence = reply.find("```");
  if (fence != std::string_view::npos) {
    auto body_start = reply.find('\n', fence);
    const auto fence_end = body_start == std::string_view::npos ? std::string_view::npos
                                                                : reply.find("```", body_start);
    if (fence_end != std::string_view::npos)
      if (auto j = try_parse(reply.substr(body_start + 1, fence_end - body_start - 1))) return *j;
  }
  const auto first = reply.find_first_of("{[");
  const auto last = reply.find_last_of("}]");
  if (first != std::string_view::npos && last != std::string_view::npos && last > first)
    if (auto j = try_parse(reply.substr(first, last - first + 1))) return *j;
  throw Error(ErrorCode::MalformedJson, "reply is not JSON and contains no parseable JSON block");
}

struct ThemeParse {
  Codebook draft;
  std::vector<std::string> repair_notes;
};

namespace detail {

inline const json* find_key(const json& obj, std::initializer_list<std::string_view> names) {
  if (!obj.is_object()) return nullptr;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    const auto key = text::fold(it.key());
    for (auto n : names)
      if (key == n) return &it.value();
  }
  return nullptr;
}

inline std::string scalar_text(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_null()) return {};
  return j.dump();
}

inline std::vector<Code> codes_from_json(const json& value, const std::string& theme) {
  std::vector<Code> codes;
  auto from_entry = [&](const json& e) {
    if (e.is_string()) {
      codes.push_back({e.get<std::string>(), {}, {}});
      return;
    }
    if (!e.is_object())
      throw Error(ErrorCode::MalformedJson, "theme '" + theme + "' has a code that is not text or an object");
    const json* label = find_key(e, {"label", "code", "name", "code name"});
    if (label) {
      const json* def = find_key(e, {"definition", "description", "meaning", "code definition"});
      codes.push_back({scalar_text(*label), def ? scalar_text(*def) : std::string{}, {}});
      return;
    }
    for (auto it = e.begin(); it != e.end(); ++it) codes.push_back({it.key(), scalar_text(it.value()), {}});
  };
  if (value.is_array()) {
    for (const auto& e : value) from_entry(e);
  } else if (value.is_object()) {
    if (const json* inner = find_key(value, {"codes"})) return codes_from_json(*inner, theme);
    from_entry(value);
  } else if (value.is_string()) {
    codes.push_back({value.get<std::string>(), {}, {}});
  } else {
    throw Error(ErrorCode::MalformedJson, "theme '" + theme + "' does not hold a list of codes");
  }
  return codes;
}

// Accepts the grouping shape {"Theme": [codes]} and the codebook file shape
// {"themes": [{"name", "codes"}]}.
inline std::vector<Theme> themes_from_json(const json& j) {
  std::vector<Theme> themes;
  const json* list = j.is_object() ? find_key(j, {"themes"}) : nullptr;
  if (j.is_array()) list = &j;
  if (list && list->is_array()) {
    for (const auto& jt : *list) {
      const json* name = find_key(jt, {"name", "theme", "theme name"});
      const json* codes = find_key(jt, {"codes"});
      if (!name || !codes) throw Error(ErrorCode::MalformedJson, "theme entry lacks 'name' or 'codes'");
      const auto theme_name = scalar_text(*name);
      themes.push_back({theme_name, codes_from_json(*codes, theme_name)});
    }
    return themes;
  }
  if (list && list->is_object()) return themes_from_json(*list);
  if (!j.is_object()) throw Error(ErrorCode::MalformedJson, "expected a JSON object of themes");
  for (auto it = j.begin(); it != j.end(); ++it) themes.push_back({it.key(), codes_from_json(it.value(), it.key())});
  return themes;
}

}  // namespace detail

/// Turns raw themes into a disjoint draft: duplicate labels inside a theme
/// merge, a label already owned by an earlier theme is dropped from the later
/// one, themes left empty are removed. Every repair is noted. Missing
/// definitions and provenance are filled from `known` when it is given.
inline ThemeParse repair_themes(std::vector<Theme> raw, const std::vector<Code>* known) {
  ThemeParse out;
  std::unordered_map<std::string, const Code*> lookup;
  if (known)
    for (const auto& c : *known) lookup.emplace(text::fold(c.label), &c);
  std::unordered_map<std::string, std::string> owner;
  std::unordered_map<std::string, std::size_t> theme_slot;
  for (auto& theme : raw) {
    theme.name = text::trim(theme.name);
    auto merged = codebook::merge_duplicate_codes(theme.codes);
    if (merged.size() != theme.codes.size())
      out.repair_notes.push_back("merged duplicate codes inside theme '" + theme.name + "'");
    std::vector<Code> kept;
    for (auto& code : merged) {
      code.label = text::trim(code.label);
      if (code.label.empty()) {
        out.repair_notes.push_back("dropped an unlabeled code in theme '" + theme.name + "'");
        continue;
      }
      const auto key = text::fold(code.label);
      if (auto k = lookup.find(key); k != lookup.end()) {
        if (text::is_blank(code.definition)) code.definition = k->second->definition;
        if (code.provenance.empty()) code.provenance = k->second->provenance;
      }
      auto [it, inserted] = owner.emplace(key, theme.name);
      if (!inserted) {
        out.repair_notes.push_back("code '" + code.label + "' appeared under '" + it->second +
                                   "' and '" + theme.name + "'; kept the first");
        continue;
      }
      kept.push_back(std::move(code));
    }
    const auto tkey = text::fold(theme.name);
    if (auto slot = theme_slot.find(tkey); slot != theme_slot.end()) {
      out.repair_notes.push_back("theme '" + theme.name + "' listed twice; merged");
      auto& target = out.draft.themes[slot->second].codes;
      target.insert(target.end(), kept.begin(), kept.end());
      continue;
    }
    if (kept.empty()) {
      out.repair_notes.push_back("dropped empty theme '" + theme.name + "'");
      continue;
    }
    theme_slot.emplace(tkey, out.draft.themes.size());
    out.draft.themes.push_back({theme.name, std::move(kept)});
  }
  return out;
}

inline ThemeParse parse_theme_json(std::string_view reply, const std::vector<Code>* known = nullptr) {
  const auto j = parse_json_reply(reply);
  auto parsed = repair_themes(detail::themes_from_json(j), known);
  if (parsed.draft.themes.empty()) throw Error(ErrorCode::MalformedJson, "reply contains no themes");
  return parsed;
}

// ---- parsing: verdicts ----------------------------------------------------

struct VerdictItem {
  std::string item;
  std::string reason;

  friend bool operator==(const VerdictItem&, const VerdictItem&) = default;
};

struct MCVerdict {
  std::vector<VerdictItem> agreed;
  std::vector<VerdictItem> disagreed;
  Codebook revised_themes;
  bool revision_supplied = false;  // false: revised_themes is the HC version
  std::vector<std::string> repair_notes;

  friend bool operator==(const MCVerdict&, const MCVerdict&) = default;
};

namespace detail {

inline std::vector<VerdictItem> verdict_items(const json& value) {
  std::vector<VerdictItem> items;
  auto add = [&](const json& e) {
    if (e.is_string()) {
      items.push_back({e.get<std::string>(), {}});
    } else if (e.is_object()) {
      const json* item = find_key(e, {"item", "part", "change", "action", "parts", "code", "theme"});
      const json* reason = find_key(e, {"reason", "rationale", "explanation", "why"});
      if (item) {
        items.push_back({scalar_text(*item), reason ? scalar_text(*reason) : std::string{}});
      } else {
        for (auto it = e.begin(); it != e.end(); ++it) items.push_back({it.key(), scalar_text(it.value())});
      }
    } else {
      throw Error(ErrorCode::MalformedJson, "verdict entry is neither text nor an object");
    }
  };
  if (value.is_array()) {
    for (const auto& e : value) add(e);
  } else if (value.is_object()) {
    add(value);
  } else if (value.is_string()) {
    items.push_back({value.get<std::string>(), {}});
  } else if (!value.is_null()) {
    throw Error(ErrorCode::MalformedJson, "agree/disagree must be a list");
  }
  return items;
}

}  // namespace detail

/// `hc_revision` stands in for the model's revision when the reply omits one,
/// which reads as full acceptance of the human version.
inline MCVerdict parse_verdict_json(std::string_view reply, const Codebook& hc_revision) {
  const auto j = parse_json_reply(reply);
  if (!j.is_object()) throw Error(ErrorCode::MalformedJson, "verdict must be a JSON object");
  MCVerdict v;
  if (const json* a = detail::find_key(j, {"agree", "agreed", "agreements", "agree parts", "agree_parts"}))
    v.agreed = detail::verdict_items(*a);
  if (const json* d = detail::find_key(j, {"disagree", "disagreed", "disagreements", "disagree parts",
                                            "disagree_parts"}))
    v.disagreed = detail::verdict_items(*d);
  std::unordered_map<std::string, bool> agreed_keys;
  for (const auto& a : v.agreed) agreed_keys.emplace(text::fold(a.item), true);
  for (const auto& d : v.disagreed)
    if (agreed_keys.count(text::fold(d.item)))
      throw Error(ErrorCode::MalformedJson, "item '" + d.item + "' is both agreed and disagreed");

  const json* revised = detail::find_key(j, {"revised themes", "revised_themes", "revised version",
                                              "revised_version", "themes", "revision"});
  if (revised && !revised->is_null()) {
    std::vector<Code> known;
    for (const auto& t : hc_revision.themes) known.insert(known.end(), t.codes.begin(), t.codes.end());
    auto parsed = repair_themes(detail::themes_from_json(*revised), &known);
    if (parsed.draft.themes.empty()) throw Error(ErrorCode::MalformedJson, "revised themes are empty");
    v.revised_themes = std::move(parsed.draft);
    v.repair_notes = std::move(parsed.repair_notes);
    v.revision_supplied = true;
  } else {
    v.revised_themes = hc_revision;
  }
  v.revised_themes.question = hc_revision.question;
  v.revised_themes.version = hc_revision.version;
  return v;
}

/// Deductive coding reply: a JSON list of labels (or {"codes": [...]}).
inline std::vector<std::string> parse_label_list(std::string_view reply) {
  const auto j = parse_json_reply(reply);
  const json* list = &j;
  if (j.is_object()) {
    list = detail::find_key(j, {"codes", "labels", "code"});
    if (!list) throw Error(ErrorCode::MalformedJson, "expected a JSON list of code labels");
  }
  std::vector<std::string> labels;
  if (list->is_string()) return {list->get<std::string>()};
  if (!list->is_array()) throw Error(ErrorCode::MalformedJson, "expected a JSON list of code labels");
  for (const auto& e : *list) {
    if (e.is_string()) labels.push_back(e.get<std::string>());
    else if (const json* l = detail::find_key(e, {"label", "code"})) labels.push_back(detail::scalar_text(*l));
    else throw Error(ErrorCode::MalformedJson, "label list holds a non-text entry");
  }
  return labels;
}

// ---- JSON for exemplar files ----------------------------------------------

inline json to_json(const ExemplarSet& ex) {
  json arr = json::array();
  for (const auto& e : ex.exemplars) {
    json actions = json::array();
    for (const auto& a : e.actions)
      actions.push_back({{"quote", a.quote}, {"definition", a.definition}, {"label", a.label}});
    arr.push_back({{"response", e.response_text}, {"actions", std::move(actions)}});
  }
  return {{"study_goal", ex.study_goal}, {"question", ex.question}, {"exemplars", std::move(arr)}};
}

inline ExemplarSet exemplar_set_from_json(const json& j) {
  try {
    ExemplarSet ex;
    ex.study_goal = j.at("study_goal").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    for (const auto& je : j.at("exemplars")) {
      Exemplar e;
      e.response_text = je.at("response").get<std::string>();
      for (const auto& ja : je.at("actions"))
        e.actions.push_back({ja.at("quote").get<std::string>(), ja.at("definition").get<std::string>(),
                             ja.at("label").get<std::string>()});
      ex.exemplars.push_back(std::move(e));
    }
    return ex;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("exemplar set: ") + e.what());
  }
}

inline json to_json(const MCVerdict& v) {
  auto items = [](const std::vector<VerdictItem>& xs) {
    json arr = json::array();
    for (const auto& x : xs) arr.push_back({{"item", x.item}, {"reason", x.reason}});
    return arr;
  };
  json j = {{"agree", items(v.agreed)},
            {"disagree", items(v.disagreed)},
            {"revised_themes", codebook::to_json(v.revised_themes)},
            {"revision_supplied", v.revision_supplied}};
  if (!v.repair_notes.empty()) j["repair_notes"] = v.repair_notes;
  return j;
}

inline MCVerdict verdict_from_json(const json& j) {
  auto items = [](const json& arr) {
    std::vector<VerdictItem> out;
    for (const auto& x : arr) out.push_back({x.at("item").get<std::string>(), x.at("reason").get<std::string>()});
    return out;
  };
  MCVerdict v;
  v.agreed = items(j.at("agree"));
  v.disagreed = items(j.at("disagree"));
  v.revised_themes = codebook::codebook_from_json(j.at("revised_themes"));
  v.revision_supplied = j.value("revision_supplied", true);
  if (j.contains("repair_notes")) v.repair_notes = j["repair_notes"].get<std::vector<std::string>>();
  return v;
}

inline json to_json(const std::vector<ChangeRationale>& actions) {
  json arr = json::array();
  for (const auto& a : actions) arr.push_back({{"change", a.change}, {"rationale", a.rationale}});
  return arr;
}

inline std::vector<ChangeRationale> actions_from_json(const json& j) {
  std::vector<ChangeRationale> out;
  for (const auto& a : j) {
    const json* change = detail::find_key(a, {"change", "action"});
    const json* why = detail::find_key(a, {"rationale", "reason"});
    out.push_back({change ? detail::scalar_text(*change) : std::string{},
                   why ? detail::scalar_text(*why) : std::string{}});
  }
  return out;
}

}  // namespace ta::promptkit
