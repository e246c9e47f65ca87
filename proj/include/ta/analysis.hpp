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

// Agreement and code-quality metrics: Cohen's kappa (single-label and
// per-(item, label) binarized multi-label), theme-level kappa, cosine
// matching against a gold codebook, pool-stratified reports and mismatch
// triage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ta/codebook.hpp"
#include "ta/corpus.hpp"
#include "ta/error.hpp"
#include "ta/llm.hpp"
#include "ta/text.hpp"

namespace ta::analysis {

using json = nlohmann::ordered_json;
using codebook::Assignment;
using codebook::Codebook;
using corpus::PoolTag;
using llm::Vector;

enum class KappaMode { single_label, multi_label_binary };
enum class Level { code, theme };

inline std::string_view to_string(KappaMode m) {
  return m == KappaMode::single_label ? "single_label" : "multi_label_binary";
}
inline std::string_view to_string(Level l) { return l == Level::code ? "code" : "theme"; }

inline KappaMode mode_from_string(std::string_view s) {
  if (s == "single" || s == "single_label") return KappaMode::single_label;
  if (s == "multi" || s == "multi_label_binary") return KappaMode::multi_label_binary;
  throw Error(ErrorCode::InvalidArgument, "unknown kappa mode '" + std::string(s) + "' (single|multi)");
}
inline Level level_from_string(std::string_view s) {
  if (s == "code") return Level::code;
  if (s == "theme") return Level::theme;
  throw Error(ErrorCode::InvalidArgument, "unknown level '" + std::string(s) + "' (code|theme)");
}

struct AgreementReport {
  double kappa = 1.0;
  double observed_agreement = 1.0;
  double expected_agreement = 1.0;
  KappaMode mode = KappaMode::multi_label_binary;
  Level level = Level::code;
  std::size_t items = 0;
  std::size_t decisions = 0;  // paired categorical decisions the kappa pools
};

inline json to_json(const AgreementReport& r) {
  return {{"kappa", r.kappa},
          {"observed_agreement", r.observed_agreement},
          {"expected_agreement", r.expected_agreement},
          {"mode", std::string(to_string(r.mode))},
          {"level", std::string(to_string(r.level))},
          {"items", r.items},
          {"decisions", r.decisions}};
}

// Placeholder category for an uncodable item in single-label mode.
inline constexpr std::string_view kUncodable = "<uncodable>";

/// Kappa from paired categorical decisions. Counts stay integral until the
/// final division, so the degenerate case (one shared constant category) is
/// detected exactly.
inline AgreementReport kappa_from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  AgreementReport r;
  r.decisions = pairs.size();
  if (pairs.empty()) return r;  // nothing to disagree on
  std::map<std::string, std::uint64_t> na, nb;
  std::uint64_t agree = 0;
  for (const auto& [x, y] : pairs) {
    ++na[x];
    ++nb[y];
    if (x == y) ++agree;
  }
  const std::uint64_t n = pairs.size();
  std::uint64_t chance = 0;  // sum_k na[k] * nb[k]
  for (const auto& [k, ca] : na)
    if (auto it = nb.find(k); it != nb.end()) chance += ca * it->second;
  const long double nn = static_cast<long double>(n) * n;
  r.observed_agreement = static_cast<double>(static_cast<long double>(agree) / n);
  r.expected_agreement = static_cast<double>(chance / nn);
  if (static_cast<long double>(chance) == nn) {
    r.kappa = 1.0;
  } else {
    r.kappa = static_cast<double>((static_cast<long double>(n) * agree - chance) / (nn - chance));
  }
  return r;
}

namespace detail {

inline void require_same_items(const Assignment& a, const Assignment& b) {
  if (a.items.size() != b.items.size() ||
      !std::equal(a.items.begin(), a.items.end(), b.items.begin(),
                  [](const auto& x, const auto& y) { return x.first == y.first; }))
    throw Error(ErrorCode::ItemSetMismatch,
                "coders '" + a.coder + "' and '" + b.coder + "' coded different response sets");
  if (a.items.empty()) throw Error(ErrorCode::InvalidArgument, "assignments have no items");
}

inline std::set<std::string> folded(const std::set<std::string>& labels) {
  std::set<std::string> out;
  for (const auto& l : labels) out.insert(text::fold(l));
  return out;
}

inline std::string single_category(const std::string& coder, const std::string& id,
                                   const codebook::AssignmentItem& item) {
  if (item.codes.empty()) {
    if (item.uncodable) return std::string(kUncodable);
    throw Error(ErrorCode::ModeViolation, "coder '" + coder + "' gave no code to '" + id + "'");
  }
  if (item.codes.size() != 1)
    throw Error(ErrorCode::ModeViolation, "single-label mode: coder '" + coder + "' gave " +
                                              std::to_string(item.codes.size()) + " codes to '" + id + "'");
  return text::fold(*item.codes.begin());
}

}  // namespace detail

/// Cohen's kappa between two coders over the same responses.
///
/// single_label: one category per item; an uncodable item is its own category.
/// multi_label_binary: every (item, label) pair becomes a yes/no decision for
/// each coder, and kappa is computed over the pooled decisions. `universe`
/// (case-folded labels) fixes the label set; by default it is the union of
/// labels either coder used.
inline AgreementReport cohens_kappa(const Assignment& a, const Assignment& b, KappaMode mode,
                                    const std::set<std::string>* universe = nullptr) {
  detail::require_same_items(a, b);
  std::vector<std::pair<std::string, std::string>> pairs;
  if (mode == KappaMode::single_label) {
    for (const auto& [id, ia] : a.items)
      pairs.emplace_back(detail::single_category(a.coder, id, ia),
                         detail::single_category(b.coder, id, b.items.at(id)));
  } else {
    std::set<std::string> labels;
    if (universe) {
      labels = detail::folded(*universe);
    } else {
      for (const auto* asg : {&a, &b})
        for (const auto& [id, item] : asg->items)
          for (const auto& l : item.codes) labels.insert(text::fold(l));
    }
    for (const auto& [id, ia] : a.items) {
      const auto fa = detail::folded(ia.codes);
      const auto fb = detail::folded(b.items.at(id).codes);
      for (const auto& l : fa)
        if (!labels.count(l)) throw Error(ErrorCode::UnknownCode, "label '" + l + "' outside the label universe");
      for (const auto& l : fb)
        if (!labels.count(l)) throw Error(ErrorCode::UnknownCode, "label '" + l + "' outside the label universe");
      for (const auto& l : labels) pairs.emplace_back(fa.count(l) ? "1" : "0", fb.count(l) ? "1" : "0");
    }
  }
  auto r = kappa_from_pairs(pairs);
  r.mode = mode;
  r.level = Level::code;
  r.items = a.items.size();
  return r;
}

/// Multi-label universe taken from the codebook's labels.
inline AgreementReport cohens_kappa(const Assignment& a, const Assignment& b, KappaMode mode, const Codebook& cb) {
  if (mode == KappaMode::single_label) return cohens_kappa(a, b, mode);
  std::set<std::string> universe;
  for (const auto& l : cb.labels()) universe.insert(text::fold(l));
  return cohens_kappa(a, b, mode, &universe);
}

/// Replaces every label by its theme name; duplicates per item collapse.
inline Assignment to_theme_assignment(const Assignment& a, const codebook::ThemeIndex& index) {
  Assignment out{a.coder, {}};
  for (const auto& [id, item] : a.items) {
    codebook::AssignmentItem t{{}, item.uncodable};
    for (const auto& l : item.codes) t.codes.insert(index.theme_of(l));
    out.items.emplace(id, std::move(t));
  }
  return out;
}

inline AgreementReport kappa_by_theme(const Assignment& a, const Assignment& b, const Codebook& cb, KappaMode mode) {
  codebook::ThemeIndex index(cb);
  const auto ta = to_theme_assignment(a, index);
  const auto tb = to_theme_assignment(b, index);
  AgreementReport r;
  if (mode == KappaMode::single_label) {
    r = cohens_kappa(ta, tb, mode);
  } else {
    std::set<std::string> universe;
    for (const auto& t : cb.themes) universe.insert(text::fold(t.name));
    r = cohens_kappa(ta, tb, mode, &universe);
  }
  r.level = Level::theme;
  return r;
}

inline AgreementReport agreement(const Assignment& a, const Assignment& b, const Codebook& cb, KappaMode mode,
                                 Level level) {
  return level == Level::code ? cohens_kappa(a, b, mode, cb) : kappa_by_theme(a, b, cb, mode);
}

// ---- stratified reports ------------------------------------------------------

struct StratifiedReport {
  std::map<std::string, AgreementReport> strata;  // "seen", "unseen", "all"
  std::vector<std::string> missing_strata;
};

inline Assignment restrict_to(const Assignment& a, const std::set<std::string>& ids) {
  Assignment out{a.coder, {}};
  for (const auto& [id, item] : a.items)
    if (ids.count(id)) out.items.emplace(id, item);
  return out;
}

/// Seen-only, unseen-only and pooled kappa. The pooled value is recomputed
/// from all items, never averaged from the strata. An empty stratum is left
/// out and listed in `missing_strata`.
inline StratifiedReport stratified_report(const Assignment& a, const Assignment& b, const Codebook& cb,
                                          const std::map<std::string, PoolTag>& pool_tags, KappaMode mode,
                                          Level level = Level::code) {
  detail::require_same_items(a, b);
  std::set<std::string> seen, unseen, all;
  for (const auto& [id, _] : a.items) {
    auto it = pool_tags.find(id);
    if (it == pool_tags.end()) throw Error(ErrorCode::MissingPoolTag, "response '" + id + "' has no pool tag");
    (it->second == PoolTag::seen ? seen : unseen).insert(id);
    all.insert(id);
  }
  StratifiedReport out;
  auto add = [&](const std::string& name, const std::set<std::string>& ids) {
    if (ids.empty()) {
      out.missing_strata.push_back(name);
      return;
    }
    out.strata[name] = agreement(restrict_to(a, ids), restrict_to(b, ids), cb, mode, level);
  };
  add("seen", seen);
  add("unseen", unseen);
  add("all", all);
  return out;
}

inline json to_json(const StratifiedReport& r) {
  json strata = json::object();
  for (const char* name : {"seen", "unseen", "all"})
    if (auto it = r.strata.find(name); it != r.strata.end()) strata[name] = to_json(it->second);
  return {{"strata", std::move(strata)}, {"missing_strata", r.missing_strata}};
}

// ---- cosine matching ---------------------------------------------------------

inline double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.dim() != v.dim())
    throw Error(ErrorCode::DimensionMismatch,
                "dimensions " + std::to_string(u.dim()) + " and " + std::to_string(v.dim()));
  if (u.dim() == 0) throw Error(ErrorCode::ZeroVector, "empty vector");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.dim(); ++i) {
    dot += u.components[i] * v.components[i];
    nu += u.components[i] * u.components[i];
    nv += v.components[i] * v.components[i];
  }
  if (nu == 0.0 || nv == 0.0) throw Error(ErrorCode::ZeroVector, "cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

struct MatchPair {
  std::string generated;
  std::string gold;  // best gold match, matched or not
  double cosine = 0.0;
  bool matched = false;
};

struct MatchReport {
  double similarity = 0.0;
  double accuracy = 0.0;
  double recall = 0.0;
  double tau = 0.8;
  std::vector<MatchPair> pairs;
  std::vector<std::string> unmatched_gold;
};

struct MatchOptions {
  double tau = 0.8;
  // Embed "label: definition" rather than the bare label.
  bool embed_definitions = true;
};

inline std::string embedding_text(const codebook::Code& c, bool with_definition) {
  if (!with_definition || text::is_blank(c.definition)) return c.label;
  return c.label + ": " + c.definition;
}

/// Each generated code takes its highest-cosine gold code (first on ties) and
/// counts as matched when that cosine reaches tau.
/// `embed` maps a list of texts to order-aligned vectors.
template <typename Embedder>
MatchReport match_codes(const std::vector<codebook::Code>& generated, const std::vector<codebook::Code>& gold,
                        const MatchOptions& opts, Embedder&& embed) {
  if (generated.empty() || gold.empty()) throw Error(ErrorCode::EmptyInput, "both code lists must be non-empty");
  if (!(opts.tau > 0.0 && opts.tau <= 1.0)) throw Error(ErrorCode::InvalidArgument, "tau must be in (0, 1]");
  std::vector<std::string> texts;
  for (const auto& c : generated) texts.push_back(embedding_text(c, opts.embed_definitions));
  for (const auto& c : gold) texts.push_back(embedding_text(c, opts.embed_definitions));
  const std::vector<Vector> vecs = embed(texts);
  if (vecs.size() != texts.size()) throw Error(ErrorCode::BackendError, "embedder returned the wrong number of vectors");

  MatchReport r;
  r.tau = opts.tau;
  std::vector<bool> gold_hit(gold.size(), false);
  double sum = 0.0;
  std::size_t matched = 0;
  for (std::size_t g = 0; g < generated.size(); ++g) {
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t k = 0; k < gold.size(); ++k) {
      const double c = cosine_similarity(vecs[g], vecs[generated.size() + k]);
      if (c > best_cos) {
        best_cos = c;
        best = k;
      }
    }
    const bool hit = best_cos >= opts.tau;
    if (hit) {
      ++matched;
      gold_hit[best] = true;
    }
    sum += best_cos;
    r.pairs.push_back({generated[g].label, gold[best].label, best_cos, hit});
  }
  r.similarity = sum / static_cast<double>(generated.size());
  r.accuracy = static_cast<double>(matched) / static_cast<double>(generated.size());
  const auto gold_matched = static_cast<std::size_t>(std::count(gold_hit.begin(), gold_hit.end(), true));
  r.recall = static_cast<double>(gold_matched) / static_cast<double>(gold.size());
  for (std::size_t k = 0; k < gold.size(); ++k)
    if (!gold_hit[k]) r.unmatched_gold.push_back(gold[k].label);
  return r;
}

inline std::vector<codebook::Code> all_codes(const Codebook& cb) {
  std::vector<codebook::Code> out;
  for (const auto& t : cb.themes) out.insert(out.end(), t.codes.begin(), t.codes.end());
  return out;
}

inline json to_json(const MatchReport& r) {
  json pairs = json::array();
  for (const auto& p : r.pairs)
    pairs.push_back({{"generated", p.generated}, {"gold", p.gold}, {"cosine", p.cosine}, {"matched", p.matched}});
  return {{"similarity", r.similarity}, {"accuracy", r.accuracy},        {"recall", r.recall},
          {"tau", r.tau},               {"pairs", std::move(pairs)},     {"unmatched_gold", r.unmatched_gold}};
}

// ---- mismatch triage ---------------------------------------------------------

enum class MismatchCategory { Ambiguity, Granularity, Distinction };

inline std::string_view to_string(MismatchCategory c) {
  switch (c) {
    case MismatchCategory::Ambiguity: return "Ambiguity";
    case MismatchCategory::Granularity: return "Granularity";
    case MismatchCategory::Distinction: return "Distinction";
  }
  return "?";
}

struct MismatchItem {
  std::string response_id;
  std::set<std::string> a_codes, b_codes;
  std::set<std::string> a_themes, b_themes;
  MismatchCategory category = MismatchCategory::Distinction;
};

struct TriageReport {
  std::map<MismatchCategory, std::size_t> counts{{MismatchCategory::Ambiguity, 0},
                                                 {MismatchCategory::Granularity, 0},
                                                 {MismatchCategory::Distinction, 0}};
  std::vector<MismatchItem> items;
  std::size_t compared = 0;
};

/// First matching rule wins: equal theme sets -> Ambiguity; one label set a
/// strict superset of the other -> Granularity; otherwise Distinction.
inline MismatchCategory classify_mismatch(const std::set<std::string>& a_codes, const std::set<std::string>& b_codes,
                                          const std::set<std::string>& a_themes,
                                          const std::set<std::string>& b_themes) {
  if (a_themes == b_themes) return MismatchCategory::Ambiguity;
  const bool a_covers = std::includes(a_codes.begin(), a_codes.end(), b_codes.begin(), b_codes.end());
  const bool b_covers = std::includes(b_codes.begin(), b_codes.end(), a_codes.begin(), a_codes.end());
  if (a_covers != b_covers) return MismatchCategory::Granularity;
  return MismatchCategory::Distinction;
}

inline TriageReport triage_mismatches(const Assignment& a, const Assignment& b, const Codebook& cb) {
  detail::require_same_items(a, b);
  codebook::ThemeIndex index(cb);
  TriageReport report;
  for (const auto& [id, ia] : a.items) {
    ++report.compared;
    const auto fa = detail::folded(ia.codes);
    const auto fb = detail::folded(b.items.at(id).codes);
    if (fa == fb) continue;
    MismatchItem m;
    m.response_id = id;
    m.a_codes = ia.codes;
    m.b_codes = b.items.at(id).codes;
    for (const auto& l : m.a_codes) m.a_themes.insert(index.theme_of(l));
    for (const auto& l : m.b_codes) m.b_themes.insert(index.theme_of(l));
    m.category = classify_mismatch(fa, fb, m.a_themes, m.b_themes);
    ++report.counts[m.category];
    report.items.push_back(std::move(m));
  }
  return report;
}

inline json to_json(const TriageReport& r) {
  json counts = json::object();
  std::size_t total = 0;
  for (const auto& [cat, n] : r.counts) {
    counts[std::string(to_string(cat))] = n;
    total += n;
  }
  counts["Total"] = total;
  json items = json::array();
  for (const auto& m : r.items)
    items.push_back({{"response_id", m.response_id},
                     {"category", std::string(to_string(m.category))},
                     {"a_codes", m.a_codes},
                     {"b_codes", m.b_codes},
                     {"a_themes", m.a_themes},
                     {"b_themes", m.b_themes}});
  return {{"compared", r.compared}, {"counts", std::move(counts)}, {"items", std::move(items)}};
}

// ---- evaluation report -------------------------------------------------------

struct EvalOptions {
  KappaMode mode = KappaMode::multi_label_binary;
  std::vector<Level> levels{Level::code};
};

/// Every coder pair x level, each with seen / unseen / all strata. With no
/// pool tags every item counts as seen.
inline json evaluation_report(const std::vector<Assignment>& assignments, const Codebook& cb,
                              const std::map<std::string, PoolTag>& pool_tags, const EvalOptions& opts) {
  if (assignments.size() < 2)
    throw Error(ErrorCode::InsufficientAssignments, "need at least two coders' assignments");
  json pairs = json::array();
  for (std::size_t i = 0; i < assignments.size(); ++i)
    for (std::size_t k = i + 1; k < assignments.size(); ++k)
      for (auto level : opts.levels) {
        std::map<std::string, PoolTag> tags = pool_tags;
        if (tags.empty())
          for (const auto& [id, _] : assignments[i].items) tags.emplace(id, PoolTag::seen);
        auto rep = stratified_report(assignments[i], assignments[k], cb, tags, opts.mode, level);
        json entry = {{"a", assignments[i].coder}, {"b", assignments[k].coder},
                      {"level", std::string(to_string(level))}};
        entry.update(to_json(rep));
        pairs.push_back(std::move(entry));
      }
  return {{"mode", std::string(to_string(opts.mode))}, {"pairs", std::move(pairs)}};
}

/// Plain-text table: one row per coder pair and level, columns Seen/Unseen/All.
inline std::string render_table(const json& report) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "pair" << std::setw(8) << "level" << std::setw(9) << "Seen" << std::setw(9)
     << "Unseen" << "All\n";
  for (const auto& p : report.at("pairs")) {
    os << std::setw(24) << (p.at("a").get<std::string>() + " + " + p.at("b").get<std::string>()) << std::setw(8)
       << p.at("level").get<std::string>();
    for (const char* s : {"seen", "unseen", "all"}) {
      std::ostringstream cell;
      if (p.at("strata").contains(s))
        cell << std::fixed << std::setprecision(2) << p["strata"][s]["kappa"].get<double>();
      else
        cell << "--";
      os << std::setw(s[0] == 'a' ? 0 : 9) << cell.str();
    }
    os << "\n";
  }
  if (report.contains("match")) {
    const auto& m = report["match"];
    os << std::fixed << std::setprecision(4) << "similarity " << m["similarity"].get<double>() << "  accuracy "
       << std::setprecision(2) << m["accuracy"].get<double>() << "  recall " << m["recall"].get<double>()
       << "  (tau " << m["tau"].get<double>() << ")\n";
  }
  return os.str();
}

}  // namespace ta::analysis
