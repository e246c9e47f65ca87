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

// The coding session: exemplar-driven extraction, grouping, the human/model
// refinement loop, finalization, deductive coding and evaluation.
//
// SessionState is plain data. Engine mutates it and appends to the audit
// log; every command is recorded with its inputs, which is what makes
// replay() possible.

#include <algorithm>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ta/analysis.hpp"
#include "ta/codebook.hpp"
#include "ta/corpus.hpp"
#include "ta/error.hpp"
#include "ta/llm.hpp"
#include "ta/promptkit.hpp"
#include "ta/text.hpp"

namespace ta::workflow {

using json = nlohmann::ordered_json;
using codebook::Assignment;
using codebook::Code;
using codebook::Codebook;
using codebook::InitialCode;
using promptkit::ChangeRationale;
using promptkit::ExemplarSet;
using promptkit::MCVerdict;

inline constexpr std::string_view kSchema = "ta.session/1";

enum class Phase { familiarization, extraction, grouping, refinement, finalized, coding, evaluated };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::familiarization: return "familiarization";
    case Phase::extraction: return "extraction";
    case Phase::grouping: return "grouping";
    case Phase::refinement: return "refinement";
    case Phase::finalized: return "finalized";
    case Phase::coding: return "coding";
    case Phase::evaluated: return "evaluated";
  }
  return "?";
}

inline Phase phase_from_string(std::string_view s) {
  for (auto p : {Phase::familiarization, Phase::extraction, Phase::grouping, Phase::refinement, Phase::finalized,
                 Phase::coding, Phase::evaluated})
    if (to_string(p) == s) return p;
  throw Error(ErrorCode::SchemaMismatch, "unknown phase '" + std::string(s) + "'");
}

struct AuditEntry {
  std::uint64_t seq = 0;
  std::string timestamp;
  std::string actor;  // HC | MC | system
  std::string kind;
  json payload;

  friend bool operator==(const AuditEntry& a, const AuditEntry& b) {
    return a.seq == b.seq && a.timestamp == b.timestamp && a.actor == b.actor && a.kind == b.kind &&
           a.payload == b.payload;
  }
};

struct DiscussionRound {
  int index = 0;  // 1-based
  Codebook base;  // draft the HC revised
  Codebook hc_revision;
  std::vector<ChangeRationale> hc_actions;
  std::optional<MCVerdict> mc_verdict;
  bool hc_satisfied = false;
  bool mc_satisfied = false;

  bool open() const { return !mc_verdict.has_value(); }
  friend bool operator==(const DiscussionRound&, const DiscussionRound&) = default;
};

struct ExtractionFailure {
  std::string response_id;
  std::string error;
  std::vector<std::string> residue;

  friend bool operator==(const ExtractionFailure&, const ExtractionFailure&) = default;
};

struct SessionOptions {
  int max_rounds = 10;
  // Pack several responses per extraction prompt under the context budget.
  bool batch_extraction = false;
  bool strict_exemplar_count = true;

  friend bool operator==(const SessionOptions&, const SessionOptions&) = default;
};

struct SessionState {
  Phase phase = Phase::familiarization;
  SessionOptions options;
  llm::LLMConfig config;
  corpus::PoolSplit corpus;
  ExemplarSet exemplars;
  std::vector<InitialCode> initial_codes;
  std::vector<ExtractionFailure> extraction_failures;
  std::optional<Codebook> draft;
  std::vector<std::string> draft_notes;
  std::vector<DiscussionRound> rounds;
  std::optional<Codebook> final;
  bool forced_convergence = false;
  std::vector<Assignment> assignments;
  std::vector<std::string> coding_notes;
  std::optional<json> evaluation;
  std::vector<AuditEntry> audit;

  const Assignment* assignment_of(std::string_view coder) const {
    for (const auto& a : assignments)
      if (a.coder == coder) return &a;
    return nullptr;
  }
  std::size_t llm_attempts() const {
    return static_cast<std::size_t>(
        std::count_if(audit.begin(), audit.end(), [](const AuditEntry& e) { return e.kind == "llm_request"; }));
  }
  std::map<std::string, corpus::PoolTag> pool_tags() const {
    std::map<std::string, corpus::PoolTag> tags;
    for (const auto& r : corpus.seen.responses) tags.emplace(r.id, corpus::PoolTag::seen);
    for (const auto& r : corpus.unseen.responses) tags.emplace(r.id, corpus::PoolTag::unseen);
    return tags;
  }
};

struct Convergence {
  bool converged = false;
  bool forced = false;
};

/// Never considers a round still waiting for its verdict. Hitting max_rounds
/// counts as convergence with `forced` set.
inline Convergence check_convergence(const SessionState& s) {
  if (s.rounds.empty() || s.rounds.back().open()) return {};
  const auto& last = s.rounds.back();
  if (last.hc_satisfied && last.mc_satisfied) return {true, false};
  if (static_cast<int>(s.rounds.size()) >= s.options.max_rounds) return {true, true};
  return {};
}

struct ExtractionReport {
  std::size_t responses = 0;
  std::size_t codes = 0;
  std::vector<ExtractionFailure> failures;
  std::vector<std::string> residue;
};

struct CodingResult {
  Assignment assignment;  // only the items coded by this call
  std::vector<std::string> notes;
};

using WallClock = std::function<std::string()>;

inline WallClock system_wall_clock() {
  return [] { return text::iso8601(std::chrono::system_clock::now()); };
}

/// Replays recorded timestamps in order; repeats the last one when exhausted.
inline WallClock replay_wall_clock(std::vector<std::string> stamps) {
  auto state = std::make_shared<std::pair<std::vector<std::string>, std::size_t>>(std::move(stamps), 0);
  return [state] {
    auto& [v, i] = *state;
    if (v.empty()) return std::string{};
    return i < v.size() ? v[i++] : v.back();
  };
}

// Serialization helpers used by the engine's audit payloads; defined below.
inline json to_json(const SessionOptions& o);
inline SessionOptions session_options_from_json(const json& j);

class Engine {
 public:
  explicit Engine(llm::Gateway& gateway, WallClock clock = system_wall_clock())
      : gateway_(gateway), clock_(std::move(clock)) {}

  SessionState start_session(const llm::LLMConfig& cfg, const corpus::PoolSplit& split, const ExemplarSet& exemplars,
                             const SessionOptions& options = {}) {
    cfg.validate();
    promptkit::validate_exemplars(exemplars, {options.strict_exemplar_count});
    if (options.max_rounds <= 0) throw Error(ErrorCode::InvalidArgument, "max_rounds must be positive");
    if (split.seen.n() == 0) throw Error(ErrorCode::InvalidArgument, "the development pool is empty");
    SessionState s;
    s.options = options;
    s.config = cfg;
    s.corpus = split;
    s.exemplars = exemplars;
    const auto corpus_json = corpus::to_json(split);
    const auto exemplar_json = promptkit::to_json(exemplars);
    log(s, "HC", "command",
        {{"op", "start_session"},
         {"config", llm::to_json(cfg)},
         {"options", to_json(options)},
         {"corpus", corpus_json},
         {"exemplars", exemplar_json},
         {"corpus_fingerprint", text::fingerprint(corpus_json.dump())},
         {"exemplar_hash", text::fingerprint(exemplar_json.dump())}});
    transition(s, Phase::extraction);
    return s;
  }

  ExtractionReport run_extraction(SessionState& s) {
    require_phase(s, Phase::extraction, "run_extraction");
    log(s, "system", "command", {{"op", "run_extraction"}});
    ExtractionReport report;
    const auto& pool = s.corpus.seen.responses;
    report.responses = pool.size();
    std::vector<InitialCode> codes;
    auto fail = [&](const std::string& id, const std::string& err, std::vector<std::string> residue = {}) {
      report.failures.push_back({id, err, std::move(residue)});
    };
    const promptkit::RenderOptions ropts{s.options.strict_exemplar_count};
    if (!s.options.batch_extraction) {
      for (const auto& r : pool) {
        try {
          const auto reply = complete(s, promptkit::render_initial_code_prompt(s.exemplars, r, ropts));
          auto parsed = promptkit::scan_code_actions(reply, r.id);
          if (parsed.codes.empty()) {
            fail(r.id, "NoActionsFound", parsed.residue);
            continue;
          }
          report.residue.insert(report.residue.end(), parsed.residue.begin(), parsed.residue.end());
          codes.insert(codes.end(), parsed.codes.begin(), parsed.codes.end());
        } catch (const Error& e) {
          fail(r.id, e.what());
        }
      }
    } else {
      for (const auto& batch : pack_batches(s, pool, report)) {
        std::vector<std::string> ids;
        for (const auto& r : batch) ids.push_back(r.id);
        try {
          const auto reply = complete(s, promptkit::render_initial_code_prompt_batch(s.exemplars, batch, ropts));
          auto sections = promptkit::parse_batch_actions(reply, ids);
          for (const auto& id : ids) {
            auto& parsed = sections[id];
            if (parsed.codes.empty()) {
              fail(id, "NoActionsFound", parsed.residue);
              continue;
            }
            report.residue.insert(report.residue.end(), parsed.residue.begin(), parsed.residue.end());
            codes.insert(codes.end(), parsed.codes.begin(), parsed.codes.end());
          }
        } catch (const Error& e) {
          for (const auto& id : ids) fail(id, e.what());
        }
      }
    }
    for (const auto& f : report.failures)
      log(s, "system", "extraction_failure", {{"response_id", f.response_id}, {"error", f.error}, {"residue", f.residue}});
    report.codes = codes.size();
    if (codes.empty()) {
      s.extraction_failures = report.failures;
      throw Error(ErrorCode::ExtractionFailed, "no response produced a parseable code");
    }
    s.initial_codes = std::move(codes);
    s.extraction_failures = report.failures;
    transition(s, Phase::grouping);
    return report;
  }

  const Codebook& run_grouping(SessionState& s) {
    require_phase(s, Phase::grouping, "run_grouping");
    if (s.initial_codes.empty()) throw Error(ErrorCode::PhaseError, "no initial codes to group");
    log(s, "system", "command", {{"op", "run_grouping"}});
    const auto merged = codebook::merge_duplicate_codes(s.initial_codes);
    const auto reply = complete(s, promptkit::render_grouping_prompt(s.corpus.seen.question, merged));
    promptkit::ThemeParse parsed;
    try {
      parsed = promptkit::parse_theme_json(reply, &merged);
    } catch (const Error& e) {
      log(s, "system", "error", {{"op", "run_grouping"}, {"error", e.what()}});
      throw;
    }
    codebook::ThemeIndex placed(parsed.draft);
    for (const auto& c : merged)
      if (!placed.contains(c.label)) parsed.repair_notes.push_back("code '" + c.label + "' was not placed in any theme");
    parsed.draft.question = s.corpus.seen.question;
    parsed.draft.version = 1;
    for (const auto& n : parsed.repair_notes) log(s, "system", "repair_note", {{"note", n}});
    s.draft = std::move(parsed.draft);
    s.draft_notes = std::move(parsed.repair_notes);
    transition(s, Phase::refinement);
    return *s.draft;
  }

  const DiscussionRound& submit_hc_revision(SessionState& s, Codebook revision, std::vector<ChangeRationale> actions,
                                            bool satisfied) {
    require_phase(s, Phase::refinement, "submit_hc_revision");
    if (!s.rounds.empty() && s.rounds.back().open())
      throw Error(ErrorCode::PhaseError, "round " + std::to_string(s.rounds.back().index) + " awaits its verdict");
    if (static_cast<int>(s.rounds.size()) >= s.options.max_rounds)
      throw Error(ErrorCode::MaxRoundsReached, "max_rounds " + std::to_string(s.options.max_rounds) + " reached");
    if (revision.question.empty()) revision.question = s.draft->question;
    if (revision.question != s.draft->question)
      throw Error(ErrorCode::QuestionMismatch, "revision answers a different question");
    const bool changed = !codebook::same_content(*s.draft, revision);
    for (const auto& a : actions)
      if (text::is_blank(a.change) || text::is_blank(a.rationale))
        throw Error(ErrorCode::EmptyRationale, "every stated change needs a rationale");
    if (changed && actions.empty())
      throw Error(ErrorCode::EmptyRationale, "the revision changes the codebook but gives no rationale");
    codebook::require_valid(revision);
    revision.version = s.draft->version + 1;
    log(s, "HC", "command",
        {{"op", "submit_hc_revision"},
         {"revision", codebook::to_json(revision)},
         {"actions", promptkit::to_json(actions)},
         {"satisfied", satisfied}});
    DiscussionRound round;
    round.index = static_cast<int>(s.rounds.size()) + 1;
    round.base = *s.draft;
    round.hc_revision = std::move(revision);
    round.hc_actions = std::move(actions);
    round.hc_satisfied = satisfied;
    s.rounds.push_back(std::move(round));
    return s.rounds.back();
  }

  const MCVerdict& request_mc_verdict(SessionState& s) {
    require_phase(s, Phase::refinement, "request_mc_verdict");
    if (s.rounds.empty() || !s.rounds.back().open()) throw Error(ErrorCode::NoOpenRound, "no round awaits a verdict");
    log(s, "system", "command", {{"op", "request_mc_verdict"}});
    auto& round = s.rounds.back();
    MCVerdict verdict;
    if (round.hc_actions.empty() && codebook::same_content(round.base, round.hc_revision)) {
      // Nothing to discuss: the HC accepted the draft unchanged.
      verdict.revised_themes = round.hc_revision;
    } else {
      const auto prompt = promptkit::render_refinement_prompt(round.base, round.hc_revision, round.hc_actions);
      const auto reply = complete(s, prompt);
      try {
        verdict = promptkit::parse_verdict_json(reply, round.hc_revision);
      } catch (const Error& e) {
        log(s, "system", "error", {{"op", "request_mc_verdict"}, {"error", e.what()}});
        throw;
      }
    }
    verdict.revised_themes.question = round.hc_revision.question;
    verdict.revised_themes.version = round.hc_revision.version;
    if (verdict.agreed.size() + verdict.disagreed.size() < round.hc_actions.size())
      verdict.repair_notes.push_back("verdict covers " +
                                     std::to_string(verdict.agreed.size() + verdict.disagreed.size()) + " of " +
                                     std::to_string(round.hc_actions.size()) + " stated changes");
    round.mc_satisfied = verdict.disagreed.empty();
    log(s, "MC", "verdict", promptkit::to_json(verdict));
    s.draft = verdict.revised_themes;
    round.mc_verdict = std::move(verdict);
    return *round.mc_verdict;
  }

  const Codebook& finalize(SessionState& s) {
    require_phase(s, Phase::refinement, "finalize");
    const auto conv = check_convergence(s);
    if (!conv.converged) throw Error(ErrorCode::NotConverged, "HC and MC are not both satisfied yet");
    codebook::require_valid(*s.draft);
    log(s, "HC", "command", {{"op", "finalize"}, {"forced", conv.forced}});
    s.final = *s.draft;
    s.forced_convergence = conv.forced;
    transition(s, Phase::finalized);
    transition(s, Phase::coding);
    return *s.final;
  }

  CodingResult run_mc_coding(SessionState& s, const corpus::ResponseSet& targets) {
    require_coding(s, "run_mc_coding");
    log(s, "system", "command", {{"op", "run_mc_coding"}, {"targets", corpus::to_json(targets)}});
    const codebook::ThemeIndex index(*s.final);
    CodingResult result;
    result.assignment.coder = "MC";
    for (const auto& r : targets.responses) {
      codebook::AssignmentItem item;
      try {
        const auto reply = complete(s, promptkit::render_deductive_prompt(*s.final, r));
        for (const auto& label : promptkit::parse_label_list(reply)) {
          if (const auto* canon = index.canonical(label)) {
            item.codes.insert(*canon);
          } else {
            result.notes.push_back("response '" + r.id + "': dropped off-codebook label '" + label + "'");
          }
        }
      } catch (const Error& e) {
        result.notes.push_back("response '" + r.id + "': " + e.what());
      }
      item.uncodable = item.codes.empty();
      result.assignment.items[r.id] = std::move(item);
    }
    for (const auto& n : result.notes) log(s, "system", "coding_note", {{"note", n}});
    merge_assignment(s, result.assignment);
    s.coding_notes.insert(s.coding_notes.end(), result.notes.begin(), result.notes.end());
    return result;
  }

  /// Records a human (or any other) coder's assignment; items merge into an
  /// existing assignment of the same coder.
  void add_assignment(SessionState& s, const Assignment& a) {
    require_coding(s, "add_assignment");
    if (a.coder.empty()) throw Error(ErrorCode::InvalidAssignment, "assignment has no coder");
    codebook::validate_assignment(a, *s.final);
    Assignment canonical{a.coder, {}};
    const codebook::ThemeIndex index(*s.final);
    for (const auto& [id, item] : a.items) {
      codebook::AssignmentItem c{{}, item.uncodable};
      for (const auto& l : item.codes) c.codes.insert(*index.canonical(l));
      canonical.items.emplace(id, std::move(c));
    }
    log(s, a.coder == "MC" ? "MC" : "HC", "command", {{"op", "add_assignment"}, {"assignment", codebook::to_json(canonical)}});
    merge_assignment(s, canonical);
  }

  /// Kappa for every coder pair with seen/unseen/all strata, plus a gold
  /// code match when `gold` is given.
  const json& evaluate(SessionState& s, const analysis::EvalOptions& opts, const std::optional<Codebook>& gold = {},
                       const analysis::MatchOptions& match = {}) {
    require_coding(s, "evaluate");
    if (s.assignments.size() < 2)
      throw Error(ErrorCode::InsufficientAssignments, "need at least two coders' assignments");
    json levels = json::array();
    for (auto l : opts.levels) levels.push_back(std::string(analysis::to_string(l)));
    json cmd = {{"op", "evaluate"},
                {"mode", std::string(analysis::to_string(opts.mode))},
                {"levels", levels},
                {"tau", match.tau},
                {"embed_definitions", match.embed_definitions}};
    if (gold) cmd["gold"] = codebook::to_json(*gold);
    log(s, "system", "command", cmd);
    auto report = analysis::evaluation_report(s.assignments, *s.final, s.pool_tags(), opts);
    if (gold) {
      auto embed = [&](const std::vector<std::string>& texts) { return gateway_.embed(texts, s.config, sink(s)); };
      report["match"] = analysis::to_json(
          analysis::match_codes(analysis::all_codes(*s.final), analysis::all_codes(*gold), match, embed));
    }
    s.evaluation = std::move(report);
    if (s.phase != Phase::evaluated) transition(s, Phase::evaluated);
    return *s.evaluation;
  }

  llm::AuditSink sink(SessionState& s) {
    return [this, &s](std::string_view kind, const json& payload) {
      log(s, kind == "llm_reply" ? "MC" : "system", std::string(kind), payload);
    };
  }

  void log(SessionState& s, std::string actor, std::string kind, json payload) {
    AuditEntry e;
    e.seq = s.audit.empty() ? 1 : s.audit.back().seq + 1;
    e.timestamp = clock_();
    e.actor = std::move(actor);
    e.kind = std::move(kind);
    e.payload = std::move(payload);
    s.audit.push_back(std::move(e));
  }

 private:
  std::string complete(SessionState& s, const std::string& prompt) { return gateway_.complete(prompt, s.config, sink(s)); }

  void transition(SessionState& s, Phase to) {
    log(s, "system", "phase", {{"from", std::string(to_string(s.phase))}, {"to", std::string(to_string(to))}});
    s.phase = to;
  }

  static void require_phase(const SessionState& s, Phase p, const char* op) {
    if (s.phase != p)
      throw Error(ErrorCode::PhaseError, std::string(op) + " needs phase '" + std::string(to_string(p)) +
                                             "', session is in '" + std::string(to_string(s.phase)) + "'");
  }

  static void require_coding(const SessionState& s, const char* op) {
    if ((s.phase != Phase::coding && s.phase != Phase::evaluated) || !s.final)
      throw Error(ErrorCode::PhaseError, std::string(op) + " needs a finalized codebook; session is in '" +
                                             std::string(to_string(s.phase)) + "'");
  }

  static void merge_assignment(SessionState& s, const Assignment& a) {
    for (auto& existing : s.assignments)
      if (existing.coder == a.coder) {
        for (const auto& [id, item] : a.items) existing.items[id] = item;
        return;
      }
    s.assignments.push_back(a);
  }

  // Greedy packing in pool order; a response that does not fit even alone
  // is reported as a failure.
  std::vector<std::vector<corpus::Response>> pack_batches(const SessionState& s,
                                                          const std::vector<corpus::Response>& pool,
                                                          ExtractionReport& report) const {
    const promptkit::RenderOptions ropts{s.options.strict_exemplar_count};
    const auto budget = static_cast<std::size_t>(s.config.context_budget_tokens);
    std::vector<std::vector<corpus::Response>> batches;
    std::vector<corpus::Response> current;
    for (const auto& r : pool) {
      auto candidate = current;
      candidate.push_back(r);
      if (llm::estimate_tokens(promptkit::render_initial_code_prompt_batch(s.exemplars, candidate, ropts)) <= budget) {
        current = std::move(candidate);
        continue;
      }
      if (!current.empty()) batches.push_back(std::move(current));
      current.clear();
      if (llm::estimate_tokens(promptkit::render_initial_code_prompt_batch(s.exemplars, {r}, ropts)) <= budget)
        current.push_back(r);
      else
        report.failures.push_back({r.id, "ContextBudgetExceeded: response does not fit the context budget", {}});
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
  }

  llm::Gateway& gateway_;
  WallClock clock_;
};

// ---- persistence -------------------------------------------------------------

inline json to_json(const SessionOptions& o) {
  return {{"max_rounds", o.max_rounds},
          {"batch_extraction", o.batch_extraction},
          {"strict_exemplar_count", o.strict_exemplar_count}};
}

inline SessionOptions session_options_from_json(const json& j) {
  SessionOptions o;
  o.max_rounds = j.value("max_rounds", o.max_rounds);
  o.batch_extraction = j.value("batch_extraction", o.batch_extraction);
  o.strict_exemplar_count = j.value("strict_exemplar_count", o.strict_exemplar_count);
  return o;
}

inline json to_json(const AuditEntry& e) {
  return {{"seq", e.seq}, {"timestamp", e.timestamp}, {"actor", e.actor}, {"kind", e.kind}, {"payload", e.payload}};
}

inline AuditEntry audit_entry_from_json(const json& j) {
  return {j.at("seq").get<std::uint64_t>(), j.at("timestamp").get<std::string>(), j.at("actor").get<std::string>(),
          j.at("kind").get<std::string>(), j.at("payload")};
}

inline json to_json(const DiscussionRound& r) {
  json j = {{"index", r.index},
            {"base", codebook::to_json(r.base)},
            {"hc_revision", codebook::to_json(r.hc_revision)},
            {"hc_actions", promptkit::to_json(r.hc_actions)},
            {"hc_satisfied", r.hc_satisfied},
            {"mc_satisfied", r.mc_satisfied}};
  j["mc_verdict"] = r.mc_verdict ? promptkit::to_json(*r.mc_verdict) : json(nullptr);
  return j;
}

inline DiscussionRound round_from_json(const json& j) {
  DiscussionRound r;
  r.index = j.at("index").get<int>();
  r.base = codebook::codebook_from_json(j.at("base"));
  r.hc_revision = codebook::codebook_from_json(j.at("hc_revision"));
  r.hc_actions = promptkit::actions_from_json(j.at("hc_actions"));
  r.hc_satisfied = j.at("hc_satisfied").get<bool>();
  r.mc_satisfied = j.at("mc_satisfied").get<bool>();
  if (!j.at("mc_verdict").is_null()) r.mc_verdict = promptkit::verdict_from_json(j["mc_verdict"]);
  return r;
}

inline json to_json(const SessionState& s) {
  json codes = json::array();
  for (const auto& c : s.initial_codes) codes.push_back(codebook::to_json(c));
  json failures = json::array();
  for (const auto& f : s.extraction_failures)
    failures.push_back({{"response_id", f.response_id}, {"error", f.error}, {"residue", f.residue}});
  json rounds = json::array();
  for (const auto& r : s.rounds) rounds.push_back(to_json(r));
  json assignments = json::array();
  for (const auto& a : s.assignments) assignments.push_back(codebook::to_json(a));
  json audit = json::array();
  for (const auto& e : s.audit) audit.push_back(to_json(e));
  return {{"schema", std::string(kSchema)},
          {"phase", std::string(to_string(s.phase))},
          {"options", to_json(s.options)},
          {"config", llm::to_json(s.config)},
          {"corpus", corpus::to_json(s.corpus)},
          {"exemplars", promptkit::to_json(s.exemplars)},
          {"initial_codes", std::move(codes)},
          {"extraction_failures", std::move(failures)},
          {"draft", s.draft ? codebook::to_json(*s.draft) : json(nullptr)},
          {"draft_notes", s.draft_notes},
          {"rounds", std::move(rounds)},
          {"final", s.final ? codebook::to_json(*s.final) : json(nullptr)},
          {"forced_convergence", s.forced_convergence},
          {"assignments", std::move(assignments)},
          {"coding_notes", s.coding_notes},
          {"evaluation", s.evaluation ? *s.evaluation : json(nullptr)},
          {"audit", std::move(audit)}};
}

namespace detail {

constexpr int phase_rank(Phase p) { return static_cast<int>(p); }

// Checks the invariants a hand-edited or truncated file would break.
inline void check_consistency(const SessionState& s) {
  auto corrupt = [](const std::string& m) { throw Error(ErrorCode::CorruptSession, m); };
  const bool needs_final = s.phase == Phase::finalized || s.phase == Phase::coding || s.phase == Phase::evaluated;
  if (needs_final != s.final.has_value()) corrupt("final codebook presence does not match phase");
  if (static_cast<int>(s.rounds.size()) > s.options.max_rounds) corrupt("more rounds than max_rounds");
  if (phase_rank(s.phase) >= phase_rank(Phase::refinement) && !s.draft) corrupt("missing draft codebook");
  for (std::size_t i = 0; i < s.rounds.size(); ++i) {
    if (s.rounds[i].index != static_cast<int>(i) + 1) corrupt("round indices out of order");
    if (i + 1 < s.rounds.size() && s.rounds[i].open()) corrupt("an earlier round has no verdict");
  }
  std::uint64_t prev = 0;
  Phase logged = Phase::familiarization;
  for (const auto& e : s.audit) {
    if (e.seq != prev + 1) corrupt("audit sequence numbers are not contiguous");
    prev = e.seq;
    if (e.kind == "phase") {
      const auto from = phase_from_string(e.payload.at("from").get<std::string>());
      const auto to = phase_from_string(e.payload.at("to").get<std::string>());
      if (from != logged || phase_rank(to) < phase_rank(from)) corrupt("audit phase sequence is not monotone");
      logged = to;
    }
  }
  if (logged != s.phase) corrupt("phase '" + std::string(to_string(s.phase)) + "' disagrees with the audit log");
}

}  // namespace detail

inline SessionState session_from_json(const json& j) {
  if (!j.is_object() || j.value("schema", std::string{}) != kSchema)
    throw Error(ErrorCode::SchemaMismatch, "expected schema '" + std::string(kSchema) + "'");
  SessionState s;
  try {
    s.phase = phase_from_string(j.at("phase").get<std::string>());
    s.options = session_options_from_json(j.at("options"));
    s.config = llm::config_from_json(j.at("config"));
    s.corpus = corpus::pool_split_from_json(j.at("corpus"));
    s.exemplars = promptkit::exemplar_set_from_json(j.at("exemplars"));
    for (const auto& c : j.at("initial_codes")) s.initial_codes.push_back(codebook::initial_code_from_json(c));
    for (const auto& f : j.at("extraction_failures"))
      s.extraction_failures.push_back({f.at("response_id").get<std::string>(), f.at("error").get<std::string>(),
                                       f.at("residue").get<std::vector<std::string>>()});
    if (!j.at("draft").is_null()) s.draft = codebook::codebook_from_json(j["draft"]);
    s.draft_notes = j.at("draft_notes").get<std::vector<std::string>>();
    for (const auto& r : j.at("rounds")) s.rounds.push_back(round_from_json(r));
    if (!j.at("final").is_null()) s.final = codebook::codebook_from_json(j["final"]);
    s.forced_convergence = j.at("forced_convergence").get<bool>();
    for (const auto& a : j.at("assignments")) s.assignments.push_back(codebook::assignment_from_json(a));
    s.coding_notes = j.at("coding_notes").get<std::vector<std::string>>();
    if (!j.at("evaluation").is_null()) s.evaluation = j["evaluation"];
    for (const auto& e : j.at("audit")) s.audit.push_back(audit_entry_from_json(e));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptSession, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::SchemaMismatch) throw;
    throw Error(ErrorCode::CorruptSession, e.what());
  }
  detail::check_consistency(s);
  return s;
}

inline std::string dump_session(const SessionState& s) { return to_json(s).dump(2) + "\n"; }

inline void save_session(const SessionState& s, const std::string& path) {
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + tmp + "'");
    out << dump_session(s);
    if (!out) throw Error(ErrorCode::IoError, "write to '" + tmp + "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error(ErrorCode::IoError, "cannot replace '" + path + "'");
}

inline SessionState load_session(const std::string& path) {
  const auto data = corpus::read_file(path);
  auto j = json::parse(data, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::CorruptSession, "'" + path + "' is not valid JSON");
  return session_from_json(j);
}

// ---- replay --------------------------------------------------------------------

/// Re-executes every recorded command against `gateway` (normally a fresh mock
/// with the original script), reusing the recorded timestamps. With the same
/// script the result serializes byte-identically to `recorded`.
inline SessionState replay(const SessionState& recorded, llm::Gateway& gateway) {
  std::vector<std::string> stamps;
  for (const auto& e : recorded.audit) stamps.push_back(e.timestamp);
  Engine engine(gateway, replay_wall_clock(std::move(stamps)));
  std::optional<SessionState> s;
  for (const auto& e : recorded.audit) {
    if (e.kind != "command") continue;
    const auto op = e.payload.at("op").get<std::string>();
    try {
      if (op == "start_session") {
        s = engine.start_session(llm::config_from_json(e.payload.at("config")),
                                 corpus::pool_split_from_json(e.payload.at("corpus")),
                                 promptkit::exemplar_set_from_json(e.payload.at("exemplars")),
                                 session_options_from_json(e.payload.at("options")));
        continue;
      }
      if (!s) throw Error(ErrorCode::CorruptSession, "audit log does not begin with start_session");
      if (op == "run_extraction") {
        engine.run_extraction(*s);
      } else if (op == "run_grouping") {
        engine.run_grouping(*s);
      } else if (op == "submit_hc_revision") {
        auto rev = codebook::codebook_from_json(e.payload.at("revision"));
        engine.submit_hc_revision(*s, rev, promptkit::actions_from_json(e.payload.at("actions")),
                                  e.payload.at("satisfied").get<bool>());
      } else if (op == "request_mc_verdict") {
        engine.request_mc_verdict(*s);
      } else if (op == "finalize") {
        engine.finalize(*s);
      } else if (op == "run_mc_coding") {
        engine.run_mc_coding(*s, corpus::response_set_from_json(e.payload.at("targets")));
      } else if (op == "add_assignment") {
        engine.add_assignment(*s, codebook::assignment_from_json(e.payload.at("assignment")));
      } else if (op == "evaluate") {
        analysis::EvalOptions opts;
        opts.mode = analysis::mode_from_string(e.payload.at("mode").get<std::string>());
        opts.levels.clear();
        for (const auto& l : e.payload.at("levels")) opts.levels.push_back(analysis::level_from_string(l.get<std::string>()));
        std::optional<Codebook> gold;
        if (e.payload.contains("gold")) gold = codebook::codebook_from_json(e.payload["gold"]);
        analysis::MatchOptions m{e.payload.at("tau").get<double>(), e.payload.at("embed_definitions").get<bool>()};
        engine.evaluate(*s, opts, gold, m);
      } else {
        throw Error(ErrorCode::CorruptSession, "unknown recorded command '" + op + "'");
      }
    } catch (const Error& err) {
      // Commands that failed when recorded fail again here; their audit
      // entries are reproduced all the same.
      if (err.code() == ErrorCode::CorruptSession) throw;
    }
  }
  if (!s) throw Error(ErrorCode::CorruptSession, "audit log holds no commands");
  return std::move(*s);
}

}  // namespace ta::workflow
