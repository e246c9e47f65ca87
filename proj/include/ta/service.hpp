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

// JSON/HTTP surface over the workflow engine, versioned under /v1/.
//
// Service::handle() is transport-independent; bind() attaches it to a
// cpp-httplib server. Mutating requests run on a copy of the session and
// commit under the session's write lock, so readers always see the last
// committed snapshot, even while a long model call is in flight.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "ta/analysis.hpp"
#include "ta/error.hpp"
#include "ta/llm.hpp"
#include "ta/workflow.hpp"

namespace ta::service {

using json = nlohmann::ordered_json;

struct ApiError {
  std::string code;
  std::string message;
  bool retriable = false;
  int http_status = 500;
};

/// One ApiError per ErrorCode; the code string is the ErrorCode name.
inline ApiError to_api_error(ErrorCode code, const std::string& message) {
  int status = 500;
  bool retriable = false;
  switch (code) {
    case ErrorCode::ParseError:
    case ErrorCode::MissingColumn:
    case ErrorCode::NoUsableRows:
    case ErrorCode::DuplicateId:
    case ErrorCode::InvalidId:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidConfig:
    case ErrorCode::ExemplarCountOutOfRange:
    case ErrorCode::InvalidExemplar:
    case ErrorCode::QuestionMismatch:
      status = 400;
      break;
    case ErrorCode::NotFound:
      status = 404;
      break;
    case ErrorCode::PhaseError:
    case ErrorCode::MaxRoundsReached:
    case ErrorCode::NoOpenRound:
    case ErrorCode::NotConverged:
    case ErrorCode::InsufficientAssignments:
      status = 409;
      break;
    case ErrorCode::EmptyRationale:
    case ErrorCode::EmptyRevision:
    case ErrorCode::InvalidCodebook:
    case ErrorCode::InvalidAssignment:
    case ErrorCode::UnknownCode:
    case ErrorCode::ItemSetMismatch:
    case ErrorCode::ModeViolation:
    case ErrorCode::MissingPoolTag:
    case ErrorCode::DevSizeOutOfRange:
    case ErrorCode::PoolTooSmall:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::ZeroVector:
    case ErrorCode::EmptyCodeList:
    case ErrorCode::EmptyInput:
    case ErrorCode::ContextBudgetExceeded:
      status = 422;
      break;
    case ErrorCode::RateLimitExceeded:
      status = 429;
      retriable = true;
      break;
    case ErrorCode::BackendError:
    case ErrorCode::MalformedJson:
    case ErrorCode::NoActionsFound:
    case ErrorCode::ExtractionFailed:
      status = 502;
      retriable = true;
      break;
    case ErrorCode::MockScriptExhausted:
    case ErrorCode::MockExpectationFailed:
      status = 502;
      break;
    case ErrorCode::IoError:
    case ErrorCode::SchemaMismatch:
    case ErrorCode::CorruptSession:
      status = 500;
      break;
  }
  return {std::string(to_string(code)), message, retriable, status};
}

inline ApiError to_api_error(const Error& e) { return to_api_error(e.code(), e.detail()); }

inline json to_json(const ApiError& e) {
  return {{"error", {{"code", e.code}, {"message", e.message}, {"retriable", e.retriable}}}};
}

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
  std::string request_id;  // Idempotency-Key / X-Request-Id header
};

struct Response {
  int status = 200;
  json body;
};

struct ServiceConfig {
  llm::LLMConfig llm;
  workflow::SessionOptions session_defaults;
  std::string data_dir;  // empty: in-memory only
};

class Service {
 public:
  Service(llm::Gateway& gateway, ServiceConfig cfg, workflow::WallClock clock = workflow::system_wall_clock())
      : gateway_(gateway), cfg_(std::move(cfg)), engine_(gateway_, std::move(clock)) {
    load_existing();
  }

  ~Service() { wait_idle(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  Response handle(const Request& req) {
    try {
      return route(req);
    } catch (const Error& e) {
      return error_response(to_api_error(e));
    } catch (const json::exception& e) {
      return error_response(to_api_error(ErrorCode::ParseError, e.what()));
    }
  }

  /// Routes /v1/* on an httplib server to handle().
  void bind(httplib::Server& server) {
    auto adapter = [this](const httplib::Request& hreq, httplib::Response& hres) {
      Request req;
      req.method = hreq.method;
      req.path = hreq.path;
      for (const auto& [k, v] : hreq.params) req.query[k] = v;
      req.body = hreq.body;
      if (hreq.has_header("Idempotency-Key")) req.request_id = hreq.get_header_value("Idempotency-Key");
      else if (hreq.has_header("X-Request-Id")) req.request_id = hreq.get_header_value("X-Request-Id");
      const auto res = handle(req);
      hres.status = res.status;
      hres.set_content(res.body.dump(), "application/json");
    };
    server.Get(R"(/v1/.*)", adapter);
    server.Post(R"(/v1/.*)", adapter);
  }

  void wait_idle() {
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(jobs_mu_);
      threads.swap(threads_);
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
  }

  std::optional<workflow::SessionState> snapshot(const std::string& id) const {
    auto slot = find_slot(id);
    if (!slot) return std::nullopt;
    std::shared_lock lock(slot->mu);
    return slot->state;
  }

 private:
  struct Slot {
    mutable std::shared_mutex mu;
    workflow::SessionState state;
    std::map<std::string, Response> replies;  // by request id
    bool busy = false;
  };

  struct Job {
    std::string status = "running";  // running | done | failed
    Response response;
  };

  static Response error_response(const ApiError& e) { return {e.http_status, to_json(e)}; }

  static std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::size_t i = 0;
    while (i < path.size()) {
      while (i < path.size() && path[i] == '/') ++i;
      const auto j = path.find('/', i);
      const auto end = j == std::string::npos ? path.size() : j;
      if (end > i) parts.push_back(path.substr(i, end - i));
      i = end;
    }
    return parts;
  }

  static json body_json(const Request& req) {
    if (text::is_blank(req.body)) return json::object();
    auto j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::ParseError, "request body must be a JSON object");
    return j;
  }

  static std::string request_id(const Request& req, const json& body) {
    if (!req.request_id.empty()) return req.request_id;
    if (body.contains("request_id") && body["request_id"].is_string()) return body["request_id"].get<std::string>();
    return {};
  }

  static bool wants_async(const Request& req, const json& body) {
    if (auto it = req.query.find("async"); it != req.query.end()) return it->second == "1" || it->second == "true";
    return body.value("async", false);
  }

  Response route(const Request& req) {
    const auto parts = split_path(req.path);
    if (parts.empty() || parts[0] != "v1") throw Error(ErrorCode::NotFound, "no route for " + req.path);
    const bool get = req.method == "GET";
    const bool post = req.method == "POST";
    if (parts.size() == 2 && parts[1] == "sessions") {
      if (post) return create_session(req);
      if (get) return list_sessions();
    }
    if (parts.size() == 3 && parts[1] == "jobs" && get) return job_status(parts[2]);
    if (parts.size() >= 3 && parts[1] == "sessions") {
      auto slot = find_slot(parts[2]);
      if (!slot) throw Error(ErrorCode::NotFound, "no session '" + parts[2] + "'");
      const std::string action = parts.size() >= 4 ? parts[3] : "";
      if (parts.size() <= 4 && get) return read(parts[2], *slot, action, req);
      if (parts.size() == 4 && post) return mutate(parts[2], slot, action, req);
    }
    throw Error(ErrorCode::NotFound, "no route for " + req.method + " " + req.path);
  }

  // ---- reads ---------------------------------------------------------------

  static json status_json(const workflow::SessionState& s, bool busy) {
    const auto conv = workflow::check_convergence(s);
    return {{"phase", std::string(workflow::to_string(s.phase))},
            {"rounds", s.rounds.size()},
            {"max_rounds", s.options.max_rounds},
            {"open_round", !s.rounds.empty() && s.rounds.back().open()},
            {"converged", conv.converged},
            {"forced", conv.forced},
            {"busy", busy},
            {"assignments", s.assignments.size()},
            {"audit_entries", s.audit.size()}};
  }

  Response read(const std::string& id, Slot& slot, const std::string& action, const Request& req) {
    std::shared_lock lock(slot.mu);
    const auto& s = slot.state;
    if (action.empty()) return {200, {{"session_id", id}, {"status", status_json(s, slot.busy)}, {"session", workflow::to_json(s)}}};
    if (action == "status") return {200, status_json(s, slot.busy)};
    if (action == "audit") {
      const auto offset = query_size(req, "offset", 0);
      const auto limit = query_size(req, "limit", 100);
      json entries = json::array();
      for (std::size_t i = offset; i < s.audit.size() && i < offset + limit; ++i)
        entries.push_back(workflow::to_json(s.audit[i]));
      return {200, {{"total", s.audit.size()}, {"offset", offset}, {"entries", std::move(entries)}}};
    }
    if (action == "metrics" || action == "triage") {
      if (s.phase != workflow::Phase::coding && s.phase != workflow::Phase::evaluated)
        throw Error(ErrorCode::PhaseError, "metrics are available after finalization and coding");
      if (s.assignments.size() < 2)
        throw Error(ErrorCode::InsufficientAssignments, "need at least two coders' assignments");
      if (action == "metrics") {
        analysis::EvalOptions opts;
        opts.mode = analysis::mode_from_string(query_or(req, "mode", "multi"));
        opts.levels = {analysis::level_from_string(query_or(req, "by", "code"))};
        return {200, analysis::evaluation_report(s.assignments, *s.final, s.pool_tags(), opts)};
      }
      const auto* a = s.assignment_of(query_or(req, "a", "HC"));
      const auto* b = s.assignment_of(query_or(req, "b", "MC"));
      if (!a || !b) throw Error(ErrorCode::NotFound, "no assignment for the requested coders");
      return {200, analysis::to_json(analysis::triage_mismatches(*a, *b, *s.final))};
    }
    throw Error(ErrorCode::NotFound, "no route for GET " + req.path);
  }

  static std::string query_or(const Request& req, const std::string& key, const std::string& fallback) {
    auto it = req.query.find(key);
    return it == req.query.end() ? fallback : it->second;
  }

  static std::size_t query_size(const Request& req, const std::string& key, std::size_t fallback) {
    auto it = req.query.find(key);
    if (it == req.query.end()) return fallback;
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "query parameter '" + key + "' must be a non-negative integer");
    }
  }

  Response list_sessions() const {
    std::shared_lock lock(sessions_mu_);
    json ids = json::array();
    for (const auto& [id, _] : sessions_) ids.push_back(id);
    return {200, {{"sessions", std::move(ids)}}};
  }

  Response job_status(const std::string& job_id) {
    std::lock_guard lock(jobs_mu_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw Error(ErrorCode::NotFound, "no job '" + job_id + "'");
    json body = {{"job_id", job_id}, {"status", it->second.status}};
    if (it->second.status != "running") {
      body["http_status"] = it->second.response.status;
      body["result"] = it->second.response.body;
    }
    return {200, body};
  }

  // ---- writes --------------------------------------------------------------

  Response create_session(const Request& req) {
    const auto body = body_json(req);
    const auto rid = request_id(req, body);
    std::lock_guard create_lock(create_mu_);
    if (!rid.empty())
      if (auto it = created_.find(rid); it != created_.end()) return it->second;
    auto cfg = body.contains("config") ? llm::config_from_json(body["config"]) : cfg_.llm;
    auto options = cfg_.session_defaults;
    if (body.contains("options")) options = workflow::session_options_from_json(body["options"]);
    if (body.contains("max_rounds")) options.max_rounds = body["max_rounds"].get<int>();
    auto state = engine_.start_session(cfg, corpus::pool_split_from_json(body.at("split")),
                                       promptkit::exemplar_set_from_json(body.at("exemplars")), options);
    std::string id;
    {
      std::unique_lock lock(sessions_mu_);
      char buf[32];
      do {
        std::snprintf(buf, sizeof buf, "s%04zu", ++next_id_);
      } while (sessions_.count(buf));
      id = buf;
      auto slot = std::make_shared<Slot>();
      slot->state = std::move(state);
      persist(id, slot->state);
      Response res{201, {{"session_id", id}, {"status", status_json(slot->state, false)}}};
      sessions_.emplace(id, std::move(slot));
      if (!rid.empty()) created_.emplace(rid, res);
      return res;
    }
  }

  using Operation = std::function<json(workflow::SessionState&)>;

  Operation operation_for(const std::string& action, const json& body) {
    if (action == "extraction")
      return [this](workflow::SessionState& s) {
        auto r = engine_.run_extraction(s);
        json failures = json::array();
        for (const auto& f : r.failures) failures.push_back({{"response_id", f.response_id}, {"error", f.error}});
        return json{{"responses", r.responses}, {"codes", r.codes}, {"failures", failures}, {"residue", r.residue}};
      };
    if (action == "grouping")
      return [this](workflow::SessionState& s) {
        const auto& draft = engine_.run_grouping(s);
        return json{{"draft", codebook::to_json(draft)}, {"notes", s.draft_notes}};
      };
    if (action == "revisions") {
      auto revision = codebook::codebook_from_json(body.at("revision"));
      auto actions = promptkit::actions_from_json(body.value("actions", json::array()));
      const bool satisfied = body.value("satisfied", false);
      return [this, revision, actions, satisfied](workflow::SessionState& s) {
        const auto& round = engine_.submit_hc_revision(s, revision, actions, satisfied);
        return workflow::to_json(round);
      };
    }
    if (action == "verdict")
      return [this](workflow::SessionState& s) {
        const auto& v = engine_.request_mc_verdict(s);
        const auto conv = workflow::check_convergence(s);
        return json{{"verdict", promptkit::to_json(v)},
                    {"mc_satisfied", s.rounds.back().mc_satisfied},
                    {"converged", conv.converged},
                    {"forced", conv.forced}};
      };
    if (action == "finalize")
      return [this](workflow::SessionState& s) {
        const auto& cb = engine_.finalize(s);
        return json{{"final", codebook::to_json(cb)}, {"forced", s.forced_convergence}};
      };
    if (action == "coding") {
      const auto& t = body.at("targets");
      auto targets = t.contains("items") ? corpus::eval_sample_from_json(t).as_response_set()
                                         : corpus::response_set_from_json(t);
      return [this, targets](workflow::SessionState& s) {
        auto r = engine_.run_mc_coding(s, targets);
        return json{{"assignment", codebook::to_json(r.assignment)}, {"notes", r.notes}};
      };
    }
    if (action == "assignments") {
      auto a = codebook::assignment_from_json(body);
      return [this, a](workflow::SessionState& s) {
        engine_.add_assignment(s, a);
        return codebook::to_json(*s.assignment_of(a.coder));
      };
    }
    if (action == "evaluation") {
      analysis::EvalOptions opts;
      opts.mode = analysis::mode_from_string(body.value("mode", std::string{"multi"}));
      if (body.contains("levels")) {
        opts.levels.clear();
        for (const auto& l : body["levels"]) opts.levels.push_back(analysis::level_from_string(l.get<std::string>()));
      }
      std::optional<codebook::Codebook> gold;
      if (body.contains("gold")) gold = codebook::codebook_from_json(body["gold"]);
      analysis::MatchOptions m;
      m.tau = body.value("tau", m.tau);
      return [this, opts, gold, m](workflow::SessionState& s) { return engine_.evaluate(s, opts, gold, m); };
    }
    throw Error(ErrorCode::NotFound, "no route for POST /v1/sessions/<id>/" + action);
  }

  Response mutate(const std::string& id, const std::shared_ptr<Slot>& slot, const std::string& action,
                  const Request& req) {
    const auto body = body_json(req);
    const auto rid = request_id(req, body);
    auto op = operation_for(action, body);
    workflow::SessionState working;
    {
      std::unique_lock lock(slot->mu);
      if (!rid.empty())
        if (auto it = slot->replies.find(rid); it != slot->replies.end()) return it->second;
      if (slot->busy) return error_response({"SessionBusy", "another operation is running on this session", true, 409});
      slot->busy = true;
      working = slot->state;
    }
    if (wants_async(req, body)) {
      std::string job_id;
      {
        std::lock_guard lock(jobs_mu_);
        job_id = "j" + std::to_string(++next_job_);
        jobs_[job_id] = Job{};
        threads_.emplace_back([this, id, slot, op, rid, job_id, working = std::move(working)]() mutable {
          auto res = run_and_commit(id, *slot, op, rid, std::move(working));
          std::lock_guard lock(jobs_mu_);
          jobs_[job_id] = Job{res.status < 400 ? "done" : "failed", res};
        });
      }
      return {202, {{"job_id", job_id}, {"status", "running"}}};
    }
    return run_and_commit(id, *slot, op, rid, std::move(working));
  }

  // Runs `op` on the private copy and commits it whether or not it threw:
  // a failed command keeps its audit trail exactly as replay reproduces it.
  Response run_and_commit(const std::string& id, Slot& slot, const Operation& op, const std::string& rid,
                          workflow::SessionState working) {
    Response res;
    try {
      res = {200, op(working)};
    } catch (const Error& e) {
      res = error_response(to_api_error(e));
    } catch (const json::exception& e) {
      res = error_response(to_api_error(ErrorCode::ParseError, e.what()));
    }
    std::unique_lock lock(slot.mu);
    slot.state = std::move(working);
    slot.busy = false;
    try {
      persist(id, slot.state);
    } catch (const Error& e) {
      res = error_response(to_api_error(e));
    }
    if (!rid.empty() && res.status < 500) slot.replies[rid] = res;
    return res;
  }

  std::shared_ptr<Slot> find_slot(const std::string& id) const {
    std::shared_lock lock(sessions_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  void persist(const std::string& id, const workflow::SessionState& s) const {
    if (cfg_.data_dir.empty()) return;
    workflow::save_session(s, (std::filesystem::path(cfg_.data_dir) / (id + ".json")).string());
  }

  void load_existing() {
    if (cfg_.data_dir.empty()) return;
    std::filesystem::create_directories(cfg_.data_dir);
    for (const auto& entry : std::filesystem::directory_iterator(cfg_.data_dir)) {
      if (entry.path().extension() != ".json") continue;
      auto slot = std::make_shared<Slot>();
      slot->state = workflow::load_session(entry.path().string());
      sessions_.emplace(entry.path().stem().string(), std::move(slot));
    }
  }

  llm::Gateway& gateway_;
  ServiceConfig cfg_;
  workflow::Engine engine_;

  mutable std::shared_mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::size_t next_id_ = 0;

  std::mutex create_mu_;
  std::map<std::string, Response> created_;

  std::mutex jobs_mu_;
  std::map<std::string, Job> jobs_;
  std::vector<std::thread> threads_;
  std::size_t next_job_ = 0;
};

}  // namespace ta::service
