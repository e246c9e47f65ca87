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

// Chat-completion and embedding access behind one gateway: context budget
// check, shared sliding-window rate limiter, retry with exponential backoff,
// and an audit hook that sees every outbound attempt before its reply.

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <future>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "ta/corpus.hpp"
#include "ta/error.hpp"
#include "ta/random.hpp"
#include "ta/text.hpp"

namespace ta::llm {

using json = nlohmann::ordered_json;

struct LLMConfig {
  std::string model_name = "gpt-3.5-turbo-16k";
  std::string embedding_model = "text-embedding-ada-002";
  double temperature = 0.0;
  int max_output_tokens = 1024;
  // Kept below the 16,384-token window of the default model; the estimate is
  // heuristic, so leave headroom.
  int context_budget_tokens = 12000;
  int requests_per_minute = 3500;
  int tokens_per_minute = 180000;
  int max_retries = 3;
  int initial_backoff_ms = 500;
  double backoff_multiplier = 2.0;
  int max_backoff_ms = 8000;
  double max_rate_wait_seconds = 60.0;
  int embed_batch_size = 64;
  int embed_fanout = 1;
  std::string base_url = "https://api.openai.com";
  std::string api_key_env = "OPENAI_API_KEY";

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) bad("temperature must be >= 0");
    if (context_budget_tokens <= 0) bad("context_budget_tokens must be positive");
    if (max_output_tokens <= 0) bad("max_output_tokens must be positive");
    if (requests_per_minute <= 0 || tokens_per_minute <= 0) bad("rate budgets must be positive");
    if (max_retries < 0 || initial_backoff_ms < 0 || max_backoff_ms < 0) bad("retry settings must be >= 0");
    if (backoff_multiplier < 1.0) bad("backoff_multiplier must be >= 1");
    if (embed_batch_size <= 0 || embed_fanout <= 0) bad("embedding batch settings must be positive");
  }

  friend bool operator==(const LLMConfig&, const LLMConfig&) = default;
};

inline json to_json(const LLMConfig& c) {
  return {{"model_name", c.model_name},
          {"embedding_model", c.embedding_model},
          {"temperature", c.temperature},
          {"max_output_tokens", c.max_output_tokens},
          {"context_budget_tokens", c.context_budget_tokens},
          {"requests_per_minute", c.requests_per_minute},
          {"tokens_per_minute", c.tokens_per_minute},
          {"max_retries", c.max_retries},
          {"initial_backoff_ms", c.initial_backoff_ms},
          {"backoff_multiplier", c.backoff_multiplier},
          {"max_backoff_ms", c.max_backoff_ms},
          {"max_rate_wait_seconds", c.max_rate_wait_seconds},
          {"embed_batch_size", c.embed_batch_size},
          {"embed_fanout", c.embed_fanout},
          {"base_url", c.base_url},
          {"api_key_env", c.api_key_env}};
}

/// Missing keys keep their defaults. API keys are never read from here.
inline LLMConfig config_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
  if (j.contains("api_key")) throw Error(ErrorCode::InvalidConfig, "API keys belong in the environment, not the config file");
  LLMConfig c;
  try {
    c.model_name = j.value("model_name", c.model_name);
    c.embedding_model = j.value("embedding_model", c.embedding_model);
    c.temperature = j.value("temperature", c.temperature);
    c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
    c.context_budget_tokens = j.value("context_budget_tokens", c.context_budget_tokens);
    c.requests_per_minute = j.value("requests_per_minute", c.requests_per_minute);
    c.tokens_per_minute = j.value("tokens_per_minute", c.tokens_per_minute);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.initial_backoff_ms = j.value("initial_backoff_ms", c.initial_backoff_ms);
    c.backoff_multiplier = j.value("backoff_multiplier", c.backoff_multiplier);
    c.max_backoff_ms = j.value("max_backoff_ms", c.max_backoff_ms);
    c.max_rate_wait_seconds = j.value("max_rate_wait_seconds", c.max_rate_wait_seconds);
    c.embed_batch_size = j.value("embed_batch_size", c.embed_batch_size);
    c.embed_fanout = j.value("embed_fanout", c.embed_fanout);
    c.base_url = j.value("base_url", c.base_url);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  c.validate();
  return c;
}

/// ceil(bytes / 4). Not tokenizer-exact; used only for budgeting.
inline std::size_t estimate_tokens(std::string_view text) { return (text.size() + 3) / 4; }

struct Vector {
  std::vector<double> components;

  std::size_t dim() const { return components.size(); }
  friend bool operator==(const Vector&, const Vector&) = default;
};

inline void check_vector(const Vector& v) {
  if (v.dim() == 0) throw Error(ErrorCode::BackendError, "embedding has zero dimensions");
  for (double x : v.components)
    if (!std::isfinite(x)) throw Error(ErrorCode::BackendError, "embedding has a non-finite component");
}

/// Backend failure; `retriable` marks transient faults (timeouts, 429, 5xx).
class BackendFailure : public Error {
 public:
  BackendFailure(const std::string& message, bool retriable)
      : Error(ErrorCode::BackendError, message), retriable_(retriable) {}
  bool retriable() const noexcept { return retriable_; }

 private:
  bool retriable_;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string complete(const std::string& prompt, const LLMConfig& cfg) = 0;
  virtual std::vector<Vector> embed(const std::vector<std::string>& texts, const LLMConfig& cfg) = 0;
  virtual std::string name() const = 0;
};

// ---- scripted mock ---------------------------------------------------------

struct MockEntry {
  std::optional<std::string> expect_substring;
  std::string reply;
  // "transient" or "fatal" makes this call fail instead of replying.
  std::optional<std::string> fail;
};

inline std::vector<MockEntry> mock_script_from_json(const json& j) {
  const json& list = j.is_object() && j.contains("entries") ? j["entries"] : j;
  if (!list.is_array()) throw Error(ErrorCode::ParseError, "mock script must be a JSON list");
  std::vector<MockEntry> out;
  for (const auto& e : list) {
    MockEntry m;
    if (e.contains("expect_substring") && !e["expect_substring"].is_null())
      m.expect_substring = e["expect_substring"].get<std::string>();
    m.reply = e.value("reply", std::string{});
    if (e.contains("fail")) m.fail = e["fail"].get<std::string>();
    out.push_back(std::move(m));
  }
  return out;
}

inline json to_json(const std::vector<MockEntry>& script) {
  json arr = json::array();
  for (const auto& m : script) {
    json e = json::object();
    if (m.expect_substring) e["expect_substring"] = *m.expect_substring;
    e["reply"] = m.reply;
    if (m.fail) e["fail"] = *m.fail;
    arr.push_back(std::move(e));
  }
  return arr;
}

/// Mock embedding: 64 components drawn uniformly from [-1, 1) by SplitMix64
/// seeded with the FNV-1a 64 hash of the UTF-8 text.
inline Vector hash_embedding(std::string_view text, std::size_t dim = 64) {
  SplitMix64 rng(text::fnv1a64(text));
  Vector v;
  v.components.resize(dim);
  for (auto& x : v.components) x = rng.uniform() * 2.0 - 1.0;
  return v;
}

/// Reply n is script entry n, whatever the prompt; `cursor` lets a resumed
/// session continue where the previous process stopped.
class MockBackend final : public Backend {
 public:
  explicit MockBackend(std::vector<MockEntry> script, std::size_t cursor = 0)
      : script_(std::move(script)), cursor_(cursor) {}

  static MockBackend from_file(const std::string& path, std::size_t cursor = 0) {
    return MockBackend(mock_script_from_json(json::parse(corpus::read_file(path))), cursor);
  }

  std::string complete(const std::string& prompt, const LLMConfig&) override {
    std::lock_guard lock(mu_);
    if (cursor_ >= script_.size())
      throw Error(ErrorCode::MockScriptExhausted,
                  "mock script has " + std::to_string(script_.size()) + " entries; call " +
                      std::to_string(cursor_ + 1) + " has none");
    const auto& entry = script_[cursor_++];
    if (entry.expect_substring && !text::contains(prompt, *entry.expect_substring))
      throw Error(ErrorCode::MockExpectationFailed,
                  "call " + std::to_string(cursor_) + ": prompt lacks '" + *entry.expect_substring + "'");
    if (entry.fail) throw BackendFailure("scripted " + *entry.fail + " failure", *entry.fail == "transient");
    return entry.reply;
  }

  std::vector<Vector> embed(const std::vector<std::string>& texts, const LLMConfig&) override {
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(hash_embedding(t, dim_));
    return out;
  }

  std::string name() const override { return "mock"; }

  std::size_t cursor() const {
    std::lock_guard lock(mu_);
    return cursor_;
  }
  void set_cursor(std::size_t c) {
    std::lock_guard lock(mu_);
    cursor_ = c;
  }
  void set_embedding_dim(std::size_t d) { dim_ = d; }

 private:
  std::vector<MockEntry> script_;
  std::size_t cursor_;
  std::size_t dim_ = 64;
  mutable std::mutex mu_;
};

// ---- rate limiting ---------------------------------------------------------

using SteadyClock = std::function<std::chrono::steady_clock::time_point()>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Requests and estimated tokens over any trailing 60 s window stay within
/// the configured budgets.
class RateLimiter {
 public:
  using time_point = std::chrono::steady_clock::time_point;

  // Returns 0 and records the request when it fits; otherwise the number of
  // seconds until it would fit.
  double try_acquire(std::size_t tokens, int rpm, int tpm, time_point now) {
    std::lock_guard lock(mu_);
    if (tokens > static_cast<std::size_t>(tpm))
      throw Error(ErrorCode::RateLimitExceeded, "request of " + std::to_string(tokens) +
                                                    " tokens exceeds tokens_per_minute");
    const auto window = std::chrono::seconds(60);
    while (!events_.empty() && now - events_.front().at >= window) {
      used_tokens_ -= events_.front().tokens;
      events_.pop_front();
    }
    if (events_.size() < static_cast<std::size_t>(rpm) && used_tokens_ + tokens <= static_cast<std::size_t>(tpm)) {
      events_.push_back({now, tokens});
      used_tokens_ += tokens;
      return 0.0;
    }
    // Earliest moment enough old events have aged out.
    std::size_t freed_tokens = 0;
    std::size_t freed_requests = 0;
    for (const auto& e : events_) {
      freed_tokens += e.tokens;
      ++freed_requests;
      const bool req_ok = events_.size() - freed_requests < static_cast<std::size_t>(rpm);
      const bool tok_ok = used_tokens_ - freed_tokens + tokens <= static_cast<std::size_t>(tpm);
      if (req_ok && tok_ok) {
        const auto wait = (e.at + window) - now;
        return std::max(1e-3, std::chrono::duration<double>(wait).count());
      }
    }
    return 60.0;
  }

  std::size_t in_window() const {
    std::lock_guard lock(mu_);
    return events_.size();
  }

 private:
  struct Event {
    time_point at;
    std::size_t tokens;
  };
  std::deque<Event> events_;
  std::size_t used_tokens_ = 0;
  mutable std::mutex mu_;
};

// ---- gateway ---------------------------------------------------------------

/// Receives (kind, payload) for each llm_request / llm_reply / llm_error and
/// embed_request / embed_reply event.
using AuditSink = std::function<void(std::string_view kind, const json& payload)>;

struct GatewayClock {
  SteadyClock now = [] { return std::chrono::steady_clock::now(); };
  Sleeper sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
};

class Gateway {
 public:
  explicit Gateway(Backend& backend, GatewayClock clock = {}) : backend_(backend), clock_(std::move(clock)) {}

  Backend& backend() { return backend_; }
  RateLimiter& limiter() { return limiter_; }

  std::string complete(const std::string& prompt, const LLMConfig& cfg, const AuditSink& audit = {}) {
    cfg.validate();
    const auto tokens = estimate_tokens(prompt);
    if (tokens > static_cast<std::size_t>(cfg.context_budget_tokens))
      throw Error(ErrorCode::ContextBudgetExceeded,
                  "prompt estimate " + std::to_string(tokens) + " tokens exceeds budget " +
                      std::to_string(cfg.context_budget_tokens));
    auto backoff = std::chrono::milliseconds(cfg.initial_backoff_ms);
    const int attempts = cfg.max_retries + 1;
    for (int attempt = 1;; ++attempt) {
      acquire(tokens, cfg);
      if (audit)
        audit("llm_request", {{"attempt", attempt},
                              {"backend", backend_.name()},
                              {"config", to_json(cfg)},
                              {"prompt", prompt}});
      try {
        auto reply = backend_.complete(prompt, cfg);
        if (audit) audit("llm_reply", {{"attempt", attempt}, {"reply", reply}});
        return reply;
      } catch (const BackendFailure& e) {
        if (audit)
          audit("llm_error", {{"attempt", attempt}, {"error", e.detail()}, {"retriable", e.retriable()}});
        if (!e.retriable()) throw;
        if (attempt >= attempts)
          throw BackendFailure("giving up after " + std::to_string(attempts) + " attempts: " + e.detail(), true);
        clock_.sleep(backoff);
        backoff = std::min(std::chrono::milliseconds(cfg.max_backoff_ms),
                           std::chrono::milliseconds(static_cast<long long>(backoff.count() * cfg.backoff_multiplier)));
      } catch (const Error& e) {
        if (audit) audit("llm_error", {{"attempt", attempt}, {"error", e.what()}, {"retriable", false}});
        throw;
      }
    }
  }

  std::vector<Vector> embed(const std::vector<std::string>& texts, const LLMConfig& cfg,
                            const AuditSink& audit = {}) {
    cfg.validate();
    if (texts.empty()) throw Error(ErrorCode::EmptyInput, "nothing to embed");
    for (const auto& t : texts)
      if (t.empty()) throw Error(ErrorCode::EmptyInput, "cannot embed an empty text");
    if (audit) audit("embed_request", {{"backend", backend_.name()}, {"model", cfg.embedding_model}, {"count", texts.size()}});

    const auto batch = static_cast<std::size_t>(cfg.embed_batch_size);
    std::vector<std::vector<std::string>> batches;
    for (std::size_t i = 0; i < texts.size(); i += batch)
      batches.emplace_back(texts.begin() + static_cast<std::ptrdiff_t>(i),
                           texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), i + batch)));
    auto run = [&](const std::vector<std::string>& b) {
      std::size_t tokens = 0;
      for (const auto& t : b) tokens += estimate_tokens(t);
      acquire(tokens, cfg);
      auto vs = backend_.embed(b, cfg);
      if (vs.size() != b.size()) throw Error(ErrorCode::BackendError, "backend returned the wrong number of embeddings");
      return vs;
    };
    std::vector<std::vector<Vector>> results(batches.size());
    const auto fanout = static_cast<std::size_t>(cfg.embed_fanout);
    for (std::size_t start = 0; start < batches.size(); start += fanout) {
      const auto stop = std::min(batches.size(), start + fanout);
      if (stop - start == 1) {
        results[start] = run(batches[start]);
        continue;
      }
      std::vector<std::future<std::vector<Vector>>> futures;
      for (std::size_t b = start; b < stop; ++b)
        futures.push_back(std::async(std::launch::async, run, std::cref(batches[b])));
      for (std::size_t b = start; b < stop; ++b) results[b] = futures[b - start].get();
    }
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (auto& r : results)
      for (auto& v : r) out.push_back(std::move(v));
    for (const auto& v : out) {
      check_vector(v);
      if (v.dim() != out.front().dim()) throw Error(ErrorCode::BackendError, "embeddings differ in dimension");
    }
    if (audit) audit("embed_reply", {{"count", out.size()}, {"dim", out.front().dim()}});
    return out;
  }

 private:
  void acquire(std::size_t tokens, const LLMConfig& cfg) {
    double waited = 0.0;
    for (;;) {
      const double wait = limiter_.try_acquire(tokens, cfg.requests_per_minute, cfg.tokens_per_minute, clock_.now());
      if (wait <= 0.0) return;
      if (waited + wait > cfg.max_rate_wait_seconds)
        throw RateLimitError(wait, "rate budget exhausted; retry in " + std::to_string(wait) + " s");
      clock_.sleep(std::chrono::milliseconds(static_cast<long long>(std::ceil(wait * 1000.0))));
      waited += wait;
    }
  }

  Backend& backend_;
  GatewayClock clock_;
  RateLimiter limiter_;
};

}  // namespace ta::llm
