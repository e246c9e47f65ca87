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

#include <atomic>
#include <cstdlib>
#include <thread>

#include "generators.hpp"
#include "ta/analysis.hpp"
#include "ta/http_backend.hpp"
#include "ta/llm.hpp"

using namespace ta;
using namespace ta::llm;
using namespace std::chrono_literals;

namespace {

// Virtual time: sleeping advances the clock instantly.
struct FakeTime {
  std::chrono::steady_clock::time_point t{};
  std::vector<std::chrono::milliseconds> sleeps;

  GatewayClock clock() {
    return {[this] { return t; },
            [this](std::chrono::milliseconds d) {
              sleeps.push_back(d);
              t += d;
            }};
  }
};

struct Recorder {
  std::vector<std::pair<std::string, json>> events;
  AuditSink sink() {
    return [this](std::string_view kind, const json& p) { events.emplace_back(std::string(kind), p); };
  }
  std::vector<std::string> kinds() const {
    std::vector<std::string> k;
    for (const auto& e : events) k.push_back(e.first);
    return k;
  }
};

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  LLMConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.model_name, "gpt-3.5-turbo-16k");
  EXPECT_EQ(c.temperature, 0.0);
  EXPECT_LT(c.context_budget_tokens, 16384);
  c.temperature = 0.7;
  c.embed_fanout = 4;
  EXPECT_EQ(config_from_json(to_json(c)), c);
  EXPECT_EQ(config_from_json(json::object()), LLMConfig{});
}

TEST(Config, Rejections) {
  EXPECT_EQ(code_of([] { config_from_json(json::parse(R"({"api_key": "sk-123"})")); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { config_from_json(json::parse(R"({"temperature": -1})")); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { config_from_json(json::parse(R"({"temperature": "hot"})")); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { config_from_json(json::parse(R"({"backoff_multiplier": 0.5})")); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { config_from_json(json::parse("[]")); }), ErrorCode::InvalidConfig);
  EXPECT_FALSE(to_json(LLMConfig{}).contains("api_key"));
}

TEST(Tokens, Heuristic) {
  EXPECT_EQ(estimate_tokens(""), 0u);
  EXPECT_EQ(estimate_tokens("a"), 1u);
  EXPECT_EQ(estimate_tokens(std::string(400, 'x')), 100u);
  EXPECT_EQ(estimate_tokens(std::string(401, 'x')), 101u);
  std::string s;
  std::size_t prev = 0;
  for (int i = 0; i < 500; ++i) {
    s += static_cast<char>('a' + i % 26);
    EXPECT_GE(estimate_tokens(s), prev);
    prev = estimate_tokens(s);
  }
}

TEST(Mock, RepliesVerbatimInOrder) {
  MockBackend mock({{std::nullopt, "first", std::nullopt}, {"needle", "second", std::nullopt}});
  Gateway gw(mock);
  EXPECT_EQ(gw.complete("anything", {}), "first");
  EXPECT_EQ(gw.complete("hay needle hay", {}), "second");
  EXPECT_EQ(mock.cursor(), 2u);
  EXPECT_EQ(code_of([&] { gw.complete("more", {}); }), ErrorCode::MockScriptExhausted);
}

TEST(Mock, ExpectationAndCursor) {
  const std::vector<MockEntry> script = {{"alpha", "A", std::nullopt}, {"beta", "B", std::nullopt}};
  MockBackend mock(script);
  Gateway gw(mock);
  EXPECT_EQ(code_of([&] { gw.complete("gamma", {}); }), ErrorCode::MockExpectationFailed);

  MockBackend resumed(script, 1);
  Gateway gw2(resumed);
  EXPECT_EQ(gw2.complete("beta", {}), "B");
}

TEST(Mock, IdenticalCallsGiveIdenticalReplies) {
  const std::vector<MockEntry> script = {{std::nullopt, "same", std::nullopt}};
  MockBackend a(script), b(script);
  LLMConfig cfg;
  EXPECT_EQ(Gateway(a).complete("p", cfg), Gateway(b).complete("p", cfg));
}

TEST(Mock, ScriptJson) {
  const auto script = mock_script_from_json(json::parse(
      R"({"entries": [{"expect_substring": "x", "reply": "r"}, {"reply": "", "fail": "transient"}, {"reply": "z"}]})"));
  ASSERT_EQ(script.size(), 3u);
  EXPECT_EQ(script[0].expect_substring, "x");
  EXPECT_EQ(script[1].fail, "transient");
  EXPECT_FALSE(script[2].expect_substring);
  const auto again = mock_script_from_json(to_json(script));
  ASSERT_EQ(again.size(), 3u);
  EXPECT_EQ(again[1].fail, "transient");
  EXPECT_EQ(again[2].reply, "z");
  EXPECT_EQ(code_of([] { mock_script_from_json(json::parse(R"({"x": 1})")); }), ErrorCode::ParseError);
}

TEST(Gateway, BudgetCheckedBeforeBackend) {
  MockBackend mock({{std::nullopt, "never", std::nullopt}});
  Gateway gw(mock);
  LLMConfig cfg;
  cfg.context_budget_tokens = 10;
  Recorder rec;
  EXPECT_EQ(code_of([&] { gw.complete(std::string(41, 'x'), cfg, rec.sink()); }), ErrorCode::ContextBudgetExceeded);
  EXPECT_EQ(mock.cursor(), 0u);
  EXPECT_TRUE(rec.events.empty());
  EXPECT_EQ(gw.complete(std::string(40, 'x'), cfg), "never");
}

TEST(Gateway, RetriesTransientWithBackoff) {
  MockBackend mock({{std::nullopt, "", "transient"}, {std::nullopt, "", "transient"}, {std::nullopt, "ok", std::nullopt}});
  FakeTime ft;
  Gateway gw(mock, ft.clock());
  Recorder rec;
  EXPECT_EQ(gw.complete("p", {}, rec.sink()), "ok");
  EXPECT_EQ(ft.sleeps, (std::vector<std::chrono::milliseconds>{500ms, 1000ms}));
  EXPECT_EQ(rec.kinds(), (std::vector<std::string>{"llm_request", "llm_error", "llm_request", "llm_error",
                                                   "llm_request", "llm_reply"}));
  EXPECT_EQ(rec.events[4].second["attempt"], 3);
  EXPECT_EQ(rec.events[0].second["prompt"], "p");
  EXPECT_EQ(rec.events[0].second["config"]["model_name"], "gpt-3.5-turbo-16k");
}

TEST(Gateway, BackoffIsCapped) {
  std::vector<MockEntry> script(6, {std::nullopt, "", "transient"});
  MockBackend mock(script);
  FakeTime ft;
  Gateway gw(mock, ft.clock());
  LLMConfig cfg;
  cfg.max_retries = 5;
  cfg.initial_backoff_ms = 3000;
  cfg.max_backoff_ms = 8000;
  try {
    gw.complete("p", cfg);
    FAIL();
  } catch (const BackendFailure& e) {
    EXPECT_EQ(e.code(), ErrorCode::BackendError);
    EXPECT_TRUE(e.retriable());
  }
  EXPECT_EQ(ft.sleeps, (std::vector<std::chrono::milliseconds>{3000ms, 6000ms, 8000ms, 8000ms, 8000ms}));
  EXPECT_EQ(mock.cursor(), 6u);
}

TEST(Gateway, FatalFailureIsNotRetried) {
  MockBackend mock({{std::nullopt, "", "fatal"}, {std::nullopt, "unused", std::nullopt}});
  FakeTime ft;
  Gateway gw(mock, ft.clock());
  EXPECT_EQ(code_of([&] { gw.complete("p", {}); }), ErrorCode::BackendError);
  EXPECT_TRUE(ft.sleeps.empty());
  EXPECT_EQ(mock.cursor(), 1u);
}

TEST(Gateway, MockErrorsAreAuditedOnce) {
  MockBackend mock({});
  Gateway gw(mock);
  Recorder rec;
  EXPECT_EQ(code_of([&] { gw.complete("p", {}, rec.sink()); }), ErrorCode::MockScriptExhausted);
  EXPECT_EQ(rec.kinds(), (std::vector<std::string>{"llm_request", "llm_error"}));
}

TEST(RateLimiter, SlidingWindowProperty) {
  testkit::Gen g(9);
  for (int iter = 0; iter < 20; ++iter) {
    const int rpm = g.between(1, 20);
    const int tpm = g.between(50, 400);
    RateLimiter lim;
    std::chrono::steady_clock::time_point t{};
    std::vector<std::pair<std::chrono::steady_clock::time_point, std::size_t>> issued;
    for (int call = 0; call < 200; ++call) {
      t += std::chrono::milliseconds(g.between(0, 4000));
      const auto tokens = static_cast<std::size_t>(g.between(1, 50));
      for (;;) {
        const double wait = lim.try_acquire(tokens, rpm, tpm, t);
        if (wait <= 0.0) break;
        t += std::chrono::milliseconds(static_cast<long long>(std::ceil(wait * 1000.0)));
      }
      issued.emplace_back(t, tokens);
    }
    for (std::size_t i = 0; i < issued.size(); ++i) {
      std::size_t n = 0, tok = 0;
      for (std::size_t j = i; j < issued.size() && issued[j].first - issued[i].first < 60s; ++j) {
        ++n;
        tok += issued[j].second;
      }
      ASSERT_LE(n, static_cast<std::size_t>(rpm));
      ASSERT_LE(tok, static_cast<std::size_t>(tpm));
    }
  }
}

TEST(RateLimiter, OversizedRequestFailsImmediately) {
  RateLimiter lim;
  EXPECT_EQ(code_of([&] { lim.try_acquire(101, 10, 100, {}); }), ErrorCode::RateLimitExceeded);
}

TEST(Gateway, WaitsForBudgetThenSurfacesWaitTime) {
  std::vector<MockEntry> script(5, {std::nullopt, "r", std::nullopt});
  MockBackend mock(script);
  FakeTime ft;
  Gateway gw(mock, ft.clock());
  LLMConfig cfg;
  cfg.requests_per_minute = 2;
  gw.complete("a", cfg);
  gw.complete("b", cfg);
  EXPECT_EQ(gw.complete("c", cfg), "r");
  ASSERT_EQ(ft.sleeps.size(), 1u);
  EXPECT_EQ(ft.sleeps[0], 60000ms);

  cfg.max_rate_wait_seconds = 1.0;
  gw.complete("d", cfg);
  try {
    gw.complete("e", cfg);
    FAIL();
  } catch (const RateLimitError& e) {
    EXPECT_EQ(e.code(), ErrorCode::RateLimitExceeded);
    EXPECT_GT(e.wait_seconds(), 1.0);
  }
}

TEST(Embed, HashEmbeddingScheme) {
  const auto v = hash_embedding("a");
  EXPECT_EQ(v.dim(), 64u);
  EXPECT_EQ(v, hash_embedding("a"));
  EXPECT_NE(v, hash_embedding("b"));
  SplitMix64 rng(text::fnv1a64("a"));
  EXPECT_EQ(v.components[0], rng.uniform() * 2.0 - 1.0);
  for (double x : v.components) {
    EXPECT_GE(x, -1.0);
    EXPECT_LT(x, 1.0);
  }
}

TEST(Embed, AlignedIdenticalAndSelfSimilar) {
  MockBackend mock({});
  Gateway gw(mock);
  Recorder rec;
  const auto vs = gw.embed({"a", "a", "Digital Notes"}, {}, rec.sink());
  ASSERT_EQ(vs.size(), 3u);
  EXPECT_EQ(vs[0], vs[1]);
  EXPECT_NEAR(analysis::cosine_similarity(vs[2], vs[2]), 1.0, 1e-12);
  EXPECT_EQ(rec.kinds(), (std::vector<std::string>{"embed_request", "embed_reply"}));
  EXPECT_EQ(code_of([&] { gw.embed({}, {}); }), ErrorCode::EmptyInput);
  EXPECT_EQ(code_of([&] { gw.embed({"x", ""}, {}); }), ErrorCode::EmptyInput);
}

TEST(Embed, BatchedFanOutKeepsOrder) {
  MockBackend mock({});
  Gateway gw(mock);
  LLMConfig cfg;
  cfg.embed_batch_size = 3;
  cfg.embed_fanout = 4;
  std::vector<std::string> texts;
  for (int i = 0; i < 50; ++i) texts.push_back("text " + std::to_string(i));
  const auto vs = gw.embed(texts, cfg);
  ASSERT_EQ(vs.size(), texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(vs[i], hash_embedding(texts[i]));
}

namespace {

class BadDimBackend final : public Backend {
 public:
  std::string complete(const std::string&, const LLMConfig&) override { return {}; }
  std::vector<Vector> embed(const std::vector<std::string>& texts, const LLMConfig&) override {
    std::vector<Vector> out;
    for (std::size_t i = 0; i < texts.size(); ++i) out.push_back(hash_embedding(texts[i], 4 + i));
    return out;
  }
  std::string name() const override { return "bad"; }
};

}  // namespace

TEST(Embed, MixedDimensionsAreBackendError) {
  BadDimBackend bad;
  Gateway gw(bad);
  EXPECT_EQ(code_of([&] { gw.embed({"a", "b"}, {}); }), ErrorCode::BackendError);
}

// ---- HTTP backend against a local fake server ------------------------------

namespace {

class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = json::parse(req.body);
      if (fail_next_ > 0) {
        --fail_next_;
        res.status = 503;
        res.set_content("busy", "text/plain");
        return;
      }
      if (bad_request_) {
        res.status = 400;
        res.set_content("bad", "text/plain");
        return;
      }
      const auto prompt = last_body_["messages"][0]["content"].get<std::string>();
      json reply = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", "echo: " + prompt}}}}})}};
      res.set_content(reply.dump(), "application/json");
    });
    server_.Post("/v1/embeddings", [](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body);
      json data = json::array();
      const auto& input = body["input"];
      // Reverse order to exercise index-based placement.
      for (std::size_t i = input.size(); i-- > 0;)
        data.push_back({{"index", i}, {"embedding", {static_cast<double>(input[i].get<std::string>().size()), 1.0}}});
      res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::string last_auth_;
  json last_body_;
  std::atomic<int> fail_next_{0};
  bool bad_request_ = false;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(HttpBackend, ChatRoundTripWithKeyFromEnvironment) {
  FakeServer srv;
  ::setenv("TA_TEST_KEY", "sk-test", 1);
  LLMConfig cfg;
  cfg.base_url = srv.url();
  cfg.api_key_env = "TA_TEST_KEY";
  cfg.temperature = 0.0;
  HttpBackend http(cfg);
  Gateway gw(http);
  EXPECT_EQ(gw.complete("hello", cfg), "echo: hello");
  EXPECT_EQ(srv.last_auth_, "Bearer sk-test");
  EXPECT_EQ(srv.last_body_["model"], "gpt-3.5-turbo-16k");
  EXPECT_EQ(srv.last_body_["temperature"], 0.0);
  ::unsetenv("TA_TEST_KEY");
}

TEST(HttpBackend, ServerErrorsAreRetriedClientErrorsAreNot) {
  FakeServer srv;
  LLMConfig cfg;
  cfg.base_url = srv.url();
  cfg.api_key_env = "TA_TEST_KEY_UNSET";
  HttpBackend http(cfg);
  FakeTime ft;
  Gateway gw(http, ft.clock());
  srv.fail_next_ = 2;
  EXPECT_EQ(gw.complete("x", cfg), "echo: x");
  EXPECT_EQ(ft.sleeps.size(), 2u);
  EXPECT_TRUE(srv.last_auth_.empty());

  srv.bad_request_ = true;
  try {
    gw.complete("y", cfg);
    FAIL();
  } catch (const BackendFailure& e) {
    EXPECT_FALSE(e.retriable());
  }
  EXPECT_EQ(ft.sleeps.size(), 2u);
}

TEST(HttpBackend, EmbeddingsPlacedByIndex) {
  FakeServer srv;
  LLMConfig cfg;
  cfg.base_url = srv.url();
  HttpBackend http(cfg);
  const auto vs = Gateway(http).embed({"a", "bbb"}, cfg);
  ASSERT_EQ(vs.size(), 2u);
  EXPECT_EQ(vs[0].components, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(vs[1].components, (std::vector<double>{3.0, 1.0}));
}

TEST(HttpBackend, UnreachableHostIsTransient) {
  LLMConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.max_retries = 0;
  HttpBackend http(cfg);
  try {
    Gateway(http).complete("x", cfg);
    FAIL();
  } catch (const BackendFailure& e) {
    EXPECT_TRUE(e.retriable());
  }
}
