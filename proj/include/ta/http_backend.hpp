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

// OpenAI-compatible chat-completions / embeddings backend over cpp-httplib.
// HTTPS needs CPPHTTPLIB_OPENSSL_SUPPORT defined before this header.

#include <cstdlib>
#include <memory>
#include <string>

#include "httplib.h"
#include "ta/llm.hpp"

namespace ta::llm {

class HttpBackend final : public Backend {
 public:
  /// Reads the API key from the environment variable named in `cfg`.
  explicit HttpBackend(const LLMConfig& cfg) : base_url_(cfg.base_url) {
    if (const char* key = std::getenv(cfg.api_key_env.c_str())) api_key_ = key;
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (base_url_.rfind("https://", 0) == 0)
      throw Error(ErrorCode::InvalidConfig, "built without TLS support; cannot reach " + base_url_);
#endif
  }

  std::string complete(const std::string& prompt, const LLMConfig& cfg) override {
    json body = {{"model", cfg.model_name},
                 {"temperature", cfg.temperature},
                 {"max_tokens", cfg.max_output_tokens},
                 {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
    const auto reply = post("/v1/chat/completions", body);
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw BackendFailure(std::string("unexpected chat reply: ") + e.what(), false);
    }
  }

  std::vector<Vector> embed(const std::vector<std::string>& texts, const LLMConfig& cfg) override {
    json body = {{"model", cfg.embedding_model}, {"input", texts}};
    const auto reply = post("/v1/embeddings", body);
    std::vector<Vector> out(texts.size());
    try {
      for (const auto& item : reply.at("data")) {
        const auto idx = item.value("index", std::size_t{0});
        if (idx >= out.size()) throw BackendFailure("embedding index out of range", false);
        out[idx].components = item.at("embedding").get<std::vector<double>>();
      }
    } catch (const json::exception& e) {
      throw BackendFailure(std::string("unexpected embedding reply: ") + e.what(), false);
    }
    return out;
  }

  std::string name() const override { return "http"; }

 private:
  json post(const std::string& path, const json& body) {
    httplib::Client client(base_url_);
    client.set_connection_timeout(10);
    client.set_read_timeout(120);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) throw BackendFailure("transport error: " + httplib::to_string(res.error()), true);
    if (res->status == 429 || res->status >= 500)
      throw BackendFailure("HTTP " + std::to_string(res->status) + ": " + res->body, true);
    if (res->status != 200) throw BackendFailure("HTTP " + std::to_string(res->status) + ": " + res->body, false);
    auto j = json::parse(res->body, nullptr, false);
    if (j.is_discarded()) throw BackendFailure("reply is not JSON", false);
    return j;
  }

  std::string base_url_;
  std::string api_key_;
};

}  // namespace ta::llm
