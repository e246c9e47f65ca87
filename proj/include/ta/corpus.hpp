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

// Survey responses: loading, development/holdout pool splits, and evaluation
// samples. Everything here is a pure function of its inputs and the seed.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "ta/error.hpp"
#include "ta/random.hpp"
#include "ta/text.hpp"

namespace ta::corpus {

using json = nlohmann::ordered_json;

struct Response {
  std::string id;
  std::string text;
  std::string question_id;

  friend bool operator==(const Response&, const Response&) = default;
};

struct ResponseSet {
  std::string question;
  std::string question_id = "q1";
  std::vector<Response> responses;

  std::size_t n() const { return responses.size(); }
  friend bool operator==(const ResponseSet&, const ResponseSet&) = default;
};

enum class PoolTag { seen, unseen };

inline std::string_view to_string(PoolTag t) { return t == PoolTag::seen ? "seen" : "unseen"; }

inline PoolTag pool_tag_from_string(std::string_view s) {
  if (s == "seen") return PoolTag::seen;
  if (s == "unseen") return PoolTag::unseen;
  throw Error(ErrorCode::ParseError, "unknown pool tag '" + std::string(s) + "'");
}

struct PoolSplit {
  ResponseSet seen;
  ResponseSet unseen;
  std::uint64_t seed = 0;
  std::size_t dev_size = 0;

  friend bool operator==(const PoolSplit&, const PoolSplit&) = default;
};

struct TaggedResponse {
  Response response;
  PoolTag pool = PoolTag::seen;

  friend bool operator==(const TaggedResponse&, const TaggedResponse&) = default;
};

// Evaluation sample drawn from both pools; every item carries its provenance.
struct EvalSample {
  std::string question;
  std::string question_id = "q1";
  std::uint64_t seed = 0;
  std::size_t n_each = 0;
  std::vector<TaggedResponse> items;

  std::map<std::string, PoolTag> pool_tags() const {
    std::map<std::string, PoolTag> tags;
    for (const auto& it : items) tags.emplace(it.response.id, it.pool);
    return tags;
  }
  ResponseSet as_response_set() const {
    ResponseSet set{question, question_id, {}};
    for (const auto& it : items) set.responses.push_back(it.response);
    return set;
  }
  friend bool operator==(const EvalSample&, const EvalSample&) = default;
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t dropped = 0;
  std::vector<std::size_t> dropped_rows;  // 1-based data row numbers
};

struct LoadResult {
  ResponseSet set;
  LoadReport report;
};

enum class Format { csv, jsonl };

inline Format format_from_string(std::string_view s) {
  if (s == "csv") return Format::csv;
  if (s == "jsonl") return Format::jsonl;
  throw Error(ErrorCode::InvalidArgument, "unknown format '" + std::string(s) + "' (csv|jsonl)");
}

inline std::string sequential_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%04zu", k);
  return buf;
}

namespace detail {

// RFC 4180 records: quoted fields may contain separators, doubled quotes and
// line breaks. Accepts LF or CRLF; strips a leading UTF-8 BOM.
inline std::vector<std::vector<std::string>> parse_csv_records(std::string_view data) {
  if (data.size() >= 3 && data.substr(0, 3) == "\xEF\xBB\xBF") data.remove_prefix(3);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  while (i < data.size()) {
    const char c = data[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        in_quotes = false;
      } else {
        field.push_back(c);
      }
      ++i;
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      end_row();
      if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
    } else {
      field.push_back(c);
      field_started = true;
    }
    ++i;
  }
  if (in_quotes) throw Error(ErrorCode::ParseError, "unterminated quoted CSV field");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

struct RawRow {
  std::optional<std::string> id;
  std::string text;
};

inline LoadResult assemble(const std::vector<RawRow>& rows, std::string question,
                           std::string question_id) {
  LoadResult out;
  out.set.question = std::move(question);
  out.set.question_id = question_id;
  std::unordered_set<std::string> seen_ids;
  std::size_t kept = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ++out.report.rows_read;
    if (text::is_blank(rows[r].text)) {
      ++out.report.dropped;
      out.report.dropped_rows.push_back(r + 1);
      continue;
    }
    ++kept;
    std::string id;
    if (rows[r].id) {
      id = text::trim(*rows[r].id);
      if (id.empty())
        throw Error(ErrorCode::InvalidId, "row " + std::to_string(r + 1) + " has an empty id");
    } else {
      id = sequential_id(kept);
    }
    if (!seen_ids.insert(id).second)
      throw Error(ErrorCode::DuplicateId, "duplicate response id '" + id + "'");
    out.set.responses.push_back({id, rows[r].text, question_id});
  }
  if (out.set.responses.empty()) throw Error(ErrorCode::NoUsableRows, "no non-blank responses");
  return out;
}

}  // namespace detail

inline LoadResult parse_csv(std::string_view data, std::string question = {},
                            std::string question_id = "q1") {
  auto records = detail::parse_csv_records(data);
  if (records.empty()) throw Error(ErrorCode::MissingColumn, "CSV has no header row");
  const auto& header = records.front();
  std::optional<std::size_t> id_col, text_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = text::fold(header[c]);
    if (name == "id") id_col = c;
    if (name == "response") text_col = c;
  }
  if (!text_col) throw Error(ErrorCode::MissingColumn, "CSV header lacks a 'response' column");
  std::vector<detail::RawRow> rows;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    detail::RawRow row;
    row.text = *text_col < rec.size() ? rec[*text_col] : std::string{};
    if (id_col) row.id = *id_col < rec.size() ? rec[*id_col] : std::string{};
    rows.push_back(std::move(row));
  }
  return detail::assemble(rows, std::move(question), std::move(question_id));
}

inline LoadResult parse_jsonl(std::string_view data, std::string question = {},
                              std::string question_id = "q1") {
  std::vector<detail::RawRow> rows;
  std::size_t line_no = 0;
  for (auto line : text::split_lines(data)) {
    ++line_no;
    if (text::is_blank(line)) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::ParseError, "JSONL line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("response") || !obj["response"].is_string())
      throw Error(ErrorCode::MissingColumn,
                  "JSONL line " + std::to_string(line_no) + " lacks a string 'response'");
    detail::RawRow row;
    row.text = obj["response"].get<std::string>();
    if (obj.contains("id")) {
      const auto& id = obj["id"];
      if (id.is_string()) row.id = id.get<std::string>();
      else if (id.is_number_integer()) row.id = std::to_string(id.get<long long>());
      else throw Error(ErrorCode::InvalidId, "JSONL line " + std::to_string(line_no) + ": bad id");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(ErrorCode::NoUsableRows, "JSONL input is empty");
  // Mixed presence of ids would produce colliding sequential ids; require all or none.
  const bool any_id = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.id.has_value(); });
  if (any_id)
    for (auto& r : rows)
      if (!r.id) r.id = std::string{};
  return detail::assemble(rows, std::move(question), std::move(question_id));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline LoadResult load_responses(const std::string& path, Format format, std::string question = {},
                                 std::string question_id = "q1") {
  const auto data = read_file(path);
  return format == Format::csv ? parse_csv(data, std::move(question), std::move(question_id))
                               : parse_jsonl(data, std::move(question), std::move(question_id));
}

/// Uniform sample without replacement of `dev_size` responses into the seen
/// pool. Both pools keep the source order.
inline PoolSplit split_pools(const ResponseSet& set, std::size_t dev_size, std::uint64_t seed) {
  if (dev_size == 0 || dev_size > set.n())
    throw Error(ErrorCode::DevSizeOutOfRange, "dev_size " + std::to_string(dev_size) +
                                                  " not in [1, " + std::to_string(set.n()) + "]");
  SplitMix64 rng(seed);
  auto picked = sample_indices(set.n(), dev_size, rng);
  std::vector<bool> in_seen(set.n(), false);
  for (auto i : picked) in_seen[i] = true;
  PoolSplit split;
  split.seed = seed;
  split.dev_size = dev_size;
  split.seen = ResponseSet{set.question, set.question_id, {}};
  split.unseen = ResponseSet{set.question, set.question_id, {}};
  for (std::size_t i = 0; i < set.n(); ++i)
    (in_seen[i] ? split.seen : split.unseen).responses.push_back(set.responses[i]);
  return split;
}

/// `n_each` responses from each pool. An empty unseen pool contributes nothing.
inline EvalSample sample_eval(const PoolSplit& split, std::size_t n_each, std::uint64_t seed) {
  if (n_each == 0) throw Error(ErrorCode::InvalidArgument, "n_each must be positive");
  if (n_each > split.seen.n())
    throw Error(ErrorCode::PoolTooSmall, "seen pool has " + std::to_string(split.seen.n()) +
                                             " responses, need " + std::to_string(n_each));
  if (split.unseen.n() != 0 && n_each > split.unseen.n())
    throw Error(ErrorCode::PoolTooSmall, "unseen pool has " + std::to_string(split.unseen.n()) +
                                             " responses, need " + std::to_string(n_each));
  SplitMix64 rng(seed);
  EvalSample out;
  out.question = split.seen.question;
  out.question_id = split.seen.question_id;
  out.seed = seed;
  out.n_each = n_each;
  auto draw = [&](const ResponseSet& pool, PoolTag tag) {
    if (pool.n() == 0) return;
    auto idx = sample_indices(pool.n(), n_each, rng);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.items.push_back({pool.responses[i], tag});
  };
  draw(split.seen, PoolTag::seen);
  draw(split.unseen, PoolTag::unseen);
  return out;
}

// ---- JSON -----------------------------------------------------------------

inline json to_json(const ResponseSet& set) {
  json responses = json::array();
  for (const auto& r : set.responses) responses.push_back({{"id", r.id}, {"response", r.text}});
  return {{"question", set.question},
          {"question_id", set.question_id},
          {"n", set.n()},
          {"responses", std::move(responses)}};
}

inline ResponseSet response_set_from_json(const json& j) {
  try {
    ResponseSet set;
    set.question = j.value("question", std::string{});
    set.question_id = j.value("question_id", std::string{"q1"});
    std::unordered_set<std::string> ids;
    for (const auto& r : j.at("responses")) {
      Response resp{r.at("id").get<std::string>(), r.at("response").get<std::string>(),
                    set.question_id};
      if (text::is_blank(resp.text))
        throw Error(ErrorCode::ParseError, "response '" + resp.id + "' is blank");
      if (!ids.insert(resp.id).second)
        throw Error(ErrorCode::DuplicateId, "duplicate response id '" + resp.id + "'");
      set.responses.push_back(std::move(resp));
    }
    if (j.contains("n") && j["n"].get<std::size_t>() != set.n())
      throw Error(ErrorCode::ParseError, "'n' does not match the number of responses");
    return set;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("response set: ") + e.what());
  }
}

inline json to_json(const PoolSplit& split) {
  return {{"seed", split.seed},
          {"dev_size", split.dev_size},
          {"seen", to_json(split.seen)},
          {"unseen", to_json(split.unseen)}};
}

inline PoolSplit pool_split_from_json(const json& j) {
  try {
    PoolSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.dev_size = j.at("dev_size").get<std::size_t>();
    s.seen = response_set_from_json(j.at("seen"));
    s.unseen = response_set_from_json(j.at("unseen"));
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("pool split: ") + e.what());
  }
}

inline json to_json(const EvalSample& s) {
  json items = json::array();
  for (const auto& it : s.items)
    items.push_back({{"id", it.response.id},
                     {"response", it.response.text},
                     {"pool", std::string(to_string(it.pool))}});
  return {{"question", s.question},
          {"question_id", s.question_id},
          {"seed", s.seed},
          {"n_each", s.n_each},
          {"items", std::move(items)}};
}

inline EvalSample eval_sample_from_json(const json& j) {
  try {
    EvalSample s;
    s.question = j.value("question", std::string{});
    s.question_id = j.value("question_id", std::string{"q1"});
    s.seed = j.value("seed", std::uint64_t{0});
    s.n_each = j.value("n_each", std::size_t{0});
    for (const auto& it : j.at("items")) {
      if (!it.contains("pool"))
        throw Error(ErrorCode::MissingPoolTag, "item '" + it.value("id", std::string{}) + "' has no pool tag");
      s.items.push_back({{it.at("id").get<std::string>(), it.at("response").get<std::string>(),
                          s.question_id},
                         pool_tag_from_string(it.at("pool").get<std::string>())});
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("eval sample: ") + e.what());
  }
}

}  // namespace ta::corpus
