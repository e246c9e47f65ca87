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

#include "ta_cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "httplib.h"
#include "ta/http_backend.hpp"
#include "ta/service.hpp"
#include "ta/ta.hpp"

namespace ta::cli {
namespace {

using json = nlohmann::ordered_json;
using workflow::SessionState;

json read_json(const std::string& path) {
  auto j = json::parse(corpus::read_file(path), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::ParseError, path + " is not valid JSON");
  return j;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
  f << content;
  if (!f) throw Error(ErrorCode::IoError, "write failed for " + path);
}

void emit(const json& j, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) out << j.dump(2) << "\n";
  else write_text(out_path, j.dump(2) + "\n");
}

// Backend plus gateway for one process. A mock resumes at the number of
// model calls the session has already made.
struct Runtime {
  std::unique_ptr<llm::Backend> backend;
  std::unique_ptr<llm::Gateway> gateway;
};

Runtime make_runtime(const std::string& mock_script, const llm::LLMConfig& cfg, std::size_t cursor) {
  Runtime rt;
  if (!mock_script.empty())
    rt.backend = std::make_unique<llm::MockBackend>(llm::mock_script_from_json(read_json(mock_script)), cursor);
  else
    rt.backend = std::make_unique<llm::HttpBackend>(cfg);
  rt.gateway = std::make_unique<llm::Gateway>(*rt.backend);
  return rt;
}

struct Common {
  std::string config_path;
  std::string session_path;
  std::string mock_script;
  std::string out_path;
};

llm::LLMConfig load_config(const Common& c) {
  return c.config_path.empty() ? llm::LLMConfig{} : llm::config_from_json(read_json(c.config_path));
}

// Loads the session, runs `fn`, and saves the session even if `fn` threw,
// so failed model calls stay in the audit log.
template <typename Fn>
void with_session(const Common& c, Fn&& fn) {
  auto s = workflow::load_session(c.session_path);
  auto rt = make_runtime(c.mock_script, s.config, s.llm_attempts());
  workflow::Engine engine(*rt.gateway);
  try {
    fn(engine, s);
  } catch (...) {
    workflow::save_session(s, c.session_path);
    throw;
  }
  workflow::save_session(s, c.session_path);
}

json status_json(const SessionState& s) {
  const auto conv = workflow::check_convergence(s);
  return {{"phase", std::string(workflow::to_string(s.phase))},
          {"rounds", s.rounds.size()},
          {"max_rounds", s.options.max_rounds},
          {"open_round", !s.rounds.empty() && s.rounds.back().open()},
          {"converged", conv.converged},
          {"forced", conv.forced},
          {"initial_codes", s.initial_codes.size()},
          {"extraction_failures", s.extraction_failures.size()},
          {"assignments", s.assignments.size()},
          {"llm_calls", s.llm_attempts()}};
}

void print_verdict(const promptkit::MCVerdict& v, std::ostream& out) {
  out << "MC agreed with " << v.agreed.size() << " item(s), disagreed with " << v.disagreed.size() << "\n";
  for (const auto& d : v.disagreed) out << "  - " << d.item << ": " << d.reason << "\n";
  for (const auto& n : v.repair_notes) out << "  note: " << n << "\n";
}

std::string prompt_line(std::istream& in, std::ostream& out, const std::string& prompt, bool& eof) {
  out << prompt << std::flush;
  std::string line;
  if (!std::getline(in, line)) eof = true;
  return text::trim(line);
}

// Interactive loop: one round per iteration until convergence or EOF.
void discuss_interactive(workflow::Engine& engine, SessionState& s, const Common& c, std::istream& in,
                         std::ostream& out) {
  for (;;) {
    if (workflow::check_convergence(s).converged) {
      out << "Converged. Run `ta finalize`.\n";
      return;
    }
    out << "Round " << s.rounds.size() + 1 << " of at most " << s.options.max_rounds << ". Current draft:\n"
        << promptkit::render_codebook_listing(*s.draft) << "\n";
    bool eof = false;
    const auto path = prompt_line(in, out, "Revision file (blank keeps the draft): ", eof);
    if (eof) return;
    auto revision = path.empty() ? *s.draft : codebook::codebook_from_json(read_json(path));
    std::vector<promptkit::ChangeRationale> actions;
    for (;;) {
      auto change = prompt_line(in, out, "Change (blank to finish): ", eof);
      if (eof || change.empty()) break;
      auto rationale = prompt_line(in, out, "Rationale: ", eof);
      actions.push_back({change, rationale});
      if (eof) break;
    }
    const auto answer = prompt_line(in, out, "Satisfied with this version? [y/N]: ", eof);
    const bool satisfied = answer == "y" || answer == "Y" || answer == "yes";
    engine.submit_hc_revision(s, revision, actions, satisfied);
    workflow::save_session(s, c.session_path);
    print_verdict(engine.request_mc_verdict(s), out);
    workflow::save_session(s, c.session_path);
    if (eof) return;
  }
}

int report_error(const service::ApiError& e, std::ostream& err) {
  err << service::to_json(e).dump() << "\n";
  return e.http_status == 409 ? 3 : e.http_status >= 500 ? 4 : 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Human-AI collaborative thematic analysis", "ta"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config_path, "LLM config JSON");
  app.add_option("--mock-script", c.mock_script, "Use a scripted mock model instead of the HTTP backend");

  auto add_session = [&](CLI::App* sub) { sub->add_option("--session", c.session_path, "Session file")->required(); };
  auto add_out = [&](CLI::App* sub) { sub->add_option("-o,--out", c.out_path, "Write JSON here instead of stdout"); };

  // ingest
  std::string input, format, question, question_id = "q1";
  auto* ingest = app.add_subcommand("ingest", "Load responses from CSV or JSONL");
  ingest->add_option("input", input, "Input file")->required();
  ingest->add_option("--format", format, "csv or jsonl; default from the file extension")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  ingest->add_option("--question", question, "Question text");
  ingest->add_option("--question-id", question_id);
  add_out(ingest);

  // split
  std::string responses_path;
  std::size_t dev_size = 0;
  std::uint64_t seed = 0;
  auto* split = app.add_subcommand("split", "Split responses into development and held-out pools");
  split->add_option("--responses", responses_path)->required();
  split->add_option("--dev-size", dev_size)->required();
  split->add_option("--seed", seed);
  add_out(split);

  // sample
  std::string split_path;
  std::size_t n_each = 0;
  auto* sample = app.add_subcommand("sample", "Draw an evaluation sample from both pools");
  sample->add_option("--split", split_path)->required();
  sample->add_option("--n-each", n_each)->required();
  sample->add_option("--seed", seed);
  add_out(sample);

  // init
  std::string exemplars_path;
  int max_rounds = 10;
  bool batch = false, lenient = false;
  auto* init = app.add_subcommand("init", "Start a session from a split and exemplars");
  add_session(init);
  init->add_option("--split", split_path)->required();
  init->add_option("--exemplars", exemplars_path)->required();
  init->add_option("--max-rounds", max_rounds);
  init->add_flag("--batch", batch, "Pack several responses per extraction prompt");
  init->add_flag("--lenient-exemplars", lenient, "Warn instead of failing on exemplar count");

  auto* extract = app.add_subcommand("extract", "Generate initial codes for the development pool");
  add_session(extract);
  auto* group = app.add_subcommand("group", "Group initial codes into a draft codebook");
  add_session(group);

  // discuss
  std::string revision_path, actions_path;
  bool keep = false, satisfied = false;
  auto* discuss = app.add_subcommand("discuss", "Run discussion rounds (interactive unless --revision or --keep)");
  add_session(discuss);
  discuss->add_option("--revision", revision_path, "Revised codebook JSON");
  discuss->add_option("--actions", actions_path, "Change/rationale list JSON");
  discuss->add_flag("--keep", keep, "Submit the current draft unchanged");
  discuss->add_flag("--satisfied", satisfied, "Record the HC as satisfied");

  auto* finalize = app.add_subcommand("finalize", "Freeze the converged codebook");
  add_session(finalize);

  // code
  std::string targets_path, import_path;
  auto* code = app.add_subcommand("code", "Code responses with the final codebook");
  add_session(code);
  code->add_option("--targets", targets_path, "Evaluation sample or response set to code with the model");
  code->add_option("--import", import_path, "Import a human assignment JSON instead");

  // eval
  std::string by = "code", mode = "multi", gold_path, table_format = "json";
  double tau = 0.8;
  auto* eval = app.add_subcommand("eval", "Agreement between coders, stratified by pool");
  add_session(eval);
  eval->add_option("--by", by)->check(CLI::IsMember({"code", "theme", "both"}));
  eval->add_option("--mode", mode)->check(CLI::IsMember({"single", "multi"}));
  eval->add_option("--gold", gold_path, "Gold codebook for code matching");
  eval->add_option("--tau", tau, "Cosine threshold for a code match");
  eval->add_option("--format", table_format)->check(CLI::IsMember({"json", "table"}));
  add_out(eval);

  // triage
  std::string coder_a = "HC", coder_b = "MC";
  auto* triage = app.add_subcommand("triage", "Classify coding disagreements");
  add_session(triage);
  triage->add_option("--a", coder_a);
  triage->add_option("--b", coder_b);
  add_out(triage);

  auto* status = app.add_subcommand("status", "Show session phase and progress");
  add_session(status);

  auto* replay = app.add_subcommand("replay", "Re-run the audit log and compare the result");
  add_session(replay);
  add_out(replay);

  // serve
  std::string host = "127.0.0.1", data_dir;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve the /v1/ JSON API");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--data-dir", data_dir, "Persist sessions here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (ingest->parsed()) {
      if (format.empty()) format = input.ends_with(".jsonl") ? "jsonl" : "csv";
      auto r = corpus::load_responses(input, corpus::format_from_string(format), question, question_id);
      emit(corpus::to_json(r.set), c.out_path, out);
      err << "kept " << r.set.n() << " of " << r.report.rows_read << " rows";
      if (r.report.dropped) {
        err << "; dropped rows:";
        for (auto row : r.report.dropped_rows) err << " " << row;
      }
      err << "\n";
    } else if (split->parsed()) {
      auto set = corpus::response_set_from_json(read_json(responses_path));
      emit(corpus::to_json(corpus::split_pools(set, dev_size, seed)), c.out_path, out);
    } else if (sample->parsed()) {
      auto sp = corpus::pool_split_from_json(read_json(split_path));
      emit(corpus::to_json(corpus::sample_eval(sp, n_each, seed)), c.out_path, out);
    } else if (init->parsed()) {
      auto cfg = load_config(c);
      llm::MockBackend none({});
      llm::Gateway gateway(none);
      workflow::Engine engine(gateway);
      workflow::SessionOptions opts;
      opts.max_rounds = max_rounds;
      opts.batch_extraction = batch;
      opts.strict_exemplar_count = !lenient;
      auto s = engine.start_session(cfg, corpus::pool_split_from_json(read_json(split_path)),
                                    promptkit::exemplar_set_from_json(read_json(exemplars_path)), opts);
      workflow::save_session(s, c.session_path);
      out << status_json(s).dump(2) << "\n";
    } else if (extract->parsed()) {
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        auto r = e.run_extraction(s);
        out << "extracted " << r.codes << " code(s) from " << r.responses << " response(s)\n";
        for (const auto& f : r.failures) out << "  failed " << f.response_id << ": " << f.error << "\n";
      });
    } else if (group->parsed()) {
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        out << promptkit::render_codebook_listing(e.run_grouping(s)) << "\n";
        for (const auto& n : s.draft_notes) out << "note: " << n << "\n";
      });
    } else if (discuss->parsed()) {
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        if (s.phase != workflow::Phase::refinement)
          throw Error(ErrorCode::PhaseError, "discussion needs a draft codebook; run `ta group` first");
        if (!revision_path.empty() || keep) {
          auto revision = keep ? *s.draft : codebook::codebook_from_json(read_json(revision_path));
          std::vector<promptkit::ChangeRationale> actions;
          if (!actions_path.empty()) actions = promptkit::actions_from_json(read_json(actions_path));
          if (s.rounds.empty() || !s.rounds.back().open()) e.submit_hc_revision(s, revision, actions, satisfied);
          print_verdict(e.request_mc_verdict(s), out);
          const auto conv = workflow::check_convergence(s);
          out << (conv.converged ? (conv.forced ? "converged (round limit reached)\n" : "converged\n")
                                 : "not converged\n");
        } else {
          if (!s.rounds.empty() && s.rounds.back().open()) print_verdict(e.request_mc_verdict(s), out);
          discuss_interactive(e, s, c, in, out);
        }
      });
    } else if (finalize->parsed()) {
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        out << promptkit::render_codebook_listing(e.finalize(s)) << "\n";
        if (s.forced_convergence) out << "note: finalized at the round limit without mutual agreement\n";
      });
    } else if (code->parsed()) {
      if (targets_path.empty() == import_path.empty())
        throw Error(ErrorCode::InvalidArgument, "give exactly one of --targets or --import");
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        if (!import_path.empty()) {
          auto a = codebook::assignment_from_json(read_json(import_path));
          e.add_assignment(s, a);
          out << "imported " << a.items.size() << " item(s) for coder " << a.coder << "\n";
          return;
        }
        const auto t = read_json(targets_path);
        auto targets = t.contains("items") ? corpus::eval_sample_from_json(t).as_response_set()
                                           : corpus::response_set_from_json(t);
        auto r = e.run_mc_coding(s, targets);
        out << "coded " << r.assignment.items.size() << " item(s)\n";
        for (const auto& n : r.notes) out << "note: " << n << "\n";
      });
    } else if (eval->parsed()) {
      with_session(c, [&](workflow::Engine& e, SessionState& s) {
        analysis::EvalOptions opts;
        opts.mode = analysis::mode_from_string(mode);
        opts.levels.clear();
        if (by != "theme") opts.levels.push_back(analysis::Level::code);
        if (by != "code") opts.levels.push_back(analysis::Level::theme);
        std::optional<codebook::Codebook> gold;
        if (!gold_path.empty()) gold = codebook::codebook_from_json(read_json(gold_path));
        analysis::MatchOptions m;
        m.tau = tau;
        const auto& report = e.evaluate(s, opts, gold, m);
        if (table_format == "table" && c.out_path.empty()) out << analysis::render_table(report);
        else emit(report, c.out_path, out);
      });
    } else if (triage->parsed()) {
      auto s = workflow::load_session(c.session_path);
      if (!s.final) throw Error(ErrorCode::PhaseError, "triage needs a final codebook");
      const auto* a = s.assignment_of(coder_a);
      const auto* b = s.assignment_of(coder_b);
      if (!a || !b) throw Error(ErrorCode::NotFound, "session lacks an assignment for " + (a ? coder_b : coder_a));
      emit(analysis::to_json(analysis::triage_mismatches(*a, *b, *s.final)), c.out_path, out);
    } else if (status->parsed()) {
      out << status_json(workflow::load_session(c.session_path)).dump(2) << "\n";
    } else if (replay->parsed()) {
      auto recorded = workflow::load_session(c.session_path);
      auto rt = make_runtime(c.mock_script, recorded.config, 0);
      auto replayed = workflow::replay(recorded, *rt.gateway);
      const auto a = workflow::dump_session(recorded);
      const auto b = workflow::dump_session(replayed);
      if (!c.out_path.empty()) write_text(c.out_path, b);
      if (a != b) {
        err << "replay differs from the recorded session\n";
        return 1;
      }
      out << "replay identical (" << recorded.audit.size() << " audit entries)\n";
    } else if (serve->parsed()) {
      auto cfg = load_config(c);
      auto rt = make_runtime(c.mock_script, cfg, 0);
      service::ServiceConfig sc;
      sc.llm = cfg;
      sc.data_dir = data_dir;
      service::Service svc(*rt.gateway, sc);
      httplib::Server server;
      svc.bind(server);
      out << "listening on http://" << host << ":" << port << "/v1/\n" << std::flush;
      if (!server.listen(host, port)) throw Error(ErrorCode::IoError, "cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const Error& e) {
    return report_error(service::to_api_error(e), err);
  } catch (const json::exception& e) {
    return report_error(service::to_api_error(ErrorCode::ParseError, e.what()), err);
  }
  return 0;
}

}  // namespace ta::cli
