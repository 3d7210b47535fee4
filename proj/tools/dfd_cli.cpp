// dfd: command-line front end for decoding, calibration, metrics and traces.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.
// Failures print one JSON object to stderr: {"error": {"kind", "key", "message"}}.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dfd/dfd.hpp"

using namespace dfd;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string provider;
  std::size_t workers = 1;
};

int report_error(const std::string& kind, const std::string& key, const std::string& message, int code) {
  json err = {{"kind", kind}, {"message", message}};
  if (!key.empty()) err["key"] = key;
  std::cerr << json{{"error", err}}.dump() << std::endl;
  return code;
}

RunConfig load(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) rc = load_run_config(c.config_path);
  if (!c.provider.empty()) {
    rc.provider = c.provider;
    rc.validate();
  }
  for (const auto& w : config_warnings(rc)) {
    std::cerr << json{{"warning", w}}.dump() << std::endl;
  }
  return rc;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot write " + path);
  os << text;
  require(static_cast<bool>(os), ErrorKind::Io, "write failed: " + path);
}

std::string sidecar_path(const std::string& out) { return out + ".config.toml"; }

/// KA samples for calibration. A trace provider contributes the KA of every
/// recorded step; a live model is decoded at fixed T = 1 over the calibration prompts.
std::vector<double> calibration_samples(const RunConfig& rc, const LayerProvider& provider,
                                        std::size_t workers) {
  if (auto* tp = dynamic_cast<const TraceProvider*>(&provider);
      tp != nullptr && rc.calibration_path.empty()) {
    std::vector<double> ka;
    for (const auto& step : tp->trace().steps) {
      ka.push_back(compute_ka(step.logits, rc.decode.focus.ka_options()).ka);
    }
    return ka;
  }
  return collect_calibration_ka(provider, resolve_calibration_prompts(rc, provider), rc.decode, workers);
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Solves T0 when requested; the returned config has calibrate = false and
/// the solved t0, so it reproduces the run without recalibrating.
RunConfig resolve_calibration(RunConfig rc, const LayerProvider& provider, std::size_t workers) {
  if (!rc.calibrate) return rc;
  const auto ka = calibration_samples(rc, provider, workers);
  rc.decode.focus.t0 = calibrate_t0(ka, rc.decode.focus.sigma, rc.decode.focus.transform);
  rc.calibrate = false;
  rc.validate();
  return rc;
}

// Metrics over a set of generation records, grouped by dataset.

json metrics_report(const std::vector<GenerationRecord>& recs) {
  std::map<std::string, std::map<std::string, ResponseSet<TokenId>>> by_dataset;
  std::size_t failed = 0;
  for (const auto& r : recs) {
    if (r.error) {
      ++failed;
      continue;
    }
    auto& set = by_dataset[r.dataset][r.prompt_id];
    set.prompt_id = r.prompt_id;
    set.responses.push_back(r.tokens);
  }
  auto score = [](const std::vector<ResponseSet<TokenId>>& sets) {
    json j;
    for (std::size_t n = 1; n <= 3; ++n) {
      try {
        j["distinct_" + std::to_string(n)] = 100.0 * distinct_n(sets, n);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::UndefinedMetric) throw;
        j["distinct_" + std::to_string(n)] = nullptr;
      }
    }
    double bleu = 0;
    std::size_t used = 0;
    for (const auto& s : sets) {
      if (s.responses.size() < 2) continue;
      bleu += pairwise_bleu(s);
      ++used;
    }
    j["p_bleu"] = used ? json(bleu / static_cast<double>(used)) : json(nullptr);
    j["prompts"] = sets.size();
    return j;
  };
  json report;
  std::vector<ResponseSet<TokenId>> all;
  json datasets = json::object();
  for (const auto& [name, prompts] : by_dataset) {
    std::vector<ResponseSet<TokenId>> sets;
    for (const auto& [id, s] : prompts) sets.push_back(s);
    datasets[name] = score(sets);
    all.insert(all.end(), sets.begin(), sets.end());
  }
  require(!all.empty(), ErrorKind::UndefinedMetric, "no successful generations to score");
  report["overall"] = score(all);
  report["datasets"] = datasets;
  report["records"] = recs.size();
  report["failed_records"] = failed;
  return report;
}

double mean_temperature(const std::vector<GenerationRecord>& recs) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : recs) {
    for (const auto& st : r.steps) {
      s += st.temperature;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError(what, "bad number '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what, "empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_generate(const Common& common, const std::string& out_flag) {
  RunConfig rc = load(common);
  if (!out_flag.empty()) rc.output_path = out_flag;
  auto provider = make_provider(rc);
  rc = resolve_calibration(rc, *provider, common.workers);
  const auto prompts = resolve_prompts(rc, *provider);
  const auto recs = generate_batch(*provider, prompts, rc.decode, common.workers);
  std::ostringstream os;
  write_generations(recs, os);
  if (rc.output_path.empty()) {
    std::cout << os.str();
  } else {
    write_text(rc.output_path, os.str());
    write_text(sidecar_path(rc.output_path), resolved_config_text(rc));
  }
  const auto failed = std::count_if(recs.begin(), recs.end(), [](const auto& r) { return r.error.has_value(); });
  std::cerr << json{{"records", recs.size()}, {"failed", failed}, {"t0", rc.decode.focus.t0}}.dump() << std::endl;
  return failed == 0 ? 0 : 1;
}

int cmd_calibrate(const Common& common, const std::string& write_config) {
  RunConfig rc = load(common);
  auto provider = make_provider(rc);
  const auto ka = calibration_samples(rc, *provider, common.workers);
  const auto& f = rc.decode.focus;
  const double t0 = calibrate_t0(ka, f.sigma, f.transform);
  json out = {{"transform", to_string(f.transform)}, {"sigma", f.sigma}, {"t0", t0},
              {"mean_ka", mean_of(ka)}, {"samples", ka.size()}};
  if (!write_config.empty()) {
    rc.decode.focus.t0 = t0;
    rc.calibrate = false;
    write_text(write_config, resolved_config_text(rc));
    out["config"] = write_config;
  }
  std::cout << out.dump() << std::endl;
  return 0;
}

int cmd_metrics(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path);
  std::cout << metrics_report(read_generations(is)).dump(2) << std::endl;
  return 0;
}

int cmd_trace_info(const std::string& path, bool per_step) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  const bool binary = is.gcount() == 4 && std::equal(magic, magic + 4, kTraceMagic);
  is.clear();
  is.seekg(0);
  const Trace t = read_trace(is);
  std::vector<double> ka;
  json steps = json::array();
  for (const auto& s : t.steps) {
    const KASignal sig = compute_ka(s.logits);
    ka.push_back(sig.ka);
    if (per_step) steps.push_back({{"token", s.emitted}, {"ka", sig.ka}, {"head_size", sig.support.size()}});
  }
  json out = {{"encoding", binary ? "binary" : "jsonl"},
              {"model", t.meta.name},
              {"num_layers", t.meta.num_layers},
              {"vocab_size", t.meta.vocab_size},
              {"d_model", t.meta.d_model},
              {"param_count", t.meta.param_count},
              {"prompt_length", t.context_tokens.size()},
              {"steps", t.steps.size()},
              {"mean_ka", mean_of(ka)},
              {"max_ka", ka.empty() ? 0.0 : *std::max_element(ka.begin(), ka.end())}};
  if (per_step) out["per_step"] = steps;
  std::cout << out.dump(2) << std::endl;
  return 0;
}

int cmd_record_trace(const Common& common, std::size_t steps, const std::string& out_path, bool jsonl) {
  RunConfig rc = load(common);
  auto provider = make_provider(rc);
  const auto prompts = resolve_prompts(rc, *provider);
  const Trace t = record_greedy_trace(*provider, prompts.front().tokens, steps);
  write_trace_file(t, out_path, jsonl ? TraceEncoding::Jsonl : TraceEncoding::Binary);
  std::cout << json{{"trace", out_path}, {"steps", t.steps.size()}, {"prompt_id", prompts.front().id}}.dump()
            << std::endl;
  return 0;
}

int cmd_flops(double params, double dmodel, double vocab, double layers, const std::string& lengths, bool tied) {
  const CostModel m{params, dmodel, vocab, layers, tied};
  json rows = json::array();
  for (double len : parse_list(lengths, "--lengths")) {
    const auto e = flops_estimate(m, len, true);
    rows.push_back({{"context_len", len},
                    {"baseline_flops", e.baseline_flops},
                    {"dfd_flops", e.flops},
                    {"ratio", e.ratio_vs_baseline}});
  }
  std::cout << json{{"rows", rows}}.dump(2) << std::endl;
  return 0;
}

/// Fits a student copy of the built-in model to sequences greedily decoded
/// from a teacher, comparing KA-focused training with plain cross-entropy.
int cmd_dft_demo(std::size_t steps, double lr, std::size_t seq_len, double sigma, std::uint64_t seed) {
  require(steps >= 1 && seq_len >= 2 && lr > 0, ErrorKind::InvalidArgument,
          "dft-demo needs steps >= 1, seq-len >= 2 and lr > 0");
  ModelConfig teacher_cfg;
  teacher_cfg.seed = seed + 1;
  TinyTransformer teacher(teacher_cfg);
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& p : synthetic_prompts(8, 2, teacher_cfg.vocab, seed, "dft")) {
    const Trace t = record_greedy_trace(teacher, p.tokens, seq_len - p.tokens.size());
    std::vector<TokenId> seq = p.tokens;
    for (const auto& s : t.steps) seq.push_back(s.emitted);
    corpus.push_back(std::move(seq));
  }

  ModelConfig student_cfg;
  student_cfg.seed = seed;
  TinyTransformer focused(student_cfg);
  TinyTransformer plain(student_cfg);
  FocusConfig focus;
  focus.sigma = sigma;

  const auto check = grad_check(focused, make_ft_batch(focused, corpus.front(), focus));
  std::cout << json{{"grad_check_max_rel_error", check.max_rel_error}, {"checked", check.checked}}.dump()
            << std::endl;

  for (std::size_t step = 0; step < steps; ++step) {
    const auto& seq = corpus[step % corpus.size()];
    const FTBatch fb = make_ft_batch(focused, seq, focus);
    const auto f = model_ft_loss_and_grad(focused, fb);
    sgd_step(focused, f.grad, lr);
    const auto c = model_ft_loss_and_grad(plain, uniform_ft_batch(seq, 1.0));
    sgd_step(plain, c.grad, lr);
    double eval_f = 0, eval_c = 0;
    for (const auto& s : corpus) {
      eval_f += model_ft_loss(focused, uniform_ft_batch(s, 1.0));
      eval_c += model_ft_loss(plain, uniform_ft_batch(s, 1.0));
    }
    std::cout << json{{"step", step},
                      {"ft_loss", f.loss},
                      {"mean_temperature", mean_of(fb.temps)},
                      {"ce_loss", c.loss},
                      {"eval_ce_focused", eval_f / static_cast<double>(corpus.size())},
                      {"eval_ce_plain", eval_c / static_cast<double>(corpus.size())}}
                     .dump()
              << std::endl;
  }
  return 0;
}

int cmd_grid_search(const Common& common, const std::string& sigmas, const std::string& out_dir) {
  const RunConfig base = load(common);
  auto provider = make_provider(base);
  const auto prompts = resolve_prompts(base, *provider);
  const auto values = parse_list(sigmas, "--sigmas");
  json rows = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunConfig rc = base;
    rc.decode.focus.sigma = values[i];
    try {
      rc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("--sigmas", e.what());
    }
    rc = resolve_calibration(rc, *provider, common.workers);
    const auto recs = generate_batch(*provider, prompts, rc.decode, common.workers);
    json row = metrics_report(recs)["overall"];
    row["sigma"] = values[i];
    row["t0"] = rc.decode.focus.t0;
    row["mean_temperature"] = mean_temperature(recs);
    if (!out_dir.empty()) {
      rc.output_path = out_dir + "/sigma_" + std::to_string(i) + ".jsonl";
      std::ostringstream os;
      write_generations(recs, os);
      write_text(rc.output_path, os.str());
      write_text(sidecar_path(rc.output_path), resolved_config_text(rc));
      row["output"] = rc.output_path;
    }
    rows.push_back(row);
  }
  std::cout << json{{"transform", to_string(base.decode.focus.transform)}, {"points", rows}}.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic focus decoding toolkit"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Run configuration file");
    sub->add_option("--provider", common.provider, "builtin | builtin-identity | trace:PATH");
    sub->add_option("--workers", common.workers, "Parallel generation workers")->check(CLI::PositiveNumber);
  };

  std::string out;
  auto* gen = app.add_subcommand("generate", "Decode prompts and write JSONL generations");
  add_common(gen);
  gen->add_option("--out", out, "Output JSONL path (a .config.toml sidecar is written beside it)");

  std::string write_config;
  auto* cal = app.add_subcommand("calibrate", "Collect KA samples and solve T0");
  add_common(cal);
  cal->add_option("--write-config", write_config, "Write the resolved config with the solved t0");

  std::string metrics_in;
  auto* met = app.add_subcommand("metrics", "Diversity metrics over a generations file");
  met->add_option("generations", metrics_in, "Generations JSONL")->required();

  std::string trace_in;
  bool per_step = false;
  auto* info = app.add_subcommand("trace-info", "Summarize a trace file");
  info->add_option("trace", trace_in, "Trace file (binary or JSONL)")->required();
  info->add_flag("--per-step", per_step, "Include per-step KA");

  std::size_t rec_steps = 32;
  std::string rec_out;
  bool rec_jsonl = false;
  auto* rec = app.add_subcommand("record-trace", "Greedy-decode the first prompt into a trace file");
  add_common(rec);
  rec->add_option("--steps", rec_steps, "Steps to record");
  rec->add_option("--out", rec_out, "Trace path")->required();
  rec->add_flag("--jsonl", rec_jsonl, "Write the JSONL encoding instead of binary");

  double params = 0, dmodel = 0, vocab = 0, layers = 0;
  std::string lengths = "32,64,128";
  bool tied = false;
  auto* fl = app.add_subcommand("flops", "Per-token decoding cost against the baseline");
  fl->add_option("--params", params, "Parameter count")->required();
  fl->add_option("--dmodel", dmodel, "Hidden width")->required();
  fl->add_option("--vocab", vocab, "Vocabulary size")->required();
  fl->add_option("--layers", layers, "Number of layers")->required();
  fl->add_option("--lengths", lengths, "Comma-separated context lengths");
  fl->add_flag("--tied", tied, "Input embedding is tied to the LM head");

  std::size_t demo_steps = 20, seq_len = 16;
  double lr = 0.05, demo_sigma = 0.5;
  std::uint64_t demo_seed = 7;
  auto* demo = app.add_subcommand("dft-demo", "Focused training on the built-in model");
  demo->add_option("--steps", demo_steps, "SGD steps");
  demo->add_option("--lr", lr, "Learning rate");
  demo->add_option("--seq-len", seq_len, "Training sequence length");
  demo->add_option("--sigma", demo_sigma, "Exponential half-life for KA temperatures");
  demo->add_option("--seed", demo_seed, "Model and corpus seed");

  std::string sigmas = "0.25,0.5,1,2";
  std::string grid_out;
  auto* grid = app.add_subcommand("grid-search", "Sweep sigma and report metrics per point");
  add_common(grid);
  grid->add_option("--sigmas", sigmas, "Comma-separated sigma values");
  grid->add_option("--out-dir", grid_out, "Write generations and sidecars per point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", "", e.what(), 2);
  }

  try {
    if (*gen) return cmd_generate(common, out);
    if (*cal) return cmd_calibrate(common, write_config);
    if (*met) return cmd_metrics(metrics_in);
    if (*info) return cmd_trace_info(trace_in, per_step);
    if (*rec) return cmd_record_trace(common, rec_steps, rec_out, rec_jsonl);
    if (*fl) return cmd_flops(params, dmodel, vocab, layers, lengths, tied);
    if (*demo) return cmd_dft_demo(demo_steps, lr, seq_len, demo_sigma, demo_seed);
    if (*grid) return cmd_grid_search(common, sigmas, grid_out);
  } catch (const ConfigError& e) {
    return report_error("config", e.key(), e.what(), 2);
  } catch (const Error& e) {
    return report_error(std::string(to_string(e.kind())), "", e.what(), 1);
  } catch (const std::exception& e) {
    return report_error("internal", "", e.what(), 1);
  }
  return 0;
}
