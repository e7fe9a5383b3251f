// SPDX-License-Identifier: Apache-2.0
// trainwatch command-line tool.
//
//   trainwatch train-toy --out run.jsonl [--config cfg.json] [--inject bug.json] [--seed N]
//   trainwatch inject    --dataset in.csv --bug KIND [params] --seed N --out out.csv
//   trainwatch analyze   --run run.jsonl [--baseline clean.jsonl] [--config cfg.json] [--format text|md|json]
//   trainwatch watch     --run run.jsonl [--policy policy.json] [--interrupt-cmd CMD] ...
//   trainwatch xai attention|gradcam|tsne ...
//   trainwatch report    --findings report.json --out report.md --format md
//
// Exit codes: 0 success / no findings, 2 findings (analyze, watch),
// 3 training diverged (train-toy; telemetry is still written), 1 error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "trainwatch/trainwatch.hpp"

using namespace trainwatch;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitFindings = 2;
constexpr int kExitDiverged = 3;

const std::vector<std::string> kReportFormats{"text", "txt", "md", "markdown", "json"};

/// Output paths must point into an existing directory.
const CLI::Validator kWritablePath(
    [](std::string& p) {
      const auto parent = std::filesystem::path(p).parent_path();
      if (!parent.empty() && !std::filesystem::is_directory(parent)) return "directory does not exist: " + parent.string();
      if (std::filesystem::is_directory(p)) return "is a directory: " + p;
      return std::string();
    },
    "PATH");

nlohmann::json read_json_arg(const std::string& value) {
  const auto text = std::filesystem::exists(value) ? read_file(value) : value;
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(value + ": " + e.what(), e.byte, "");
  }
}

void emit(const std::optional<std::string>& out, const std::string& content) {
  if (out) write_file_atomic(*out, content);
  else std::cout << content << std::flush;
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainArgs {
  std::optional<std::string> config;
  std::optional<std::string> inject;
  std::optional<std::string> dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::string> run_id;
  std::optional<std::string> cadence;
};

int cmd_train_toy(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (a.inject) cfg.train.injection = bug_spec_from_json(read_json_arg(*a.inject));
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.data_seed) cfg.data.seed = *a.data_seed;
  if (a.run_id) cfg.train.run_id = *a.run_id;
  if (a.cadence) cfg.train.cadence = *a.cadence == "step" ? Cadence::step : Cadence::epoch;
  if (a.dataset) cfg.data.csv = *a.dataset;
  cfg.train.validate();

  const Dataset raw = cfg.data.load();
  std::ostringstream buf;
  StreamSink sink(buf);
  int rc = kExitOk;
  std::optional<ToyRun> run;
  try {
    run = run_toy(raw, cfg.train, sink);
  } catch (const TrainingDiverged& e) {
    std::cerr << "trainwatch: " << e.what() << "; telemetry up to the divergence is in " << a.out << '\n';
    rc = kExitDiverged;
  }
  write_file_atomic(a.out, buf.str());
  if (run) {
    for (const auto& n : run->data.notices) std::cerr << "notice: " << n << '\n';
    const auto& m = run->result.train_metrics;
    std::cout << fmt::format("run {}: {} steps, final loss {:.4g}, train accuracy {:.4f}, macro F1 {:.4f}\n",
                             cfg.train.run_id, run->result.steps, run->result.epoch_losses.back(), m.accuracy, m.macro_f1);
    if (run->test_metrics)
      std::cout << fmt::format("held-out accuracy {:.4f}, macro F1 {:.4f}\n", run->test_metrics->accuracy,
                               run->test_metrics->macro_f1);
  }
  return rc;
}

// ---------------------------------------------------------------------------
// inject

struct InjectArgs {
  std::string dataset;
  std::string bug;
  std::optional<std::string> spec;
  std::optional<double> eta;
  bool structured = false;
  std::optional<std::string> class_map;
  std::optional<double> tau;
  std::optional<double> drift_fraction;
  std::optional<std::string> flip_rule;
  std::optional<std::string> drift_mode;
  std::optional<double> ood_fraction;
  std::vector<double> shift;
  std::vector<std::string> omit;
  std::uint64_t seed = 0;
  std::string out;
  std::optional<std::string> test_out;
  std::string label_column = "label";
  std::optional<std::string> timestamp_column;
};

BugSpec spec_from_flags(const InjectArgs& a) {
  if (a.spec) {
    auto s = bug_spec_from_json(read_json_arg(*a.spec));
    s.seed = a.seed;
    return s;
  }
  BugSpec s;
  s.kind = *parse_bug_kind(a.bug);
  s.seed = a.seed;
  s.eta = a.eta;
  if (a.structured) s.structured = true;
  if (a.class_map) {
    std::stringstream ss(*a.class_map);
    for (std::string pair; std::getline(ss, pair, ',');) {
      const auto colon = pair.find(':');
      if (colon == std::string::npos) throw InvalidArgument("--class-map entries look like FROM:TO");
      s.class_map[std::stoi(pair.substr(0, colon))] = std::stoi(pair.substr(colon + 1));
    }
  }
  s.tau = a.tau;
  s.drift_fraction = a.drift_fraction;
  if (a.flip_rule) s.flip_rule = FlipRule::parse(*a.flip_rule);
  if (a.drift_mode) s.drift_mode = *a.drift_mode == "synthetic" ? DriftMode::synthetic : DriftMode::chronological;
  s.ood_fraction = a.ood_fraction;
  if (!a.shift.empty()) s.shift = a.shift;
  for (const auto& op : a.omit) s.omitted_ops.insert(*parse_preprocess_op(op));
  s.validate();
  return s;
}

int cmd_inject(const InjectArgs& a) {
  const auto spec = spec_from_flags(a);
  if (spec.kind == BugKind::concept_drift && !a.test_out)
    throw InvalidArgument("concept_drift writes a train and a test split; pass --test-out");
  CsvOptions opt{a.label_column, a.timestamp_column};
  const auto ds = read_csv(a.dataset, opt);
  const auto res = apply_bug(ds, spec);
  for (const auto& n : res.notices) std::cerr << "notice: " << n << '\n';
  write_file_atomic(a.out, [&](std::ostream& o) { write_csv(o, res.data, opt); });
  if (a.test_out && res.test) write_file_atomic(*a.test_out, [&](std::ostream& o) { write_csv(o, *res.test, opt); });
  std::cout << fmt::format("{}: {} rows in, {} rows out, {} rows affected\n", to_string(spec.kind), ds.rows(),
                           res.data.rows(), res.affected_rows.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze / watch / report

struct AnalyzeArgs {
  std::string run;
  std::optional<std::string> baseline;
  std::optional<std::string> config;
  std::string format = "text";
  std::optional<std::string> out;
};

ThresholdConfig thresholds_for(const ToolkitConfig& cfg, const std::optional<std::string>& baseline) {
  auto t = cfg.thresholds;
  if (baseline) t.baseline_mode = BaselineMode::relative;
  return t;
}

int cmd_analyze(const AnalyzeArgs& a) {
  const auto cfg = load_config(a.config);
  const auto thresholds = thresholds_for(cfg, a.baseline);
  const auto trace = load_trace(a.run);
  std::optional<RunTrace> base;
  if (a.baseline) base = load_trace(*a.baseline);
  auto findings = classify(trace, base ? &*base : nullptr, thresholds, cfg.cause_table);
  const auto report = make_report(trace.run_id(), std::move(findings), thresholds, cfg.remediations);
  emit(a.out, render_report(report, *parse_report_format(a.format)));
  return report.clean() ? kExitOk : kExitFindings;
}

struct WatchArgs {
  std::string run;
  std::optional<std::string> policy;
  std::optional<std::string> interrupt_cmd;
  double idle_timeout = 10.0;
  int poll_ms = 200;
  std::optional<std::string> out;
  std::string format = "text";
  std::optional<std::string> baseline;
  std::optional<std::string> config;
};

void run_interrupt_hook(const std::string& cmd, const std::string& run_id, const WatchHalt& h,
                        const std::optional<std::string>& report_path) {
  ::setenv("TRAINWATCH_RUN_ID", run_id.c_str(), 1);
  ::setenv("TRAINWATCH_SYMPTOM", std::string(to_string(h.trigger.symptom)).c_str(), 1);
  ::setenv("TRAINWATCH_SEVERITY", std::string(to_string(h.trigger.severity)).c_str(), 1);
  ::setenv("TRAINWATCH_STEP", std::to_string(h.step).c_str(), 1);
  ::setenv("TRAINWATCH_REPORT", report_path.value_or("").c_str(), 1);
  const int status = std::system(cmd.c_str());
  if (status != 0) std::cerr << "trainwatch: interrupt command exited with status " << status << '\n';
}

int cmd_watch(const WatchArgs& a) {
  const auto cfg = load_config(a.config);
  const auto thresholds = thresholds_for(cfg, a.baseline);
  auto policy = cfg.policy;
  if (a.policy) policy = policy_from_json(read_json_arg(*a.policy));
  std::optional<RunTrace> base;
  if (a.baseline) base = load_trace(*a.baseline);
  const auto format = *parse_report_format(a.format);

  TraceWatcher watcher(thresholds, policy, cfg.cause_table, std::move(base));
  LineFollower follower(a.run);
  using clock = std::chrono::steady_clock;
  const auto idle = std::chrono::duration<double>(a.idle_timeout);
  auto last_growth = clock::now();

  auto halt = [&](const WatchHalt& h) {
    const auto run_id = watcher.run_id();
    const auto report = make_report(run_id, h.findings, thresholds, cfg.remediations,
                                    Interruption{h.step, h.trigger.symptom});
    emit(a.out, render_report(report, format));
    std::cerr << fmt::format("trainwatch: halting at step {}: {} ({}, coverage {:.2f})\n", h.step,
                             to_string(h.trigger.symptom), to_string(h.trigger.severity), h.trigger.coverage);
    if (a.interrupt_cmd) run_interrupt_hook(*a.interrupt_cmd, run_id, h, a.out);
    return kExitFindings;
  };

  for (;;) {
    const auto lines = follower.poll();
    if (!lines.empty()) last_growth = clock::now();
    for (const auto& line : lines)
      if (auto h = watcher.add_line(line)) return halt(*h);
    if (clock::now() - last_growth >= idle) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(a.poll_ms));
  }
  if (auto tail = follower.take_tail())
    if (auto h = watcher.add_line(*tail)) return halt(*h);
  if (watcher.records() == 0) throw IoError("no telemetry records arrived in " + a.run);

  const auto trace_run = watcher.run_id();
  const auto report = make_report(trace_run, watcher.finish(), thresholds, cfg.remediations);
  emit(a.out, render_report(report, format));
  return report.clean() ? kExitOk : kExitFindings;
}

struct ReportArgs {
  std::string findings;
  std::optional<std::string> out;
  std::string format = "text";
};

int cmd_report(const ReportArgs& a) {
  const auto report = report_from_json(read_json_arg(a.findings));
  emit(a.out, render_report(report, *parse_report_format(a.format)));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// xai

struct XaiArgs {
  std::string input;
  std::optional<std::string> gradients;
  std::string out;
  std::optional<std::string> mean_out;
  std::optional<std::string> kl_out;
  std::optional<std::string> plot_hook;
  TsneOptions tsne;
  std::optional<double> perplexity;
};

void run_plot_hook(const std::optional<std::string>& hook, const std::string& path) {
  if (!hook) return;
  const std::string cmd = *hook + " '" + path + "'";
  const int status = std::system(cmd.c_str());
  if (status != 0) throw Error(fmt::format("plot hook exited with status {}", status));
}

int cmd_xai_attention(const XaiArgs& a) {
  AttentionTensor t{read_matrices(a.input, "heads")};
  t.validate();
  const auto mean = attention_head_mean(t);
  const Eigen::VectorXd score = token_importance(mean);
  write_file_atomic(a.out, [&](std::ostream& o) {
    o << "token,importance\n";
    for (Eigen::Index i = 0; i < score.size(); ++i) o << fmt::format("{},{}\n", i, score(i));
  });
  if (a.mean_out) write_file_atomic(*a.mean_out, [&](std::ostream& o) { write_matrix_csv(o, mean); });
  run_plot_hook(a.plot_hook, a.out);
  return kExitOk;
}

int cmd_xai_gradcam(const XaiArgs& a) {
  GradcamInput in;
  in.maps = read_matrices(a.input, "maps");
  in.gradients = a.gradients ? read_matrices(*a.gradients, "gradients") : read_matrices(a.input, "gradients");
  in.validate();
  const auto heat = gradcam_map(gradcam_weights(in), in.maps);
  write_file_atomic(a.out, [&](std::ostream& o) { write_matrix_csv(o, heat); });
  run_plot_hook(a.plot_hook, a.out);
  return kExitOk;
}

int cmd_xai_tsne(const XaiArgs& a) {
  const auto blocks = read_matrices(a.input, "points");
  if (blocks.size() != 1) throw InvalidArgument("tsne expects a single points matrix");
  auto opt = a.tsne;
  if (a.perplexity) {
    opt.use_perplexity = true;
    opt.perplexity = *a.perplexity;
  }
  const auto r = tsne_embed(blocks.front(), opt);
  write_file_atomic(a.out, [&](std::ostream& o) { write_matrix_csv(o, r.y); });
  if (a.kl_out)
    write_file_atomic(*a.kl_out, [&](std::ostream& o) {
      o << "iteration,kl\n";
      for (std::size_t i = 0; i < r.kl.size(); ++i) o << fmt::format("{},{}\n", i, r.kl[i]);
    });
  std::cout << fmt::format("final KL {}\n", r.kl.back());
  run_plot_hook(a.plot_hook, a.out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trainwatch: training telemetry diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "trainwatch 0.1.0");

  std::vector<std::string> bug_kinds, ops;
  for (auto k : {BugKind::label_noise, BugKind::class_imbalance, BugKind::concept_drift, BugKind::ood,
                 BugKind::omit_preprocessing})
    bug_kinds.emplace_back(to_string(k));
  for (auto op : kAllPreprocessOps) ops.emplace_back(to_string(op));

  TrainArgs train;
  auto* t = app.add_subcommand("train-toy", "train the toy network and write telemetry JSONL");
  t->add_option("--config", train.config, "config file (default: $TRAINWATCH_CONFIG)")->check(CLI::ExistingFile);
  t->add_option("--inject", train.inject, "bug spec: JSON file or inline JSON");
  t->add_option("--dataset", train.dataset, "train on this CSV instead of the configured data")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "telemetry output path")->required()->check(kWritablePath);
  t->add_option("--seed", train.seed, "training seed");
  t->add_option("--data-seed", train.data_seed, "seed for synthetic data");
  t->add_option("--run-id", train.run_id, "run identifier in the telemetry");
  t->add_option("--cadence", train.cadence, "telemetry cadence")->check(CLI::IsMember({"step", "epoch"}));

  InjectArgs inj;
  auto* i = app.add_subcommand("inject", "inject a data bug into a labeled CSV");
  i->add_option("--dataset", inj.dataset, "input CSV")->required()->check(CLI::ExistingFile);
  auto* bug_opt = i->add_option("--bug", inj.bug, "bug kind")->check(CLI::IsMember(bug_kinds));
  auto* spec_opt = i->add_option("--spec", inj.spec, "bug spec JSON (file or inline) instead of flags");
  bug_opt->excludes(spec_opt);
  i->add_option("--eta", inj.eta, "label noise rate")->check(CLI::Range(0.0, 1.0));
  i->add_flag("--structured", inj.structured, "structured label noise (needs --class-map)");
  i->add_option("--class-map", inj.class_map, "structured noise map, e.g. 1:2,2:1");
  i->add_option("--tau", inj.tau, "imbalance ratio majority/minority")->check(CLI::PositiveNumber);
  i->add_option("--drift-fraction", inj.drift_fraction, "share of rows in the drifted test split")
      ->check(CLI::Range(0.0, 1.0));
  i->add_option("--flip-rule", inj.flip_rule, "label flip rule on the test split, e.g. 'x1>0'");
  i->add_option("--drift-mode", inj.drift_mode, "drift mode")->check(CLI::IsMember({"synthetic", "chronological"}));
  i->add_option("--ood-fraction", inj.ood_fraction, "share of rows replaced by shifted copies")
      ->check(CLI::Range(0.0, 1.0));
  i->add_option("--shift", inj.shift, "OOD shift vector")->delimiter(',');
  i->add_option("--omit", inj.omit, "preprocessing ops to omit")->delimiter(',')->check(CLI::IsMember(ops));
  i->add_option("--seed", inj.seed, "injection seed")->required();
  i->add_option("--out", inj.out, "output CSV")->required()->check(kWritablePath);
  i->add_option("--test-out", inj.test_out, "test split CSV (concept_drift)")->check(kWritablePath);
  i->add_option("--label-column", inj.label_column, "label column name");
  i->add_option("--timestamp-column", inj.timestamp_column, "timestamp column name");

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "classify a finished telemetry file");
  a->add_option("--run", an.run, "telemetry JSONL (.gz accepted)")->required()->check(CLI::ExistingFile);
  a->add_option("--baseline", an.baseline, "clean run; switches to relative mode")->check(CLI::ExistingFile);
  a->add_option("--config", an.config, "config file (default: $TRAINWATCH_CONFIG)")->check(CLI::ExistingFile);
  a->add_option("--format", an.format, "text, md or json")->check(CLI::IsMember(kReportFormats));
  a->add_option("--out", an.out, "write the report here instead of stdout")->check(kWritablePath);

  WatchArgs w;
  auto* wa = app.add_subcommand("watch", "follow a growing telemetry file and halt per policy");
  wa->add_option("--run", w.run, "telemetry JSONL being written")->required();
  wa->add_option("--policy", w.policy, "interruption policy: JSON file or inline JSON");
  wa->add_option("--interrupt-cmd", w.interrupt_cmd, "shell command run on halt");
  wa->add_option("--idle-timeout", w.idle_timeout, "seconds without growth before the stream counts as finished")
      ->check(CLI::NonNegativeNumber);
  wa->add_option("--poll-ms", w.poll_ms, "poll interval in milliseconds")->check(CLI::Range(1, 60000));
  wa->add_option("--out", w.out, "write the report here instead of stdout")->check(kWritablePath);
  wa->add_option("--format", w.format, "text, md or json")->check(CLI::IsMember(kReportFormats));
  wa->add_option("--baseline", w.baseline, "clean run; switches to relative mode")->check(CLI::ExistingFile);
  wa->add_option("--config", w.config, "config file (default: $TRAINWATCH_CONFIG)")->check(CLI::ExistingFile);

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "render a saved report or findings JSON");
  r->add_option("--findings", rep.findings, "report JSON from analyze/watch, or a findings array")
      ->required()
      ->check(CLI::ExistingFile);
  r->add_option("--out", rep.out, "output path (default stdout)")->check(kWritablePath);
  r->add_option("--format", rep.format, "text, md or json")->check(CLI::IsMember(kReportFormats));

  XaiArgs x;
  auto* xai = app.add_subcommand("xai", "attention, GradCAM and t-SNE computations");
  xai->require_subcommand(1);
  auto add_common = [&](CLI::App* sub, const char* input_help) {
    sub->add_option("--input", x.input, input_help)->required()->check(CLI::ExistingFile);
    sub->add_option("--out", x.out, "output CSV")->required()->check(kWritablePath);
    sub->add_option("--plot-hook", x.plot_hook, "command run with the output path after writing");
  };
  auto* att = xai->add_subcommand("attention", "head-mean attention and token importance");
  add_common(att, "attention heads: CSV blocks or JSON (key \"heads\")");
  att->add_option("--mean-out", x.mean_out, "head-mean matrix CSV")->check(kWritablePath);
  auto* gc = xai->add_subcommand("gradcam", "GradCAM heatmap");
  add_common(gc, "feature maps: CSV blocks or JSON (keys \"maps\" and \"gradients\")");
  gc->add_option("--gradients", x.gradients, "gradient blocks, if not inside --input")->check(CLI::ExistingFile);
  auto* ts = xai->add_subcommand("tsne", "exact t-SNE embedding");
  add_common(ts, "points: CSV rows or JSON (key \"points\")");
  ts->add_option("--dims", x.tsne.dims, "embedding dimensions")->check(CLI::Range(1, 3));
  ts->add_option("--sigma", x.tsne.sigma, "global Gaussian bandwidth")->check(CLI::PositiveNumber);
  ts->add_option("--iters", x.tsne.iters, "gradient steps")->check(CLI::Range(0, 100000));
  ts->add_option("--learning-rate", x.tsne.learning_rate, "step size")->check(CLI::PositiveNumber);
  ts->add_option("--seed", x.tsne.seed, "initialization seed");
  ts->add_option("--perplexity", x.perplexity, "per-point bandwidths by perplexity (extension)")
      ->check(CLI::PositiveNumber);
  ts->add_option("--kl-out", x.kl_out, "KL per iteration CSV")->check(kWritablePath);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitError;
  }

  try {
    if (*t) return cmd_train_toy(train);
    if (*i) {
      if (inj.bug.empty() && !inj.spec) throw InvalidArgument("inject needs --bug or --spec");
      return cmd_inject(inj);
    }
    if (*a) return cmd_analyze(an);
    if (*wa) return cmd_watch(w);
    if (*r) return cmd_report(rep);
    if (*att) return cmd_xai_attention(x);
    if (*gc) return cmd_xai_gradcam(x);
    if (*ts) return cmd_xai_tsne(x);
  } catch (const std::exception& e) {
    std::cerr << "trainwatch: error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
