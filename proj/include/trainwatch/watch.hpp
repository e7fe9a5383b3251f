// SPDX-License-Identifier: Apache-2.0
#pragma once

// Online evaluation of a growing telemetry file.
//
// LineFollower hands out complete lines appended to a file since the last
// poll. TraceWatcher accumulates records and classifies the trace so far at
// each evaluation point of the policy cadence: with Cadence::step that is
// every time a record with a larger step arrives (the previous step is then
// complete), with Cadence::epoch every time a larger epoch starts. The first
// evaluation that satisfies the policy halts. finish() classifies the whole
// stream exactly as analyze would.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trainwatch/error.hpp"
#include "trainwatch/symptoms.hpp"
#include "trainwatch/telemetry.hpp"

namespace trainwatch {

class LineFollower {
 public:
  explicit LineFollower(std::string path) : path_(std::move(path)) {}

  bool exists() const {
    std::ifstream in(path_, std::ios::binary);
    return static_cast<bool>(in);
  }

  /// Complete lines appended since the last call; empty if the file is absent.
  std::vector<std::string> poll() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return {};
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    if (size < offset_) throw IoError("telemetry file " + path_ + " was truncated while being watched");
    if (size == offset_) return {};
    in.seekg(static_cast<std::streamoff>(offset_));
    std::string chunk(size - offset_, '\0');
    in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    chunk.resize(static_cast<std::size_t>(in.gcount()));
    offset_ += chunk.size();

    std::vector<std::string> lines;
    partial_ += chunk;
    std::size_t start = 0;
    for (std::size_t nl; (nl = partial_.find('\n', start)) != std::string::npos; start = nl + 1) {
      std::string line = partial_.substr(start, nl - start);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
    }
    partial_.erase(0, start);
    return lines;
  }

  /// The unterminated last line, if any; consumed by the call.
  std::optional<std::string> take_tail() {
    if (partial_.empty()) return std::nullopt;
    std::string t;
    t.swap(partial_);
    return t;
  }

 private:
  std::string path_;
  std::uint64_t offset_ = 0;
  std::string partial_;
};

struct WatchHalt {
  /// Last complete step at the evaluation that halted.
  std::uint64_t step = 0;
  SymptomFinding trigger;
  std::vector<SymptomFinding> findings;
};

class TraceWatcher {
 public:
  TraceWatcher(ThresholdConfig thresholds, InterruptPolicy policy, CauseTable causes = default_cause_table(),
               std::optional<RunTrace> baseline = std::nullopt)
      : cfg_(std::move(thresholds)), policy_(std::move(policy)), causes_(std::move(causes)), baseline_(std::move(baseline)) {
    cfg_.validate();
    policy_.validate();
    if (cfg_.baseline_mode == BaselineMode::relative && !baseline_)
      throw InvalidArgument("relative mode requires a baseline trace");
  }

  /// Feeds one record. Returns the halt if the evaluation point this record
  /// closes satisfies the policy; the record itself is then not added.
  std::optional<WatchHalt> add(const TelemetryRecord& r) {
    if (halted_) throw InvalidArgument("watcher already halted");
    if (builder_.size() > 0 && closes_window(r)) {
      if (auto h = evaluate()) {
        halted_ = true;
        return h;
      }
    }
    builder_.add(r);
    if (!r.layer.empty() && r.kind != TensorKind::metric) has_tensor_ = true;
    last_step_ = std::max(last_step_, r.step);
    if (r.epoch) last_epoch_ = std::max(last_epoch_.value_or(0), *r.epoch);
    return std::nullopt;
  }

  /// Blank lines are skipped; parse errors carry the 1-based line number.
  std::optional<WatchHalt> add_line(std::string_view line) {
    ++line_no_;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) return std::nullopt;
    TelemetryRecord r;
    try {
      r = parse_record(line);
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no_) + ": " + e.detail(), e.offset(), e.field());
    }
    return add(r);
  }

  /// Findings for everything received; identical to classify on the same records.
  std::vector<SymptomFinding> finish() const {
    const auto trace = builder_.snapshot();
    return classify(trace, baseline_ ? &*baseline_ : nullptr, cfg_, causes_);
  }

  std::size_t evaluations() const noexcept { return evaluations_; }
  std::size_t records() const noexcept { return builder_.size(); }
  std::string run_id() const { return builder_.size() ? builder_.snapshot().run_id() : std::string(); }

 private:
  bool closes_window(const TelemetryRecord& r) const {
    if (policy_.evaluate_every == Cadence::step) return r.step > last_step_;
    return r.epoch && last_epoch_ && *r.epoch > *last_epoch_;
  }

  std::optional<WatchHalt> evaluate() {
    if (!has_tensor_) return std::nullopt;
    ++evaluations_;
    const auto trace = builder_.snapshot();
    auto findings = classify(trace, baseline_ ? &*baseline_ : nullptr, cfg_, causes_);
    auto decision = should_interrupt(findings, policy_);
    if (!decision.halt) return std::nullopt;
    return WatchHalt{last_step_, *decision.trigger, std::move(findings)};
  }

  ThresholdConfig cfg_;
  InterruptPolicy policy_;
  CauseTable causes_;
  std::optional<RunTrace> baseline_;
  TraceBuilder builder_;
  bool has_tensor_ = false;
  bool halted_ = false;
  std::uint64_t last_step_ = 0;
  std::optional<std::uint64_t> last_epoch_;
  std::size_t evaluations_ = 0;
  std::size_t line_no_ = 0;
};

}  // namespace trainwatch
