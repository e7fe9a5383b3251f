// SPDX-License-Identifier: Apache-2.0
#pragma once

// Telemetry data model, JSON Lines wire format and per-run traces.
//
// One record per line, schema_version 1:
//
//   {"schema_version":1,"run_id":"r1","step":0,"epoch":0,"layer":"fc1.weight",
//    "kind":"gradients","values":[0.1,-0.2]}
//   {"schema_version":1,"run_id":"r1","step":0,"layer":"fc1.weight",
//    "kind":"weights","summary":{"count":2,"max":..,"min":..,"median":..,
//    "mean":..,"var":..,"std":..,"skew":..,"kurt":..,"spar":..}}
//   {"schema_version":1,"run_id":"r1","step":3,"layer":"_","kind":"metric",
//    "metric":{"name":"train_loss","value":115.0}}
//
// "epoch" is optional. Metric records always use the reserved layer "_".
// Unknown keys are ignored so newer emitters stay readable.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "trainwatch/error.hpp"
#include "trainwatch/io.hpp"
#include "trainwatch/stats.hpp"

namespace trainwatch {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kMetricLayer = "_";

enum class TensorKind { weights, biases, gradients, metric };

inline std::string_view to_string(TensorKind k) noexcept {
  switch (k) {
    case TensorKind::weights: return "weights";
    case TensorKind::biases: return "biases";
    case TensorKind::gradients: return "gradients";
    case TensorKind::metric: return "metric";
  }
  return "?";
}

inline std::optional<TensorKind> parse_tensor_kind(std::string_view s) noexcept {
  if (s == "weights") return TensorKind::weights;
  if (s == "biases") return TensorKind::biases;
  if (s == "gradients") return TensorKind::gradients;
  if (s == "metric") return TensorKind::metric;
  return std::nullopt;
}

struct MetricValue {
  std::string name;
  double value = 0.0;
  friend bool operator==(const MetricValue&, const MetricValue&) = default;
};

using Payload = std::variant<std::vector<double>, LayerStats, MetricValue>;

struct TelemetryRecord {
  int schema_version = kSchemaVersion;
  std::string run_id;
  std::uint64_t step = 0;
  std::optional<std::uint64_t> epoch;
  std::string layer;
  TensorKind kind = TensorKind::weights;
  Payload payload;

  bool has_values() const noexcept { return std::holds_alternative<std::vector<double>>(payload); }
  bool has_summary() const noexcept { return std::holds_alternative<LayerStats>(payload); }
  bool is_metric() const noexcept { return std::holds_alternative<MetricValue>(payload); }

  friend bool operator==(const TelemetryRecord&, const TelemetryRecord&) = default;
};

inline TelemetryRecord make_values_record(std::string run_id, std::uint64_t step, std::optional<std::uint64_t> epoch,
                                          std::string layer, TensorKind kind, std::vector<double> values) {
  return TelemetryRecord{kSchemaVersion, std::move(run_id), step, epoch, std::move(layer), kind, std::move(values)};
}

inline TelemetryRecord make_summary_record(std::string run_id, std::uint64_t step, std::optional<std::uint64_t> epoch,
                                           std::string layer, TensorKind kind, const LayerStats& stats) {
  return TelemetryRecord{kSchemaVersion, std::move(run_id), step, epoch, std::move(layer), kind, stats};
}

inline TelemetryRecord make_metric_record(std::string run_id, std::uint64_t step, std::optional<std::uint64_t> epoch,
                                          std::string name, double value) {
  return TelemetryRecord{kSchemaVersion,         std::move(run_id),
                         step,                   epoch,
                         std::string(kMetricLayer), TensorKind::metric,
                         MetricValue{std::move(name), value}};
}

namespace detail {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Byte offset of `"key"` in the raw line, searching after `from`.
inline std::size_t key_offset(std::string_view line, std::string_view key, std::size_t from = 0) {
  const std::string quoted = "\"" + std::string(key) + "\"";
  const std::size_t pos = line.find(quoted, from);
  return pos == std::string_view::npos ? 0 : pos;
}

class RecordReader {
 public:
  explicit RecordReader(std::string_view line) : line_(line) {}

  [[noreturn]] void fail(const std::string& message, std::string_view field, std::string_view parent = {}) const {
    std::size_t off = 0;
    if (!parent.empty()) {
      off = key_offset(line_, parent);
      off = key_offset(line_, field, off);
    } else {
      off = key_offset(line_, field);
    }
    const std::string name = parent.empty() ? std::string(field) : std::string(parent) + "." + std::string(field);
    throw ParseError(message, off, name);
  }

  const json& require(const json& obj, std::string_view field, std::string_view parent = {}) const {
    const auto it = obj.find(field);
    if (it == obj.end()) {
      const std::size_t off = parent.empty() ? 0 : key_offset(line_, parent);
      throw ParseError("missing required field", off,
                       parent.empty() ? std::string(field) : std::string(parent) + "." + std::string(field));
    }
    return *it;
  }

  double finite_number(const json& v, std::string_view field, std::string_view parent = {}) const {
    if (v.is_string()) {
      const auto& s = v.get_ref<const std::string&>();
      if (looks_non_finite(s)) fail("non-finite number", field, parent);
      fail("expected a number", field, parent);
    }
    if (!v.is_number()) fail("expected a number", field, parent);
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail("non-finite number", field, parent);
    return x;
  }

  std::uint64_t unsigned_integer(const json& v, std::string_view field, std::string_view parent = {}) const {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) fail("must be non-negative", field, parent);
    fail("expected a non-negative integer", field, parent);
  }

  const std::string& string(const json& v, std::string_view field, std::string_view parent = {}) const {
    if (!v.is_string()) fail("expected a string", field, parent);
    return v.get_ref<const std::string&>();
  }

  static bool looks_non_finite(std::string_view s) noexcept {
    std::string lower;
    for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (!lower.empty() && (lower[0] == '-' || lower[0] == '+')) lower.erase(0, 1);
    return lower == "nan" || lower == "inf" || lower == "infinity";
  }

 private:
  std::string_view line_;
};

inline LayerStats parse_summary(const RecordReader& rd, const json& obj) {
  if (!obj.is_object()) rd.fail("expected an object", "summary");
  LayerStats s;
  const json& count = rd.require(obj, "count", "summary");
  s.count = static_cast<std::size_t>(rd.unsigned_integer(count, "count", "summary"));
  if (s.count == 0) rd.fail("count must be positive", "count", "summary");
  auto num = [&](std::string_view f) { return rd.finite_number(rd.require(obj, f, "summary"), f, "summary"); };
  s.max = num("max");
  s.min = num("min");
  s.median = num("median");
  s.mean = num("mean");
  s.var = num("var");
  s.std = num("std");
  s.skew = num("skew");
  s.kurt = num("kurt");
  s.spar = num("spar");
  if (s.var < 0.0) rd.fail("must be non-negative", "var", "summary");
  if (s.std < 0.0) rd.fail("must be non-negative", "std", "summary");
  if (s.spar < 0.0 || s.spar > 1.0) rd.fail("must lie in [0,1]", "spar", "summary");
  if (s.min > s.max) rd.fail("min exceeds max", "min", "summary");
  if (s.median < s.min || s.median > s.max) rd.fail("median outside [min,max]", "median", "summary");
  if (s.mean < s.min || s.mean > s.max) rd.fail("mean outside [min,max]", "mean", "summary");
  // Emitters may reduce in single precision, so std/var agreement is checked loosely.
  const double root = std::sqrt(s.var);
  if (std::abs(root - s.std) > 1e-6 * std::max(1.0, root)) rd.fail("std inconsistent with var", "std", "summary");
  return s;
}

}  // namespace detail

/// Parses one wire-format line. Errors carry the byte offset and field name.
inline TelemetryRecord parse_record(std::string_view line) {
  using detail::json;
  json doc;
  try {
    doc = json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    const std::size_t off = e.byte > 0 ? e.byte - 1 : 0;
    // Bare NaN / Infinity literals are not JSON; report them for what they are.
    std::size_t tok = off;
    while (tok > 0 && std::isalpha(static_cast<unsigned char>(line[tok - 1]))) --tok;
    if (tok > 0 && (line[tok - 1] == '-' || line[tok - 1] == '+')) --tok;
    std::size_t end = tok;
    while (end < line.size() && (std::isalnum(static_cast<unsigned char>(line[end])) || line[end] == '-' ||
                                 line[end] == '+'))
      ++end;
    if (end > tok && detail::RecordReader::looks_non_finite(line.substr(tok, end - tok)))
      throw ParseError("non-finite number", tok, "");
    throw ParseError("malformed JSON", off, "");
  } catch (const json::out_of_range& e) {
    // Number literals beyond double range (e.g. 1e999) overflow to infinity.
    throw ParseError("non-finite number", 0, "");
  }
  if (!doc.is_object()) throw ParseError("record must be a JSON object", 0, "");

  const detail::RecordReader rd(line);
  TelemetryRecord r;

  const json& version = rd.require(doc, "schema_version");
  const std::uint64_t v = rd.unsigned_integer(version, "schema_version");
  if (v != static_cast<std::uint64_t>(kSchemaVersion)) rd.fail("unsupported schema_version", "schema_version");
  r.schema_version = static_cast<int>(v);

  r.run_id = rd.string(rd.require(doc, "run_id"), "run_id");
  r.step = rd.unsigned_integer(rd.require(doc, "step"), "step");
  if (auto it = doc.find("epoch"); it != doc.end() && !it->is_null()) r.epoch = rd.unsigned_integer(*it, "epoch");
  r.layer = rd.string(rd.require(doc, "layer"), "layer");
  if (r.layer.empty()) rd.fail("layer must be non-empty", "layer");

  const std::string& kind_text = rd.string(rd.require(doc, "kind"), "kind");
  const auto kind = parse_tensor_kind(kind_text);
  if (!kind) rd.fail("unknown kind '" + kind_text + "'", "kind");
  r.kind = *kind;

  const bool has_values = doc.contains("values");
  const bool has_summary = doc.contains("summary");
  const bool has_metric = doc.contains("metric");

  if (r.kind == TensorKind::metric) {
    if (has_values || has_summary) rd.fail("metric records carry only a metric payload", has_values ? "values" : "summary");
    if (r.layer != kMetricLayer) rd.fail("metric records must use layer \"_\"", "layer");
    const json& m = rd.require(doc, "metric");
    if (!m.is_object()) rd.fail("expected an object", "metric");
    MetricValue mv;
    mv.name = rd.string(rd.require(m, "name", "metric"), "name", "metric");
    if (mv.name.empty()) rd.fail("metric name must be non-empty", "name", "metric");
    mv.value = rd.finite_number(rd.require(m, "value", "metric"), "value", "metric");
    r.payload = std::move(mv);
    return r;
  }

  if (has_metric) rd.fail("tensor records cannot carry a metric payload", "metric");
  if (r.layer == kMetricLayer) rd.fail("layer \"_\" is reserved for metrics", "layer");
  if (has_values == has_summary) {
    if (has_values) rd.fail("exactly one of values or summary is allowed", "summary");
    throw ParseError("missing required field", 0, "values");
  }
  if (has_values) {
    const json& arr = doc.at("values");
    if (!arr.is_array()) rd.fail("expected an array", "values");
    if (arr.empty()) rd.fail("values must be non-empty", "values");
    std::vector<double> values;
    values.reserve(arr.size());
    for (const json& x : arr) values.push_back(rd.finite_number(x, "values"));
    r.payload = std::move(values);
  } else {
    r.payload = detail::parse_summary(rd, doc.at("summary"));
  }
  return r;
}

namespace detail {

inline void check_finite_for_output(double x, const char* what) {
  if (!std::isfinite(x)) throw InvalidArgument(std::string("cannot serialize non-finite ") + what);
}

}  // namespace detail

inline nlohmann::ordered_json summary_to_json(const LayerStats& s) {
  nlohmann::ordered_json j;
  j["count"] = s.count;
  j["max"] = s.max;
  j["min"] = s.min;
  j["median"] = s.median;
  j["mean"] = s.mean;
  j["var"] = s.var;
  j["std"] = s.std;
  j["skew"] = s.skew;
  j["kurt"] = s.kurt;
  j["spar"] = s.spar;
  return j;
}

/// One wire-format line, without the trailing newline. Doubles use the
/// shortest text that round-trips exactly.
inline std::string serialize_record(const TelemetryRecord& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = r.schema_version;
  j["run_id"] = r.run_id;
  j["step"] = r.step;
  if (r.epoch) j["epoch"] = *r.epoch;
  j["layer"] = r.layer;
  j["kind"] = std::string(to_string(r.kind));
  if (const auto* v = std::get_if<std::vector<double>>(&r.payload)) {
    for (double x : *v) detail::check_finite_for_output(x, "value");
    j["values"] = *v;
  } else if (const auto* s = std::get_if<LayerStats>(&r.payload)) {
    for (double x : {s->max, s->min, s->median, s->mean, s->var, s->std, s->skew, s->kurt, s->spar})
      detail::check_finite_for_output(x, "summary statistic");
    j["summary"] = summary_to_json(*s);
  } else {
    const auto& m = std::get<MetricValue>(r.payload);
    detail::check_finite_for_output(m.value, "metric");
    j["metric"] = {{"name", m.name}, {"value", m.value}};
  }
  return j.dump();
}

// ---------------------------------------------------------------------------
// Sinks

class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void write(const TelemetryRecord& r) = 0;
  virtual void flush() {}
};

class StreamSink final : public RecordSink {
 public:
  explicit StreamSink(std::ostream& out) : out_(out) {}
  void write(const TelemetryRecord& r) override { out_ << serialize_record(r) << '\n'; }
  void flush() override { out_.flush(); }

 private:
  std::ostream& out_;
};

class VectorSink final : public RecordSink {
 public:
  void write(const TelemetryRecord& r) override { records.push_back(r); }
  std::vector<TelemetryRecord> records;
};

/// Reads every non-blank line of a telemetry file (gzip if "*.gz").
/// Parse errors are re-raised with the 1-based line number prepended.
inline std::vector<TelemetryRecord> read_records(const std::string& path) {
  const auto lines = split_lines(read_file(path));
  std::vector<TelemetryRecord> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(parse_record(lines[i]));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(i + 1) + ": " + e.detail(), e.offset(), e.field());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces

struct StatsPoint {
  std::uint64_t step = 0;
  std::optional<std::uint64_t> epoch;
  LayerStats stats;
  friend bool operator==(const StatsPoint&, const StatsPoint&) = default;
};

struct MetricPoint {
  std::uint64_t step = 0;
  std::optional<std::uint64_t> epoch;
  double value = 0.0;
  friend bool operator==(const MetricPoint&, const MetricPoint&) = default;
};

using StatsSeries = std::vector<StatsPoint>;
using MetricSeries = std::vector<MetricPoint>;

struct StepRange {
  std::uint64_t first = 0;
  std::uint64_t last = 0;
  friend bool operator==(const StepRange&, const StepRange&) = default;
};

/// Immutable per-run view: layer -> kind -> series ordered by step.
class RunTrace {
 public:
  const std::string& run_id() const noexcept { return run_id_; }

  /// Layer names in order of first appearance in the stream.
  const std::vector<std::string>& layer_order() const noexcept { return layer_order_; }

  /// Layers that report `kind`, in first-appearance order.
  std::vector<std::string> layers_with(TensorKind kind) const {
    std::vector<std::string> out;
    for (const auto& name : layer_order_)
      if (series(name, kind) != nullptr) out.push_back(name);
    return out;
  }

  const StatsSeries* series(const std::string& layer, TensorKind kind) const {
    const auto it = layers_.find(layer);
    if (it == layers_.end()) return nullptr;
    const auto jt = it->second.find(kind);
    return jt == it->second.end() ? nullptr : &jt->second;
  }

  const MetricSeries* metric(const std::string& name) const {
    const auto it = metrics_.find(name);
    return it == metrics_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, std::map<TensorKind, StatsSeries>>& layers() const noexcept { return layers_; }
  const std::map<std::string, MetricSeries>& metrics() const noexcept { return metrics_; }
  const std::map<std::uint64_t, StepRange>& epoch_index() const noexcept { return epoch_index_; }

  std::size_t record_count() const noexcept { return record_count_; }
  bool empty() const noexcept { return record_count_ == 0; }

  /// Largest step seen in any series.
  std::uint64_t last_step() const noexcept { return last_step_; }

  friend bool operator==(const RunTrace&, const RunTrace&) = default;

 private:
  friend class TraceBuilder;
  std::string run_id_;
  std::vector<std::string> layer_order_;
  std::map<std::string, std::map<TensorKind, StatsSeries>> layers_;
  std::map<std::string, MetricSeries> metrics_;
  std::map<std::uint64_t, StepRange> epoch_index_;
  std::size_t record_count_ = 0;
  std::uint64_t last_step_ = 0;
};

/// Incremental trace construction (used directly by `watch`).
class TraceBuilder {
 public:
  explicit TraceBuilder(double sparsity_eps = kDefaultSparsityEps) : eps_(sparsity_eps) {}

  void add(const TelemetryRecord& r) {
    if (trace_.record_count_ == 0) {
      trace_.run_id_ = r.run_id;
    } else if (r.run_id != trace_.run_id_) {
      throw InvalidArgument("mixed run_ids in one trace: '" + trace_.run_id_ + "' and '" + r.run_id + "'");
    }

    if (const auto* m = std::get_if<MetricValue>(&r.payload)) {
      auto& series = trace_.metrics_[m->name];
      check_order(series, r.step, "metric '" + m->name + "'");
      series.push_back(MetricPoint{r.step, r.epoch, m->value});
    } else {
      if (r.kind == TensorKind::metric) throw InvalidArgument("metric kind without a metric payload");
      auto [it, inserted] = trace_.layers_.try_emplace(r.layer);
      if (inserted) trace_.layer_order_.push_back(r.layer);
      auto& series = it->second[r.kind];
      check_order(series, r.step, "layer '" + r.layer + "' kind " + std::string(to_string(r.kind)));
      LayerStats stats = std::holds_alternative<LayerStats>(r.payload)
                             ? std::get<LayerStats>(r.payload)
                             : compute_stats(std::get<std::vector<double>>(r.payload), eps_);
      series.push_back(StatsPoint{r.step, r.epoch, stats});
    }

    if (r.epoch) {
      auto [it, inserted] = trace_.epoch_index_.try_emplace(*r.epoch, StepRange{r.step, r.step});
      if (!inserted) {
        it->second.first = std::min(it->second.first, r.step);
        it->second.last = std::max(it->second.last, r.step);
      }
    }
    trace_.last_step_ = std::max(trace_.last_step_, r.step);
    ++trace_.record_count_;
  }

  std::size_t size() const noexcept { return trace_.record_count_; }

  /// Copy of the trace so far.
  RunTrace snapshot() const {
    if (trace_.record_count_ == 0) throw InvalidArgument("empty telemetry stream");
    return trace_;
  }

  RunTrace build() && {
    if (trace_.record_count_ == 0) throw InvalidArgument("empty telemetry stream");
    return std::move(trace_);
  }

 private:
  template <typename Series>
  static void check_order(const Series& series, std::uint64_t step, const std::string& what) {
    if (series.empty() || step > series.back().step) return;
    const bool seen = std::binary_search(series.begin(), series.end(), step,
                                         [](const auto& a, const auto& b) { return key(a) < key(b); });
    if (seen) throw InvalidArgument("duplicate record at step " + std::to_string(step) + " for " + what);
    throw InvalidArgument("out-of-order step " + std::to_string(step) + " after " +
                          std::to_string(series.back().step) + " for " + what);
  }
  static std::uint64_t key(std::uint64_t s) noexcept { return s; }
  template <typename Point>
  static std::uint64_t key(const Point& p) noexcept { return p.step; }

  double eps_;
  RunTrace trace_;
};

inline RunTrace build_trace(std::span<const TelemetryRecord> records, double sparsity_eps = kDefaultSparsityEps) {
  TraceBuilder b(sparsity_eps);
  for (const auto& r : records) b.add(r);
  return std::move(b).build();
}

inline RunTrace load_trace(const std::string& path, double sparsity_eps = kDefaultSparsityEps) {
  const auto records = read_records(path);
  return build_trace(records, sparsity_eps);
}

}  // namespace trainwatch
