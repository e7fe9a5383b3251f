// SPDX-License-Identifier: Apache-2.0
#pragma once

// Symptom catalog, per-run classification and the interruption policy.
//
// Each detector reduces one layer's series to a run statistic and compares
// it with a threshold; a symptom is reported when the affected fraction of
// eligible layers reaches layer_coverage_min. Run statistics:
//
//   weights / biases   value at the last recorded step (the trained state)
//   gradients          aggregated over all recorded steps (see each detector)
//   loss               per-epoch series of cfg.loss_metric
//
// Relative mode compares against a baseline run. A "greater than" rule uses
// max(threshold, margin * baseline) and also requires the run to be strictly
// worse than the baseline; "less than" rules mirror this with
// min(threshold, baseline / margin). A trace classified against itself
// therefore never produces findings, and relative mode only ever removes
// findings that absolute mode would report for the same run (HigherLoss is
// the exception: it exists only in relative mode).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "trainwatch/error.hpp"
#include "trainwatch/stats.hpp"
#include "trainwatch/telemetry.hpp"

namespace trainwatch {

enum class Symptom {
  NearZeroBiases,
  SmallerWeights,
  GradientInstability,
  SlowConvergence,
  ExtremeBiasValues,
  SkewedParameterDistribution,
  AbnormalWeightVariance,
  GradientSkewness,
  OverfittingBias,
  ExtremeWeights,
  SkewedBiasDistribution,
  SparseParameterUpdates,
  VanishingGradients,
  HigherLoss,
  ExplodingGradients,
  HighWeightVariance,
};

inline constexpr std::array<Symptom, 16> kAllSymptoms{
    Symptom::NearZeroBiases,         Symptom::SmallerWeights,          Symptom::GradientInstability,
    Symptom::SlowConvergence,        Symptom::ExtremeBiasValues,        Symptom::SkewedParameterDistribution,
    Symptom::AbnormalWeightVariance, Symptom::GradientSkewness,         Symptom::OverfittingBias,
    Symptom::ExtremeWeights,         Symptom::SkewedBiasDistribution,   Symptom::SparseParameterUpdates,
    Symptom::VanishingGradients,     Symptom::HigherLoss,               Symptom::ExplodingGradients,
    Symptom::HighWeightVariance};

inline std::string_view to_string(Symptom s) noexcept {
  switch (s) {
    case Symptom::NearZeroBiases: return "NearZeroBiases";
    case Symptom::SmallerWeights: return "SmallerWeights";
    case Symptom::GradientInstability: return "GradientInstability";
    case Symptom::SlowConvergence: return "SlowConvergence";
    case Symptom::ExtremeBiasValues: return "ExtremeBiasValues";
    case Symptom::SkewedParameterDistribution: return "SkewedParameterDistribution";
    case Symptom::AbnormalWeightVariance: return "AbnormalWeightVariance";
    case Symptom::GradientSkewness: return "GradientSkewness";
    case Symptom::OverfittingBias: return "OverfittingBias";
    case Symptom::ExtremeWeights: return "ExtremeWeights";
    case Symptom::SkewedBiasDistribution: return "SkewedBiasDistribution";
    case Symptom::SparseParameterUpdates: return "SparseParameterUpdates";
    case Symptom::VanishingGradients: return "VanishingGradients";
    case Symptom::HigherLoss: return "HigherLoss";
    case Symptom::ExplodingGradients: return "ExplodingGradients";
    case Symptom::HighWeightVariance: return "HighWeightVariance";
  }
  return "?";
}

inline std::optional<Symptom> parse_symptom(std::string_view s) noexcept {
  for (Symptom x : kAllSymptoms)
    if (to_string(x) == s) return x;
  return std::nullopt;
}

enum class Cause { label_noise, class_imbalance, concept_drift, missing_preprocessing };

inline constexpr std::array<Cause, 4> kAllCauses{Cause::label_noise, Cause::class_imbalance, Cause::concept_drift,
                                                 Cause::missing_preprocessing};

inline std::string_view to_string(Cause c) noexcept {
  switch (c) {
    case Cause::label_noise: return "label_noise";
    case Cause::class_imbalance: return "class_imbalance";
    case Cause::concept_drift: return "concept_drift";
    case Cause::missing_preprocessing: return "missing_preprocessing";
  }
  return "?";
}

inline std::optional<Cause> parse_cause(std::string_view s) noexcept {
  for (Cause c : kAllCauses)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

enum class Severity { info, warning, critical };

inline std::string_view to_string(Severity s) noexcept {
  switch (s) {
    case Severity::info: return "info";
    case Severity::warning: return "warning";
    case Severity::critical: return "critical";
  }
  return "?";
}

inline std::optional<Severity> parse_severity(std::string_view s) noexcept {
  if (s == "info") return Severity::info;
  if (s == "warning") return Severity::warning;
  if (s == "critical") return Severity::critical;
  return std::nullopt;
}

enum class CauseStrength { weak, moderate, strong };

inline std::string_view to_string(CauseStrength s) noexcept {
  switch (s) {
    case CauseStrength::weak: return "weak";
    case CauseStrength::moderate: return "moderate";
    case CauseStrength::strong: return "strong";
  }
  return "?";
}

enum class BaselineMode { absolute, relative };

inline std::string_view to_string(BaselineMode m) noexcept {
  return m == BaselineMode::absolute ? "absolute" : "relative";
}

enum class DataType { any, code, text, metric };

inline std::string_view to_string(DataType d) noexcept {
  switch (d) {
    case DataType::any: return "any";
    case DataType::code: return "code";
    case DataType::text: return "text";
    case DataType::metric: return "metric";
  }
  return "?";
}

inline std::optional<DataType> parse_data_type(std::string_view s) noexcept {
  if (s == "any") return DataType::any;
  if (s == "code") return DataType::code;
  if (s == "text") return DataType::text;
  if (s == "metric") return DataType::metric;
  return std::nullopt;
}

struct ThresholdConfig {
  double near_zero_bias_abs = 0.01;
  /// Healthy bias magnitude on code data; reported for context, never used to flag.
  double healthy_bias_abs = 0.5;
  double small_weight_mean_abs = 0.05;
  /// Gradient span: smallest magnitude at or below 10^-(orders+1), largest at or above 1.
  double grad_instability_span_orders = 8.0;
  double weight_var_hi = 1.5;
  double grad_skew_hi = 1.0;
  double overfit_bias_median = 0.5;
  double extreme_weight_abs = 1.0;
  double extreme_bias_range = 1.0;
  double sparse_update_frac = 0.5;
  double vanish_ratio = 1e-4;
  double loss_ratio_hi = 1.5;
  double explode_grad_abs = 2.0;
  double weight_var_extreme = 3.0;
  double convergence_delta = 1e-3;
  int convergence_patience_epochs = 2;
  double layer_coverage_min = 0.20;
  BaselineMode baseline_mode = BaselineMode::absolute;

  /// Skew / excess-kurtosis limits of the parameter shape detectors.
  double param_skew_max = 1.0;
  double param_kurt_max = 3.0;
  /// Relative mode: how much worse than the baseline a statistic must be.
  double baseline_margin = 1.5;
  /// Any evidence magnitude at or above this marks a finding critical.
  double critical_magnitude = 1e6;
  std::string loss_metric = "train_loss";
  DataType data_type = DataType::any;

  friend bool operator==(const ThresholdConfig&, const ThresholdConfig&) = default;

  void validate() const {
    const std::pair<const char*, double> positive[] = {
        {"near_zero_bias_abs", near_zero_bias_abs},
        {"healthy_bias_abs", healthy_bias_abs},
        {"small_weight_mean_abs", small_weight_mean_abs},
        {"grad_instability_span_orders", grad_instability_span_orders},
        {"weight_var_hi", weight_var_hi},
        {"grad_skew_hi", grad_skew_hi},
        {"overfit_bias_median", overfit_bias_median},
        {"extreme_weight_abs", extreme_weight_abs},
        {"extreme_bias_range", extreme_bias_range},
        {"sparse_update_frac", sparse_update_frac},
        {"vanish_ratio", vanish_ratio},
        {"loss_ratio_hi", loss_ratio_hi},
        {"explode_grad_abs", explode_grad_abs},
        {"weight_var_extreme", weight_var_extreme},
        {"convergence_delta", convergence_delta},
        {"layer_coverage_min", layer_coverage_min},
        {"param_skew_max", param_skew_max},
        {"param_kurt_max", param_kurt_max},
        {"baseline_margin", baseline_margin},
        {"critical_magnitude", critical_magnitude}};
    for (const auto& [name, v] : positive)
      if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument(std::string("threshold ") + name + " must be positive");
    if (convergence_patience_epochs < 1) throw InvalidArgument("convergence_patience_epochs must be at least 1");
    if (layer_coverage_min > 1.0) throw InvalidArgument("layer_coverage_min must lie in (0,1]");
    if (sparse_update_frac > 1.0) throw InvalidArgument("sparse_update_frac must lie in (0,1]");
    if (baseline_margin < 1.0) throw InvalidArgument("baseline_margin must be at least 1");
    if (loss_metric.empty()) throw InvalidArgument("loss_metric must be non-empty");
  }
};

// ---------------------------------------------------------------------------
// Findings

struct Measurement {
  std::string statistic;
  double value = 0.0;
  double threshold = 0.0;
  std::optional<double> baseline;
  friend bool operator==(const Measurement&, const Measurement&) = default;
};

struct LayerEvidence {
  std::string layer;
  std::uint64_t first_step = 0;
  std::vector<Measurement> measurements;
  friend bool operator==(const LayerEvidence&, const LayerEvidence&) = default;
};

struct SuspectedCause {
  Cause cause = Cause::label_noise;
  /// Share of affected runs in the association table, in percent.
  double association = 0.0;
  CauseStrength strength = CauseStrength::weak;
  friend bool operator==(const SuspectedCause&, const SuspectedCause&) = default;
};

struct SymptomFinding {
  Symptom symptom = Symptom::NearZeroBiases;
  std::vector<LayerEvidence> affected_layers;
  std::size_t eligible_layers = 0;
  double coverage = 0.0;
  std::uint64_t first_step = 0;
  std::vector<SuspectedCause> suspected_causes;
  Severity severity = Severity::warning;
  friend bool operator==(const SymptomFinding&, const SymptomFinding&) = default;
};

/// Severity desc, coverage desc, then catalog order.
inline bool finding_precedes(const SymptomFinding& a, const SymptomFinding& b) noexcept {
  if (a.severity != b.severity) return a.severity > b.severity;
  if (a.coverage != b.coverage) return a.coverage > b.coverage;
  return a.symptom < b.symptom;
}

// ---------------------------------------------------------------------------
// Cause association table

/// symptom -> data type -> cause -> percentage of affected runs.
class CauseTable {
 public:
  using Row = std::map<Cause, double>;

  void set(Symptom s, DataType type, Cause c, double percent) {
    if (!(percent >= 0.0 && percent <= 100.0)) throw InvalidArgument("association percentage outside [0,100]");
    table_[s][type][c] = percent;
  }

  /// Percentages for `s`: the `preferred` data type when it has an entry,
  /// else the union over all data types (largest percentage wins).
  Row lookup(Symptom s, DataType preferred) const {
    const auto it = table_.find(s);
    if (it == table_.end()) return {};
    if (preferred != DataType::any) {
      const auto jt = it->second.find(preferred);
      if (jt != it->second.end()) return jt->second;
    }
    Row merged;
    for (const auto& [type, row] : it->second)
      for (const auto& [cause, pct] : row) merged[cause] = std::max(merged[cause], pct);
    return merged;
  }

  std::vector<SuspectedCause> attribute(Symptom s, DataType preferred) const {
    std::vector<SuspectedCause> out;
    for (const auto& [cause, pct] : lookup(s, preferred)) out.push_back({cause, pct, strength_of(pct)});
    std::stable_sort(out.begin(), out.end(), [](const SuspectedCause& a, const SuspectedCause& b) {
      if (a.association != b.association) return a.association > b.association;
      return a.cause < b.cause;
    });
    return out;
  }

  static CauseStrength strength_of(double percent) noexcept {
    if (percent >= 70.0) return CauseStrength::strong;
    if (percent >= 40.0) return CauseStrength::moderate;
    return CauseStrength::weak;
  }

  /// {"Symptom": {"code": {"label_noise": 80.0, ...}, ...}, ...}
  static CauseTable from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidArgument("cause table must be a JSON object");
    CauseTable t;
    for (const auto& [sname, by_type] : j.items()) {
      const auto s = parse_symptom(sname);
      if (!s) throw InvalidArgument("cause table: unknown symptom '" + sname + "'");
      if (!by_type.is_object()) throw InvalidArgument("cause table: entry for " + sname + " must be an object");
      for (const auto& [tname, row] : by_type.items()) {
        const auto type = parse_data_type(tname);
        if (!type) throw InvalidArgument("cause table: unknown data type '" + tname + "'");
        if (!row.is_object()) throw InvalidArgument("cause table: row " + sname + "." + tname + " must be an object");
        for (const auto& [cname, pct] : row.items()) {
          const auto c = parse_cause(cname);
          if (!c) throw InvalidArgument("cause table: unknown cause '" + cname + "'");
          if (!pct.is_number()) throw InvalidArgument("cause table: percentage must be a number");
          t.set(*s, *type, *c, pct.get<double>());
        }
      }
    }
    return t;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [s, by_type] : table_) {
      nlohmann::ordered_json types = nlohmann::ordered_json::object();
      for (const auto& [type, row] : by_type) {
        nlohmann::ordered_json r = nlohmann::ordered_json::object();
        for (const auto& [c, pct] : row) r[std::string(to_string(c))] = pct;
        types[std::string(to_string(type))] = r;
      }
      j[std::string(to_string(s))] = types;
    }
    return j;
  }

  friend bool operator==(const CauseTable&, const CauseTable&) = default;

 private:
  std::map<Symptom, std::map<DataType, Row>> table_;
};

/// Association percentages observed on the first baseline of each data type.
inline constexpr std::string_view kDefaultCauseTableJson = R"({
  "NearZeroBiases":              {"code":   {"label_noise": 80.00, "class_imbalance": 6.67,  "concept_drift": 56.67}},
  "SmallerWeights":              {"code":   {"label_noise": 86.67, "class_imbalance": 23.33, "concept_drift": 63.33}},
  "GradientInstability":         {"code":   {"label_noise": 73.33, "class_imbalance": 53.33, "concept_drift": 16.67}},
  "SlowConvergence":             {"code":   {"missing_preprocessing": 70.00}},
  "ExtremeBiasValues":           {"code":   {"missing_preprocessing": 56.67}},
  "SkewedParameterDistribution": {"code":   {"missing_preprocessing": 73.33}},
  "AbnormalWeightVariance":      {"text":   {"label_noise": 16.67, "class_imbalance": 36.67, "concept_drift": 93.33}},
  "GradientSkewness":            {"text":   {"label_noise": 56.67, "class_imbalance": 23.33, "concept_drift": 76.67}},
  "OverfittingBias":             {"text":   {"label_noise": 3.33,  "class_imbalance": 86.66, "concept_drift": 43.66}},
  "ExtremeWeights":              {"text":   {"missing_preprocessing": 66.67}},
  "SkewedBiasDistribution":      {"text":   {"missing_preprocessing": 53.33}},
  "SparseParameterUpdates":      {"metric": {"label_noise": 33.33, "class_imbalance": 76.67, "concept_drift": 13.33}},
  "VanishingGradients":          {"metric": {"label_noise": 36.67, "class_imbalance": 83.33, "concept_drift": 16.67}},
  "HigherLoss":                  {"metric": {"label_noise": 23.33, "class_imbalance": 66.67, "concept_drift": 10.00}},
  "ExplodingGradients":          {"metric": {"missing_preprocessing": 70.00}},
  "HighWeightVariance":          {"metric": {"missing_preprocessing": 63.33}}
})";

inline const CauseTable& default_cause_table() {
  static const CauseTable table = CauseTable::from_json(nlohmann::json::parse(kDefaultCauseTableJson));
  return table;
}

inline std::vector<SuspectedCause> attribute_causes(const SymptomFinding& f, const CauseTable& table,
                                                    DataType preferred = DataType::any) {
  return table.attribute(f.symptom, preferred);
}

inline std::vector<SuspectedCause> attribute_causes(const SymptomFinding& f) {
  return attribute_causes(f, default_cause_table());
}

// ---------------------------------------------------------------------------
// Detectors

namespace detail {

enum class Direction { greater, less };

struct Rule {
  std::string statistic;
  Direction direction;
  bool inclusive;
  double threshold;
};

struct RuleOutcome {
  bool violated = false;
  double effective_threshold = 0.0;
};

inline RuleOutcome apply_rule(const Rule& r, double value, std::optional<double> baseline, double margin) {
  RuleOutcome o;
  if (r.direction == Direction::greater) {
    o.effective_threshold = baseline ? std::max(r.threshold, margin * *baseline) : r.threshold;
    o.violated = r.inclusive ? value >= o.effective_threshold : value > o.effective_threshold;
    if (baseline && !(value > *baseline)) o.violated = false;
  } else {
    o.effective_threshold = baseline ? std::min(r.threshold, *baseline / margin) : r.threshold;
    o.violated = r.inclusive ? value <= o.effective_threshold : value < o.effective_threshold;
    if (baseline && !(value < *baseline)) o.violated = false;
  }
  return o;
}

inline bool crosses(const Rule& r, double value, double effective_threshold) {
  if (r.direction == Direction::greater) return r.inclusive ? value >= effective_threshold : value > effective_threshold;
  return r.inclusive ? value <= effective_threshold : value < effective_threshold;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

// A per-layer statistic: the run-level reduction plus the per-step value
// used to locate the first violating step.
struct Statistic {
  std::string name;
  double (*per_step)(const LayerStats&);
  enum class Reduce { last, median, min, max } reduce;
};

inline double reduce_series(const StatsSeries& series, const Statistic& st) {
  switch (st.reduce) {
    case Statistic::Reduce::last: return st.per_step(series.back().stats);
    case Statistic::Reduce::median: {
      std::vector<double> v;
      v.reserve(series.size());
      for (const auto& p : series) v.push_back(st.per_step(p.stats));
      return median_of(std::move(v));
    }
    case Statistic::Reduce::min: {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& p : series) m = std::min(m, st.per_step(p.stats));
      return m;
    }
    case Statistic::Reduce::max: {
      double m = -std::numeric_limits<double>::infinity();
      for (const auto& p : series) m = std::max(m, st.per_step(p.stats));
      return m;
    }
  }
  return 0.0;
}

struct Clause {
  Statistic stat;
  Rule rule;
};

enum class Combine { any, all };

struct LayerDetector {
  Symptom symptom;
  TensorKind kind;
  std::vector<Clause> clauses;
  Combine combine = Combine::any;
};

inline double st_rms(const LayerStats& s) { return s.rms(); }
inline double st_max_abs(const LayerStats& s) { return s.max_abs(); }
inline double st_range(const LayerStats& s) { return s.range(); }
inline double st_var(const LayerStats& s) { return s.var; }
inline double st_skew(const LayerStats& s) { return s.skew; }
inline double st_abs_kurt(const LayerStats& s) { return std::abs(s.kurt); }
inline double st_median(const LayerStats& s) { return s.median; }

inline std::vector<LayerDetector> layer_detectors(const ThresholdConfig& c) {
  using R = Statistic::Reduce;
  using D = Direction;
  const Statistic final_rms{"final_rms", st_rms, R::last};
  const Statistic final_var{"final_var", st_var, R::last};
  const Statistic final_skew{"final_skew", st_skew, R::last};
  const Statistic final_abs_kurt{"final_abs_kurt", st_abs_kurt, R::last};
  const double span_floor = std::pow(10.0, -(c.grad_instability_span_orders + 1.0));
  return {
      {Symptom::NearZeroBiases, TensorKind::biases,
       {{final_rms, {"final_rms", D::less, false, c.near_zero_bias_abs}}}},
      {Symptom::SmallerWeights, TensorKind::weights,
       {{final_rms, {"final_rms", D::less, false, c.small_weight_mean_abs}}}},
      {Symptom::GradientInstability, TensorKind::gradients,
       {{{"min_rms", st_rms, R::min}, {"min_rms", D::less, true, span_floor}},
        {{"max_abs", st_max_abs, R::max}, {"max_abs", D::greater, true, 1.0}}},
       Combine::all},
      {Symptom::ExtremeBiasValues, TensorKind::biases,
       {{{"final_range", st_range, R::last}, {"final_range", D::greater, false, c.extreme_bias_range}}}},
      {Symptom::SkewedParameterDistribution, TensorKind::weights,
       {{final_skew, {"final_skew", D::greater, false, c.param_skew_max}},
        {final_abs_kurt, {"final_abs_kurt", D::greater, false, c.param_kurt_max}}},
       Combine::any},
      {Symptom::AbnormalWeightVariance, TensorKind::weights,
       {{final_var, {"final_var", D::greater, false, c.weight_var_hi}}}},
      {Symptom::GradientSkewness, TensorKind::gradients,
       {{{"median_skew", st_skew, R::median}, {"median_skew", D::greater, false, c.grad_skew_hi}}}},
      {Symptom::OverfittingBias, TensorKind::biases,
       {{{"final_median", st_median, R::last}, {"final_median", D::greater, false, c.overfit_bias_median}}}},
      {Symptom::ExtremeWeights, TensorKind::weights,
       {{{"final_max_abs", st_max_abs, R::last}, {"final_max_abs", D::greater, false, c.extreme_weight_abs}}}},
      {Symptom::SkewedBiasDistribution, TensorKind::biases,
       {{final_skew, {"final_skew", D::greater, false, c.param_skew_max}},
        {final_abs_kurt, {"final_abs_kurt", D::greater, false, c.param_kurt_max}}},
       Combine::all},
      {Symptom::ExplodingGradients, TensorKind::gradients,
       {{{"max_abs", st_max_abs, R::max}, {"max_abs", D::greater, false, c.explode_grad_abs}}}},
      {Symptom::HighWeightVariance, TensorKind::weights,
       {{final_var, {"final_var", D::greater, false, c.weight_var_extreme}}}},
  };
}

inline std::uint64_t first_crossing(const StatsSeries& series, const Clause& cl, double effective_threshold) {
  for (const auto& p : series)
    if (crosses(cl.rule, cl.stat.per_step(p.stats), effective_threshold)) return p.step;
  return series.back().step;
}

// Eligible layers for `kind`: present in the run and, in relative mode, in the
// baseline as well.
inline std::vector<std::string> eligible_layers(const RunTrace& run, const RunTrace* base, TensorKind kind) {
  std::vector<std::string> out;
  for (const auto& name : run.layers_with(kind))
    if (base == nullptr || base->series(name, kind) != nullptr) out.push_back(name);
  return out;
}

struct Partial {
  Symptom symptom;
  std::vector<LayerEvidence> affected;
  std::size_t eligible = 0;
};

inline Partial run_layer_detector(const LayerDetector& det, const RunTrace& run, const RunTrace* base,
                                  const ThresholdConfig& cfg) {
  Partial out{det.symptom, {}, 0};
  const auto layers = eligible_layers(run, base, det.kind);
  out.eligible = layers.size();
  for (const auto& name : layers) {
    const StatsSeries& series = *run.series(name, det.kind);
    const StatsSeries* bseries = base ? base->series(name, det.kind) : nullptr;
    LayerEvidence ev{name, 0, {}};
    bool any = false, all = true;
    std::uint64_t first = 0;
    for (const auto& cl : det.clauses) {
      const double value = reduce_series(series, cl.stat);
      std::optional<double> bvalue;
      if (bseries) bvalue = reduce_series(*bseries, cl.stat);
      const RuleOutcome o = apply_rule(cl.rule, value, bvalue, cfg.baseline_margin);
      if (o.violated) {
        any = true;
        first = std::max(first, first_crossing(series, cl, o.effective_threshold));
        ev.measurements.push_back({cl.rule.statistic, value, o.effective_threshold, bvalue});
      } else {
        all = false;
        if (det.combine == Combine::all) ev.measurements.push_back({cl.rule.statistic, value, o.effective_threshold, bvalue});
      }
    }
    const bool hit = det.combine == Combine::any ? any : all;
    if (!hit) continue;
    if (det.combine == Combine::any) {
      // Earliest step at which any violated clause crossed.
      first = std::numeric_limits<std::uint64_t>::max();
      for (const auto& cl : det.clauses)
        for (const auto& m : ev.measurements)
          if (m.statistic == cl.rule.statistic) first = std::min(first, first_crossing(series, cl, m.threshold));
    }
    ev.first_step = first;
    out.affected.push_back(std::move(ev));
  }
  return out;
}

// SparseParameterUpdates: a layer is affected when its gradient sparsity
// exceeds the threshold on at least half of the recorded steps.
inline Partial run_sparse_detector(const RunTrace& run, const RunTrace* base, const ThresholdConfig& cfg) {
  Partial out{Symptom::SparseParameterUpdates, {}, 0};
  const auto layers = eligible_layers(run, base, TensorKind::gradients);
  out.eligible = layers.size();
  auto median_spar = [](const StatsSeries& s) {
    std::vector<double> v;
    for (const auto& p : s) v.push_back(p.stats.spar);
    return median_of(std::move(v));
  };
  for (const auto& name : layers) {
    const StatsSeries& series = *run.series(name, TensorKind::gradients);
    double threshold = cfg.sparse_update_frac;
    std::optional<double> bmed;
    const double med = median_spar(series);
    if (base) {
      bmed = median_spar(*base->series(name, TensorKind::gradients));
      threshold = std::max(threshold, cfg.baseline_margin * *bmed);
      if (!(med > *bmed)) continue;
    }
    std::size_t sparse_steps = 0;
    std::optional<std::uint64_t> first;
    for (const auto& p : series)
      if (p.stats.spar > threshold) {
        ++sparse_steps;
        if (!first) first = p.step;
      }
    const double frac = static_cast<double>(sparse_steps) / static_cast<double>(series.size());
    if (frac < 0.5) continue;
    LayerEvidence ev{name, *first, {}};
    ev.measurements.push_back({"sparse_step_fraction", frac, 0.5, std::nullopt});
    ev.measurements.push_back({"median_spar", med, threshold, bmed});
    out.affected.push_back(std::move(ev));
  }
  return out;
}

// Norm ratios ||g_layer|| / ||g_last|| on the steps both layers report.
inline std::vector<std::pair<std::uint64_t, double>> norm_ratios(const StatsSeries& layer, const StatsSeries& last) {
  std::vector<std::pair<std::uint64_t, double>> out;
  std::size_t j = 0;
  for (const auto& p : layer) {
    while (j < last.size() && last[j].step < p.step) ++j;
    if (j == last.size()) break;
    if (last[j].step != p.step) continue;
    const double denom = last[j].stats.l2_norm();
    const double num = p.stats.l2_norm();
    if (denom > 0.0) {
      out.emplace_back(p.step, num / denom);
    } else if (num > 0.0) {
      out.emplace_back(p.step, std::numeric_limits<double>::max());
    }
  }
  return out;
}

// Gradient layers that belong to weight tensors, in network order.
inline std::vector<std::string> weight_gradient_layers(const RunTrace& t) {
  std::vector<std::string> out;
  for (const auto& name : t.layers_with(TensorKind::gradients))
    if (t.series(name, TensorKind::weights) != nullptr) out.push_back(name);
  return out;
}

inline std::optional<double> median_ratio(const RunTrace& t, const std::string& layer, const std::string& last) {
  const auto r = norm_ratios(*t.series(layer, TensorKind::gradients), *t.series(last, TensorKind::gradients));
  if (r.empty()) return std::nullopt;
  std::vector<double> v;
  for (const auto& [s, x] : r) v.push_back(x);
  return median_of(std::move(v));
}

inline Partial run_vanishing_detector(const RunTrace& run, const RunTrace* base, const ThresholdConfig& cfg) {
  Partial out{Symptom::VanishingGradients, {}, 0};
  std::vector<std::string> layers = weight_gradient_layers(run);
  if (base) {
    const auto blayers = weight_gradient_layers(*base);
    std::erase_if(layers, [&](const std::string& n) { return std::find(blayers.begin(), blayers.end(), n) == blayers.end(); });
    // The reference layer must be the last one in both networks.
    if (layers.empty() || blayers.empty() || layers.back() != blayers.back()) return out;
  }
  if (layers.size() < 2) return out;
  const std::string& last = layers.back();
  out.eligible = layers.size() - 1;
  const Rule rule{"median_norm_ratio", Direction::less, true, cfg.vanish_ratio};
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    const auto value = median_ratio(run, layers[i], last);
    if (!value) continue;
    std::optional<double> bvalue;
    if (base) {
      bvalue = median_ratio(*base, layers[i], last);
      if (!bvalue) continue;
    }
    const RuleOutcome o = apply_rule(rule, *value, bvalue, cfg.baseline_margin);
    if (!o.violated) continue;
    std::uint64_t first = 0;
    for (const auto& [step, ratio] :
         norm_ratios(*run.series(layers[i], TensorKind::gradients), *run.series(last, TensorKind::gradients)))
      if (ratio <= o.effective_threshold) {
        first = step;
        break;
      }
    out.affected.push_back({layers[i], first, {{rule.statistic, *value, o.effective_threshold, bvalue}}});
  }
  return out;
}

/// Loss per epoch: points grouped by epoch (mean) when every point carries an
/// epoch, otherwise one point per record.
struct EpochLoss {
  std::uint64_t step;
  double value;
};

inline std::vector<EpochLoss> epoch_losses(const MetricSeries& series) {
  const bool all_epochs = std::all_of(series.begin(), series.end(), [](const MetricPoint& p) { return p.epoch.has_value(); });
  std::vector<EpochLoss> out;
  if (!all_epochs) {
    for (const auto& p : series) out.push_back({p.step, p.value});
    return out;
  }
  std::map<std::uint64_t, std::pair<double, std::size_t>> sums;
  std::map<std::uint64_t, std::uint64_t> last_step;
  for (const auto& p : series) {
    auto& [sum, n] = sums[*p.epoch];
    sum += p.value;
    ++n;
    last_step[*p.epoch] = std::max(last_step[*p.epoch], p.step);
  }
  for (const auto& [e, sn] : sums) out.push_back({last_step[e], sn.first / static_cast<double>(sn.second)});
  return out;
}

/// Relative improvements between consecutive epochs.
inline std::vector<double> improvements(const std::vector<EpochLoss>& losses) {
  std::vector<double> r;
  for (std::size_t e = 1; e < losses.size(); ++e) {
    const double prev = losses[e - 1].value;
    const double denom = std::abs(prev) > 0.0 ? std::abs(prev) : 1.0;
    r.push_back((prev - losses[e].value) / denom);
  }
  return r;
}

/// Index of the first epoch that completes `patience` consecutive
/// improvements with |r| < delta, if any.
inline std::optional<std::size_t> convergence_epoch(const std::vector<double>& r, double delta, int patience) {
  int streak = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    streak = std::abs(r[i]) < delta ? streak + 1 : 0;
    if (streak >= patience) return i + 1;
  }
  return std::nullopt;
}

inline std::optional<Partial> run_slow_convergence(const RunTrace& run, const RunTrace* base, const ThresholdConfig& cfg) {
  const MetricSeries* series = run.metric(cfg.loss_metric);
  if (series == nullptr) return std::nullopt;
  const auto losses = epoch_losses(*series);
  const auto r = improvements(losses);
  const auto patience = static_cast<std::size_t>(cfg.convergence_patience_epochs);
  if (r.size() < patience) return std::nullopt;
  double delta = cfg.convergence_delta;
  std::optional<double> bvalue;
  if (base) {
    const MetricSeries* bseries = base->metric(cfg.loss_metric);
    if (bseries == nullptr) return std::nullopt;
    const auto br = improvements(epoch_losses(*bseries));
    const std::size_t half = br.size() / 2;
    if (br.size() - half < patience) return std::nullopt;
    double tail = 0.0;
    for (std::size_t i = half; i < br.size(); ++i) tail = std::max(tail, std::abs(br[i]));
    bvalue = tail;
    delta = std::max(delta, cfg.baseline_margin * tail);
  }
  Partial out{Symptom::SlowConvergence, {}, 1};
  if (convergence_epoch(r, delta, cfg.convergence_patience_epochs)) return out;
  int best = 0, streak = 0;
  for (double x : r) {
    streak = std::abs(x) < delta ? streak + 1 : 0;
    best = std::max(best, streak);
  }
  out.affected.push_back({cfg.loss_metric, losses.back().step,
                          {{"longest_flat_streak", static_cast<double>(best),
                            static_cast<double>(cfg.convergence_patience_epochs), std::nullopt},
                           {"improvement_delta", delta, delta, bvalue}}});
  return out;
}

inline double plateau(const std::vector<EpochLoss>& losses) {
  const std::size_t k = std::max<std::size_t>(1, (losses.size() + 3) / 4);
  double sum = 0.0;
  for (std::size_t i = losses.size() - k; i < losses.size(); ++i) sum += losses[i].value;
  return sum / static_cast<double>(k);
}

inline std::optional<Partial> run_higher_loss(const RunTrace& run, const RunTrace* base, const ThresholdConfig& cfg) {
  if (base == nullptr) return std::nullopt;
  const MetricSeries* series = run.metric(cfg.loss_metric);
  const MetricSeries* bseries = base->metric(cfg.loss_metric);
  if (series == nullptr || bseries == nullptr || series->empty() || bseries->empty()) return std::nullopt;
  const auto losses = epoch_losses(*series);
  const double p = plateau(losses);
  const double pb = plateau(epoch_losses(*bseries));
  Partial out{Symptom::HigherLoss, {}, 1};
  const double threshold = cfg.loss_ratio_hi * pb;
  if (p >= threshold && p > pb) {
    const std::size_t k = std::max<std::size_t>(1, (losses.size() + 3) / 4);
    out.affected.push_back({cfg.loss_metric, losses[losses.size() - k].step, {{"plateau_loss", p, threshold, pb}}});
  }
  return out;
}

}  // namespace detail

/// Evaluates every detector. In relative mode `baseline` is required.
inline std::vector<SymptomFinding> classify(const RunTrace& trace, const RunTrace* baseline, const ThresholdConfig& cfg,
                                            const CauseTable& causes = default_cause_table()) {
  cfg.validate();
  if (trace.empty()) throw InvalidArgument("cannot classify an empty trace");
  const RunTrace* base = nullptr;
  if (cfg.baseline_mode == BaselineMode::relative) {
    if (baseline == nullptr) throw InvalidArgument("relative mode requires a baseline trace");
    bool overlap = false;
    for (const auto& name : trace.layer_order())
      if (baseline->layers().count(name)) overlap = true;
    if (!overlap) throw InvalidArgument("trace and baseline share no layer names");
    base = baseline;
  }

  std::vector<detail::Partial> partials;
  for (const auto& det : detail::layer_detectors(cfg)) partials.push_back(detail::run_layer_detector(det, trace, base, cfg));
  partials.push_back(detail::run_sparse_detector(trace, base, cfg));
  partials.push_back(detail::run_vanishing_detector(trace, base, cfg));
  if (auto p = detail::run_slow_convergence(trace, base, cfg)) partials.push_back(std::move(*p));
  if (auto p = detail::run_higher_loss(trace, base, cfg)) partials.push_back(std::move(*p));

  std::vector<SymptomFinding> findings;
  for (auto& p : partials) {
    if (p.eligible == 0 || p.affected.empty()) continue;
    SymptomFinding f;
    f.symptom = p.symptom;
    f.eligible_layers = p.eligible;
    f.coverage = static_cast<double>(p.affected.size()) / static_cast<double>(p.eligible);
    if (f.coverage < cfg.layer_coverage_min) continue;
    f.first_step = std::numeric_limits<std::uint64_t>::max();
    bool huge = false;
    for (const auto& ev : p.affected) {
      f.first_step = std::min(f.first_step, ev.first_step);
      for (const auto& m : ev.measurements)
        if (std::abs(m.value) >= cfg.critical_magnitude) huge = true;
    }
    f.severity = (f.coverage >= 2.0 * cfg.layer_coverage_min || huge) ? Severity::critical : Severity::warning;
    f.affected_layers = std::move(p.affected);
    f.suspected_causes = causes.attribute(f.symptom, cfg.data_type);
    findings.push_back(std::move(f));
  }
  std::stable_sort(findings.begin(), findings.end(), finding_precedes);
  return findings;
}

inline std::vector<SymptomFinding> classify(const RunTrace& trace, const ThresholdConfig& cfg) {
  return classify(trace, nullptr, cfg);
}

// ---------------------------------------------------------------------------
// Interruption

enum class Cadence { step, epoch };

inline std::string_view to_string(Cadence c) noexcept { return c == Cadence::step ? "step" : "epoch"; }

struct InterruptPolicy {
  std::set<Symptom> enabled_symptoms{kAllSymptoms.begin(), kAllSymptoms.end()};
  Severity min_severity = Severity::warning;
  double min_coverage = 0.20;
  Cadence evaluate_every = Cadence::epoch;

  void validate() const {
    if (!(min_coverage >= 0.0 && min_coverage <= 1.0)) throw InvalidArgument("min_coverage must lie in [0,1]");
  }
};

struct InterruptDecision {
  bool halt = false;
  std::optional<SymptomFinding> trigger;
};

inline InterruptDecision should_interrupt(const std::vector<SymptomFinding>& findings, const InterruptPolicy& policy) {
  policy.validate();
  const SymptomFinding* best = nullptr;
  for (const auto& f : findings) {
    if (!policy.enabled_symptoms.count(f.symptom)) continue;
    if (f.severity < policy.min_severity || f.coverage < policy.min_coverage) continue;
    if (best == nullptr || finding_precedes(f, *best)) best = &f;
  }
  if (best == nullptr) return {};
  return {true, *best};
}

}  // namespace trainwatch
