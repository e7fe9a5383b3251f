// SPDX-License-Identifier: Apache-2.0
#pragma once

// The shared configuration file. One JSON object with optional sections:
//
//   {
//     "thresholds":   { <ThresholdConfig field names> },
//     "policy":       { "enabled_symptoms": [...], "min_severity": "warning",
//                       "min_coverage": 0.2, "evaluate_every": "epoch" },
//     "train":        { <TrainConfig field names>, "injection": {<BugSpec>} },
//     "data":         { "kind": "two_gaussians", "n": 400, "d": 2, "seed": 0 }
//                     or { "csv": "path.csv", "label_column": "label" },
//     "cause_table":  { <CauseTable JSON> },
//     "remediations": { "ExplodingGradients": ["...", ...], ... }
//   }
//
// Threshold keys may also appear at the top level. Unknown keys are errors.
// Omitted keys keep their defaults.

#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "trainwatch/error.hpp"
#include "trainwatch/injectors.hpp"
#include "trainwatch/io.hpp"
#include "trainwatch/symptoms.hpp"
#include "trainwatch/toytrainer.hpp"

namespace trainwatch {

inline constexpr const char* kConfigEnvVar = "TRAINWATCH_CONFIG";

namespace detail {

template <typename T>
T config_get(const nlohmann::json& v, std::string_view section, std::string_view key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidArgument(fmt::format("config {}.{}: wrong value type", section, key));
  }
}

inline void require_object(const nlohmann::json& j, std::string_view what) {
  if (!j.is_object()) throw InvalidArgument(fmt::format("config {} must be a JSON object", what));
}

[[noreturn]] inline void unknown_key(std::string_view section, std::string_view key) {
  throw InvalidArgument(fmt::format("config {}: unknown key '{}'", section, key));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Thresholds

namespace detail {

inline std::vector<std::pair<const char*, double ThresholdConfig::*>> threshold_doubles() {
  return {{"near_zero_bias_abs", &ThresholdConfig::near_zero_bias_abs},
          {"healthy_bias_abs", &ThresholdConfig::healthy_bias_abs},
          {"small_weight_mean_abs", &ThresholdConfig::small_weight_mean_abs},
          {"grad_instability_span_orders", &ThresholdConfig::grad_instability_span_orders},
          {"weight_var_hi", &ThresholdConfig::weight_var_hi},
          {"grad_skew_hi", &ThresholdConfig::grad_skew_hi},
          {"overfit_bias_median", &ThresholdConfig::overfit_bias_median},
          {"extreme_weight_abs", &ThresholdConfig::extreme_weight_abs},
          {"extreme_bias_range", &ThresholdConfig::extreme_bias_range},
          {"sparse_update_frac", &ThresholdConfig::sparse_update_frac},
          {"vanish_ratio", &ThresholdConfig::vanish_ratio},
          {"loss_ratio_hi", &ThresholdConfig::loss_ratio_hi},
          {"explode_grad_abs", &ThresholdConfig::explode_grad_abs},
          {"weight_var_extreme", &ThresholdConfig::weight_var_extreme},
          {"convergence_delta", &ThresholdConfig::convergence_delta},
          {"layer_coverage_min", &ThresholdConfig::layer_coverage_min},
          {"param_skew_max", &ThresholdConfig::param_skew_max},
          {"param_kurt_max", &ThresholdConfig::param_kurt_max},
          {"baseline_margin", &ThresholdConfig::baseline_margin},
          {"critical_magnitude", &ThresholdConfig::critical_magnitude}};
}

/// Applies one key; false when `key` is not a threshold field.
inline bool set_threshold(ThresholdConfig& c, const std::string& key, const nlohmann::json& v) {
  for (const auto& [name, member] : threshold_doubles())
    if (key == name) {
      c.*member = config_get<double>(v, "thresholds", key);
      return true;
    }
  if (key == "convergence_patience_epochs") {
    c.convergence_patience_epochs = config_get<int>(v, "thresholds", key);
  } else if (key == "baseline_mode") {
    const auto s = config_get<std::string>(v, "thresholds", key);
    if (s == "absolute") c.baseline_mode = BaselineMode::absolute;
    else if (s == "relative") c.baseline_mode = BaselineMode::relative;
    else throw InvalidArgument("config thresholds.baseline_mode must be absolute or relative");
  } else if (key == "loss_metric") {
    c.loss_metric = config_get<std::string>(v, "thresholds", key);
  } else if (key == "data_type") {
    const auto t = parse_data_type(config_get<std::string>(v, "thresholds", key));
    if (!t) throw InvalidArgument("config thresholds.data_type must be any, code, text or metric");
    c.data_type = *t;
  } else {
    return false;
  }
  return true;
}

}  // namespace detail

inline ThresholdConfig thresholds_from_json(const nlohmann::json& j, ThresholdConfig base = {}) {
  detail::require_object(j, "thresholds");
  for (const auto& [key, v] : j.items())
    if (!detail::set_threshold(base, key, v)) detail::unknown_key("thresholds", key);
  base.validate();
  return base;
}

inline nlohmann::ordered_json thresholds_to_json(const ThresholdConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& [name, member] : detail::threshold_doubles()) j[name] = c.*member;
  j["convergence_patience_epochs"] = c.convergence_patience_epochs;
  j["baseline_mode"] = to_string(c.baseline_mode);
  j["loss_metric"] = c.loss_metric;
  j["data_type"] = to_string(c.data_type);
  return j;
}

// ---------------------------------------------------------------------------
// Interruption policy

inline InterruptPolicy policy_from_json(const nlohmann::json& j) {
  detail::require_object(j, "policy");
  InterruptPolicy p;
  for (const auto& [key, v] : j.items()) {
    if (key == "enabled_symptoms") {
      p.enabled_symptoms.clear();
      for (const auto& name : detail::config_get<std::vector<std::string>>(v, "policy", key)) {
        const auto s = parse_symptom(name);
        if (!s) throw InvalidArgument("config policy.enabled_symptoms: unknown symptom '" + name + "'");
        p.enabled_symptoms.insert(*s);
      }
    } else if (key == "min_severity") {
      const auto s = parse_severity(detail::config_get<std::string>(v, "policy", key));
      if (!s) throw InvalidArgument("config policy.min_severity must be info, warning or critical");
      p.min_severity = *s;
    } else if (key == "min_coverage") {
      p.min_coverage = detail::config_get<double>(v, "policy", key);
    } else if (key == "evaluate_every") {
      const auto s = detail::config_get<std::string>(v, "policy", key);
      if (s == "step") p.evaluate_every = Cadence::step;
      else if (s == "epoch") p.evaluate_every = Cadence::epoch;
      else throw InvalidArgument("config policy.evaluate_every must be step or epoch");
    } else {
      detail::unknown_key("policy", key);
    }
  }
  p.validate();
  return p;
}

inline nlohmann::ordered_json policy_to_json(const InterruptPolicy& p) {
  nlohmann::ordered_json j;
  auto& names = j["enabled_symptoms"] = nlohmann::ordered_json::array();
  for (auto s : p.enabled_symptoms) names.push_back(to_string(s));
  j["min_severity"] = to_string(p.min_severity);
  j["min_coverage"] = p.min_coverage;
  j["evaluate_every"] = to_string(p.evaluate_every);
  return j;
}

// ---------------------------------------------------------------------------
// Training

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::require_object(j, "train");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "hidden") {
      c.hidden = detail::config_get<std::vector<std::size_t>>(v, "train", key);
    } else if (key == "epochs") {
      c.epochs = detail::config_get<std::size_t>(v, "train", key);
    } else if (key == "batch_size") {
      c.batch_size = detail::config_get<std::size_t>(v, "train", key);
    } else if (key == "learning_rate") {
      c.learning_rate = detail::config_get<double>(v, "train", key);
    } else if (key == "cadence") {
      const auto s = detail::config_get<std::string>(v, "train", key);
      if (s == "step") c.cadence = Cadence::step;
      else if (s == "epoch") c.cadence = Cadence::epoch;
      else throw InvalidArgument("config train.cadence must be step or epoch");
    } else if (key == "preprocessing") {
      c.preprocessing.clear();
      for (const auto& name : detail::config_get<std::vector<std::string>>(v, "train", key)) {
        const auto op = parse_preprocess_op(name);
        if (!op) throw InvalidArgument("config train.preprocessing: unknown op '" + name + "'");
        c.preprocessing.insert(*op);
      }
    } else if (key == "injection") {
      if (!v.is_null()) c.injection = bug_spec_from_json(v);
    } else if (key == "seed") {
      c.seed = detail::config_get<std::uint64_t>(v, "train", key);
    } else if (key == "run_id") {
      c.run_id = detail::config_get<std::string>(v, "train", key);
    } else {
      detail::unknown_key("train", key);
    }
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["hidden"] = c.hidden;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["cadence"] = to_string(c.cadence);
  auto& ops = j["preprocessing"] = nlohmann::ordered_json::array();
  for (auto op : c.preprocessing) ops.push_back(to_string(op));
  if (c.injection) j["injection"] = bug_spec_to_json(*c.injection);
  j["seed"] = c.seed;
  j["run_id"] = c.run_id;
  return j;
}

// ---------------------------------------------------------------------------
// Training data source for train-toy

struct DataSource {
  SyntheticKind kind = SyntheticKind::two_gaussians;
  std::size_t n = 400;
  std::size_t d = 2;
  std::uint64_t seed = 0;
  double separation = SyntheticOptions{}.separation;
  /// When set, the dataset is read from this CSV instead of generated.
  std::optional<std::string> csv;
  CsvOptions csv_options;

  Dataset load() const {
    if (csv) return read_csv(*csv, csv_options);
    return generate_synthetic(kind, n, d, seed, SyntheticOptions{separation});
  }
};

inline DataSource data_source_from_json(const nlohmann::json& j) {
  detail::require_object(j, "data");
  DataSource s;
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") {
      const auto k = parse_synthetic_kind(detail::config_get<std::string>(v, "data", key));
      if (!k) throw InvalidArgument("config data.kind must be two_gaussians, ring or tabular_metrics");
      s.kind = *k;
    } else if (key == "n") {
      s.n = detail::config_get<std::size_t>(v, "data", key);
    } else if (key == "d") {
      s.d = detail::config_get<std::size_t>(v, "data", key);
    } else if (key == "seed") {
      s.seed = detail::config_get<std::uint64_t>(v, "data", key);
    } else if (key == "separation") {
      s.separation = detail::config_get<double>(v, "data", key);
    } else if (key == "csv") {
      s.csv = detail::config_get<std::string>(v, "data", key);
    } else if (key == "label_column") {
      s.csv_options.label_column = detail::config_get<std::string>(v, "data", key);
    } else if (key == "timestamp_column") {
      s.csv_options.timestamp_column = detail::config_get<std::string>(v, "data", key);
    } else {
      detail::unknown_key("data", key);
    }
  }
  return s;
}

inline nlohmann::ordered_json data_source_to_json(const DataSource& s) {
  nlohmann::ordered_json j;
  if (s.csv) {
    j["csv"] = *s.csv;
    j["label_column"] = s.csv_options.label_column;
    if (s.csv_options.timestamp_column) j["timestamp_column"] = *s.csv_options.timestamp_column;
    return j;
  }
  j["kind"] = to_string(s.kind);
  j["n"] = s.n;
  j["d"] = s.d;
  j["seed"] = s.seed;
  j["separation"] = s.separation;
  return j;
}

// ---------------------------------------------------------------------------
// Remediation suggestions

/// symptom -> ordered suggestions shown in reports.
class RemediationTable {
 public:
  const std::vector<std::string>& suggestions(Symptom s) const {
    static const std::vector<std::string> none;
    const auto it = table_.find(s);
    return it == table_.end() ? none : it->second;
  }

  void set(Symptom s, std::vector<std::string> text) { table_[s] = std::move(text); }

  static RemediationTable from_json(const nlohmann::json& j) {
    detail::require_object(j, "remediations");
    RemediationTable t;
    for (const auto& [name, v] : j.items()) {
      const auto s = parse_symptom(name);
      if (!s) throw InvalidArgument("config remediations: unknown symptom '" + name + "'");
      t.set(*s, detail::config_get<std::vector<std::string>>(v, "remediations", name));
    }
    return t;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [s, text] : table_) j[std::string(to_string(s))] = text;
    return j;
  }

  friend bool operator==(const RemediationTable&, const RemediationTable&) = default;

 private:
  std::map<Symptom, std::vector<std::string>> table_;
};

inline constexpr std::string_view kDefaultRemediationsJson = R"json({
  "NearZeroBiases": ["audit labels for noise (e.g. confident learning)", "check for drift between training and recent data"],
  "SmallerWeights": ["audit labels for noise (e.g. confident learning)", "check for drift between training and recent data"],
  "GradientInstability": ["audit labels for noise", "rebalance classes or use a class-weighted loss"],
  "SlowConvergence": ["apply feature normalization", "check that all preprocessing steps ran"],
  "ExtremeBiasValues": ["apply feature normalization", "check that all preprocessing steps ran"],
  "SkewedParameterDistribution": ["apply feature normalization", "normalize and standardize inputs before tokenization"],
  "AbnormalWeightVariance": ["check for concept drift with a time-ordered split", "retrain on recent data"],
  "GradientSkewness": ["check for concept drift with a time-ordered split", "audit labels for noise"],
  "OverfittingBias": ["rebalance classes (resampling or class weights)", "add regularization"],
  "ExtremeWeights": ["apply feature normalization", "impute missing values"],
  "SkewedBiasDistribution": ["apply feature normalization", "remove duplicate samples"],
  "SparseParameterUpdates": ["rebalance classes (resampling or class weights)", "audit labels for noise"],
  "VanishingGradients": ["rebalance classes (resampling or class weights)", "check layer initialization and depth"],
  "HigherLoss": ["rebalance classes (resampling or class weights)", "audit labels for noise"],
  "ExplodingGradients": ["apply feature normalization", "clip gradients or lower the learning rate"],
  "HighWeightVariance": ["apply feature normalization", "scale features to a common range"]
})json";

inline const RemediationTable& default_remediation_table() {
  static const RemediationTable table = RemediationTable::from_json(nlohmann::json::parse(kDefaultRemediationsJson));
  return table;
}

// ---------------------------------------------------------------------------
// Whole file

struct ToolkitConfig {
  ThresholdConfig thresholds;
  InterruptPolicy policy;
  TrainConfig train;
  DataSource data;
  CauseTable cause_table = default_cause_table();
  RemediationTable remediations = default_remediation_table();
};

inline ToolkitConfig config_from_json(const nlohmann::json& j) {
  detail::require_object(j, "file");
  ToolkitConfig c;
  nlohmann::json flat = nlohmann::json::object();
  for (const auto& [key, v] : j.items()) {
    if (key == "thresholds") {
      c.thresholds = thresholds_from_json(v, c.thresholds);
    } else if (key == "policy") {
      c.policy = policy_from_json(v);
    } else if (key == "train") {
      c.train = train_config_from_json(v);
    } else if (key == "data") {
      c.data = data_source_from_json(v);
    } else if (key == "cause_table") {
      c.cause_table = CauseTable::from_json(v);
    } else if (key == "remediations") {
      c.remediations = RemediationTable::from_json(v);
    } else {
      flat[key] = v;
    }
  }
  for (const auto& [key, v] : flat.items())
    if (!detail::set_threshold(c.thresholds, key, v)) detail::unknown_key("file", key);
  c.thresholds.validate();
  return c;
}

inline nlohmann::ordered_json config_to_json(const ToolkitConfig& c) {
  nlohmann::ordered_json j;
  j["thresholds"] = thresholds_to_json(c.thresholds);
  j["policy"] = policy_to_json(c.policy);
  j["train"] = train_config_to_json(c.train);
  j["data"] = data_source_to_json(c.data);
  j["cause_table"] = c.cause_table.to_json();
  j["remediations"] = c.remediations.to_json();
  return j;
}

inline ToolkitConfig load_config_file(const std::string& path) {
  const auto text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte, "");
  }
  try {
    return config_from_json(j);
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

/// The explicit path if given, else $TRAINWATCH_CONFIG if set and non-empty.
inline std::optional<std::string> resolve_config_path(const std::optional<std::string>& explicit_path) {
  if (explicit_path && !explicit_path->empty()) return explicit_path;
  if (const char* env = std::getenv(kConfigEnvVar); env != nullptr && *env != '\0') return std::string(env);
  return std::nullopt;
}

/// Defaults when neither a path nor the environment variable is given.
inline ToolkitConfig load_config(const std::optional<std::string>& explicit_path) {
  const auto path = resolve_config_path(explicit_path);
  return path ? load_config_file(*path) : ToolkitConfig{};
}

}  // namespace trainwatch
