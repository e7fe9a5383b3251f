// SPDX-License-Identifier: Apache-2.0
#pragma once

// Seeded data-bug injectors.
//
// Per-row randomness comes from Rng::substream(seed, row), so every row's
// outcome depends only on (seed, row index) and never on evaluation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "trainwatch/dataset.hpp"
#include "trainwatch/error.hpp"
#include "trainwatch/rng.hpp"

namespace trainwatch {

enum class BugKind { label_noise, class_imbalance, concept_drift, ood, omit_preprocessing };

inline std::string_view to_string(BugKind k) noexcept {
  switch (k) {
    case BugKind::label_noise: return "label_noise";
    case BugKind::class_imbalance: return "class_imbalance";
    case BugKind::concept_drift: return "concept_drift";
    case BugKind::ood: return "ood";
    case BugKind::omit_preprocessing: return "omit_preprocessing";
  }
  return "?";
}

inline std::optional<BugKind> parse_bug_kind(std::string_view s) noexcept {
  for (BugKind k : {BugKind::label_noise, BugKind::class_imbalance, BugKind::concept_drift, BugKind::ood,
                    BugKind::omit_preprocessing})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Region-dependent label flip `x<j> <op> <threshold>`, j counted from 1.
struct FlipRule {
  enum class Op { gt, ge, lt, le };
  std::size_t feature = 0;  // 0-based
  Op op = Op::gt;
  double threshold = 0.0;

  bool matches(const Eigen::MatrixXd& x, Eigen::Index row) const {
    const double v = x(row, static_cast<Eigen::Index>(feature));
    switch (op) {
      case Op::gt: return v > threshold;
      case Op::ge: return v >= threshold;
      case Op::lt: return v < threshold;
      case Op::le: return v <= threshold;
    }
    return false;
  }

  std::string str() const {
    static constexpr const char* ops[] = {">", ">=", "<", "<="};
    return fmt::format("x{}{}{}", feature + 1, ops[static_cast<int>(op)], threshold);
  }

  static FlipRule parse(std::string_view s) {
    std::string t;
    for (char c : s)
      if (c != ' ' && c != '\t') t.push_back(c);
    if (t.size() < 3 || t[0] != 'x') throw InvalidArgument("flip rule must look like 'x1>0'");
    std::size_t pos = 1;
    while (pos < t.size() && std::isdigit(static_cast<unsigned char>(t[pos]))) ++pos;
    if (pos == 1) throw InvalidArgument("flip rule needs a feature index, e.g. 'x1>0'");
    FlipRule r;
    const auto idx = std::stoul(t.substr(1, pos - 1));
    if (idx < 1) throw InvalidArgument("flip rule feature index starts at 1");
    r.feature = idx - 1;
    const std::string_view rest = std::string_view(t).substr(pos);
    std::size_t oplen = 1;
    if (rest.substr(0, 2) == ">=") {
      r.op = Op::ge, oplen = 2;
    } else if (rest.substr(0, 2) == "<=") {
      r.op = Op::le, oplen = 2;
    } else if (rest.substr(0, 1) == ">") {
      r.op = Op::gt;
    } else if (rest.substr(0, 1) == "<") {
      r.op = Op::lt;
    } else {
      throw InvalidArgument("flip rule operator must be one of > >= < <=");
    }
    const auto v = detail::parse_double(rest.substr(oplen));
    if (!v) throw InvalidArgument("flip rule needs a threshold");
    r.threshold = *v;
    return r;
  }
};

/// Binary labels swap 1<->2; K > 2 rotates y -> (y mod K) + 1.
inline int flipped_label(int y, int k) noexcept { return k == 2 ? 3 - y : (y % k) + 1; }

enum class DriftMode { chronological, synthetic };

struct BugSpec {
  BugKind kind = BugKind::label_noise;
  std::optional<double> eta;
  std::optional<bool> structured;
  std::map<int, int> class_map;
  std::optional<double> tau;
  std::optional<double> drift_fraction;
  std::optional<FlipRule> flip_rule;
  std::optional<DriftMode> drift_mode;
  std::optional<double> ood_fraction;
  std::optional<std::vector<double>> shift;
  std::set<PreprocessOp> omitted_ops;
  std::uint64_t seed = 0;

  void validate() const {
    auto only = [&](std::initializer_list<bool> mine, std::initializer_list<bool> others) {
      for (bool b : mine)
        if (!b) throw InvalidArgument(fmt::format("{} spec is missing a required field", to_string(kind)));
      for (bool b : others)
        if (b) throw InvalidArgument(fmt::format("{} spec sets fields of another bug kind", to_string(kind)));
    };
    const bool has_noise = eta || structured || !class_map.empty();
    const bool has_tau = tau.has_value();
    const bool has_drift = drift_fraction || flip_rule || drift_mode;
    const bool has_ood = ood_fraction || shift;
    const bool has_omit = !omitted_ops.empty();
    switch (kind) {
      case BugKind::label_noise:
        only({eta.has_value()}, {has_tau, has_drift, has_ood, has_omit});
        if (*eta < 0.0 || *eta > 1.0) throw InvalidArgument("eta must be in [0,1]");
        if (structured.value_or(false) && class_map.empty()) throw InvalidArgument("structured noise needs a class map");
        break;
      case BugKind::class_imbalance:
        only({has_tau}, {has_noise, has_drift, has_ood, has_omit});
        if (!(*tau >= 1.0)) throw InvalidArgument("tau must be >= 1");
        break;
      case BugKind::concept_drift:
        only({drift_fraction.has_value()}, {has_noise, has_tau, has_ood, has_omit});
        if (*drift_fraction < 0.0 || *drift_fraction > 1.0) throw InvalidArgument("drift_fraction must be in [0,1]");
        break;
      case BugKind::ood:
        only({ood_fraction.has_value(), shift.has_value()}, {has_noise, has_tau, has_drift, has_omit});
        if (*ood_fraction < 0.0 || *ood_fraction > 1.0) throw InvalidArgument("ood_fraction must be in [0,1]");
        break;
      case BugKind::omit_preprocessing:
        only({has_omit}, {has_noise, has_tau, has_drift, has_ood});
        break;
    }
  }
};

inline nlohmann::json bug_spec_to_json(const BugSpec& s) {
  nlohmann::json j;
  j["kind"] = to_string(s.kind);
  if (s.eta) j["eta"] = *s.eta;
  if (s.structured) j["structured"] = *s.structured;
  if (!s.class_map.empty()) {
    nlohmann::json m = nlohmann::json::object();
    for (auto [k, v] : s.class_map) m[std::to_string(k)] = v;
    j["class_map"] = m;
  }
  if (s.tau) j["tau"] = *s.tau;
  if (s.drift_fraction) j["drift_fraction"] = *s.drift_fraction;
  if (s.flip_rule) j["flip_rule"] = s.flip_rule->str();
  if (s.drift_mode) j["drift_mode"] = *s.drift_mode == DriftMode::synthetic ? "synthetic" : "chronological";
  if (s.ood_fraction) j["ood_fraction"] = *s.ood_fraction;
  if (s.shift) j["shift"] = *s.shift;
  if (!s.omitted_ops.empty()) {
    auto& a = j["omitted_ops"] = nlohmann::json::array();
    for (auto op : s.omitted_ops) a.push_back(to_string(op));
  }
  j["seed"] = s.seed;
  return j;
}

inline BugSpec bug_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("bug spec must be a JSON object");
  BugSpec s;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "kind") {
        const auto k = parse_bug_kind(v.get<std::string>());
        if (!k) throw InvalidArgument("unknown bug kind '" + v.get<std::string>() + "'");
        s.kind = *k;
      } else if (key == "eta") {
        s.eta = v.get<double>();
      } else if (key == "structured") {
        s.structured = v.get<bool>();
      } else if (key == "class_map") {
        for (const auto& [from, to] : v.items()) s.class_map[std::stoi(from)] = to.get<int>();
      } else if (key == "tau") {
        s.tau = v.get<double>();
      } else if (key == "drift_fraction") {
        s.drift_fraction = v.get<double>();
      } else if (key == "flip_rule") {
        s.flip_rule = FlipRule::parse(v.get<std::string>());
      } else if (key == "drift_mode") {
        const auto m = v.get<std::string>();
        if (m == "synthetic") s.drift_mode = DriftMode::synthetic;
        else if (m == "chronological") s.drift_mode = DriftMode::chronological;
        else throw InvalidArgument("drift_mode must be synthetic or chronological");
      } else if (key == "ood_fraction") {
        s.ood_fraction = v.get<double>();
      } else if (key == "shift") {
        s.shift = v.get<std::vector<double>>();
      } else if (key == "omitted_ops") {
        for (const auto& op : v) {
          const auto o = parse_preprocess_op(op.get<std::string>());
          if (!o) throw InvalidArgument("unknown preprocessing op '" + op.get<std::string>() + "'");
          s.omitted_ops.insert(*o);
        }
      } else if (key == "seed") {
        s.seed = v.get<std::uint64_t>();
      } else {
        throw InvalidArgument("unknown bug spec key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("bug spec field '" + key + "': " + e.what());
    }
  }
  s.validate();
  return s;
}

struct InjectionResult {
  Dataset data;
  std::optional<Dataset> test;  // concept drift only
  std::vector<std::size_t> affected_rows;
  std::vector<std::string> notices;
};

namespace detail {

// Indices of `rows` with the `keep` smallest per-row keys, returned in
// ascending row order.
inline std::vector<std::size_t> seeded_sample(std::vector<std::size_t> rows, std::size_t keep, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(rows.size());
  for (std::size_t r : rows) keyed.emplace_back(Rng::substream(seed, r).next(), r);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep && i < keyed.size(); ++i) out.push_back(keyed[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Flips each label independently with probability eta. Uniform mode draws
/// the replacement from the other K-1 classes; structured mode maps through
/// `class_map` (classes without an entry are left alone).
inline InjectionResult inject_label_noise(const Dataset& ds, double eta, bool structured, std::uint64_t seed,
                                          const std::map<int, int>& class_map = {}) {
  ds.validate();
  if (ds.num_classes < 2) throw InvalidArgument("label noise needs at least two classes");
  if (eta < 0.0 || eta > 1.0) throw InvalidArgument("eta must be in [0,1]");
  if (structured) {
    if (class_map.empty()) throw InvalidArgument("structured noise needs a class map");
    for (auto [from, to] : class_map) {
      if (from == to) throw InvalidArgument(fmt::format("class map sends class {} to itself", from));
      if (from < 1 || from > ds.num_classes || to < 1 || to > ds.num_classes)
        throw InvalidArgument(fmt::format("class map entry {}->{} outside 1..{}", from, to, ds.num_classes));
    }
  }
  InjectionResult r{ds, std::nullopt, {}, {}};
  const int k = ds.num_classes;
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    Rng rng = Rng::substream(seed, i);
    if (!rng.bernoulli(eta)) continue;
    const int y = ds.labels[i];
    int z = y;
    if (structured) {
      const auto it = class_map.find(y);
      if (it == class_map.end()) continue;
      z = it->second;
    } else {
      z = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(k - 1)));
      if (z >= y) ++z;
    }
    r.data.labels[i] = z;
    r.affected_rows.push_back(i);
  }
  return r;
}

/// Subsamples every non-majority class to at most floor(M / tau) rows, where
/// M is the majority count.
inline InjectionResult inject_class_imbalance(const Dataset& ds, double tau, std::uint64_t seed) {
  ds.validate();
  if (!(tau >= 1.0)) throw InvalidArgument("tau must be >= 1");
  const auto counts = ds.class_counts();
  std::size_t majority = 0;
  for (std::size_t c = 1; c < counts.size(); ++c)
    if (counts[c] > counts[majority]) majority = c;
  const std::size_t m = counts[majority];
  std::size_t min_present = m;
  for (std::size_t c : counts)
    if (c > 0) min_present = std::min(min_present, c);
  InjectionResult r{ds, std::nullopt, {}, {}};
  const double current = static_cast<double>(m) / static_cast<double>(min_present);
  if (tau < current) {
    r.notices.push_back(fmt::format("class_imbalance: tau {} is below the current ratio {:.4g}; dataset unchanged",
                                    tau, current));
    return r;
  }
  const auto target = static_cast<std::size_t>(std::floor(static_cast<double>(m) / tau));
  std::vector<std::vector<std::size_t>> by_class(counts.size());
  for (std::size_t i = 0; i < ds.rows(); ++i) by_class[static_cast<std::size_t>(ds.labels[i] - 1)].push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (c == majority || counts[c] <= target) {
      keep.insert(keep.end(), by_class[c].begin(), by_class[c].end());
      continue;
    }
    if (target == 0)
      throw InvalidArgument(fmt::format("tau {} would remove every row of class {}", tau, c + 1));
    // Each class draws from its own stream so classes do not share keys.
    const auto kept = detail::seeded_sample(by_class[c], target, Rng::substream(seed, c).next());
    keep.insert(keep.end(), kept.begin(), kept.end());
  }
  std::sort(keep.begin(), keep.end());
  std::vector<bool> kept_mask(ds.rows(), false);
  for (auto i : keep) kept_mask[i] = true;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (!kept_mask[i]) r.affected_rows.push_back(i);
  r.data = ds.select(keep);
  return r;
}

/// Splits into train/test at (1 - drift_fraction). Chronological mode orders
/// by timestamp; synthetic mode orders by timestamp when present and by a
/// seeded shuffle otherwise, then relabels test rows matching `flip_rule`.
/// `affected_rows` lists flipped rows as indices into the test partition.
inline InjectionResult inject_concept_drift(const Dataset& ds, double drift_fraction,
                                            const std::optional<FlipRule>& flip_rule, std::uint64_t seed,
                                            DriftMode mode = DriftMode::synthetic) {
  ds.validate();
  if (drift_fraction < 0.0 || drift_fraction > 1.0) throw InvalidArgument("drift_fraction must be in [0,1]");
  if (mode == DriftMode::chronological && !ds.timestamps)
    throw InvalidArgument("chronological concept drift needs timestamps");
  if (flip_rule && flip_rule->feature >= ds.cols())
    throw InvalidArgument(fmt::format("flip rule refers to feature {} but the dataset has {}", flip_rule->feature + 1,
                                      ds.cols()));
  std::vector<std::size_t> order(ds.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (ds.timestamps) {
    const auto& ts = *ds.timestamps;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ts[a] < ts[b]; });
  } else {
    std::vector<std::uint64_t> key(ds.rows());
    for (std::size_t i = 0; i < ds.rows(); ++i) key[i] = Rng::substream(seed, i).next();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return key[a] != key[b] ? key[a] < key[b] : a < b;
    });
  }
  const auto n_test = static_cast<std::size_t>(std::llround(drift_fraction * static_cast<double>(ds.rows())));
  const std::size_t n_train = ds.rows() - n_test;
  InjectionResult r;
  r.data = ds.select({order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train)});
  r.test = ds.select({order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end()});
  if (mode == DriftMode::synthetic && flip_rule) {
    for (std::size_t i = 0; i < r.test->rows(); ++i) {
      if (!flip_rule->matches(r.test->features, static_cast<Eigen::Index>(i))) continue;
      r.test->labels[i] = flipped_label(r.test->labels[i], ds.num_classes);
      r.affected_rows.push_back(i);
    }
  } else if (flip_rule) {
    r.notices.push_back("concept_drift: flip rule ignored in chronological mode");
  }
  if (r.data.rows() == 0) r.notices.push_back("concept_drift: train partition is empty");
  return r;
}

/// Replaces the features of round(rho * n) rows with a bootstrap draw from
/// the dataset shifted by `shift`. Labels are untouched.
inline InjectionResult inject_ood(const Dataset& ds, double rho, const std::vector<double>& shift, std::uint64_t seed) {
  ds.validate();
  if (rho < 0.0 || rho > 1.0) throw InvalidArgument("ood_fraction must be in [0,1]");
  if (shift.size() != ds.cols())
    throw InvalidArgument(fmt::format("shift has {} entries but the dataset has {} features", shift.size(), ds.cols()));
  const auto n = ds.rows();
  const auto count = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  InjectionResult r{ds, std::nullopt, {}, {}};
  r.affected_rows = detail::seeded_sample(all, count, seed);
  const Eigen::Map<const Eigen::RowVectorXd> delta(shift.data(), static_cast<Eigen::Index>(shift.size()));
  for (std::size_t i : r.affected_rows) {
    // Stream index offset by n keeps these draws apart from the selection keys.
    Rng rng = Rng::substream(seed, n + i);
    const auto src = static_cast<Eigen::Index>(rng.uniform_index(n));
    r.data.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(src) + delta;
  }
  return r;
}

/// The full set of ops minus `omitted`.
inline std::set<PreprocessOp> remaining_ops(const std::set<PreprocessOp>& omitted) {
  std::set<PreprocessOp> ops;
  for (PreprocessOp op : kAllPreprocessOps)
    if (!omitted.count(op)) ops.insert(op);
  return ops;
}

inline InjectionResult apply_bug(const Dataset& ds, const BugSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case BugKind::label_noise:
      return inject_label_noise(ds, *spec.eta, spec.structured.value_or(false), spec.seed, spec.class_map);
    case BugKind::class_imbalance: return inject_class_imbalance(ds, *spec.tau, spec.seed);
    case BugKind::concept_drift:
      return inject_concept_drift(ds, *spec.drift_fraction, spec.flip_rule, spec.seed,
                                  spec.drift_mode.value_or(DriftMode::synthetic));
    case BugKind::ood: return inject_ood(ds, *spec.ood_fraction, *spec.shift, spec.seed);
    case BugKind::omit_preprocessing: {
      auto p = apply_preprocessing(ds, remaining_ops(spec.omitted_ops));
      return {std::move(p.data), std::nullopt, {}, std::move(p.notices)};
    }
  }
  throw InvalidArgument("unknown bug kind");
}

}  // namespace trainwatch
