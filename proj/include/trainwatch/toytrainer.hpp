// SPDX-License-Identifier: Apache-2.0
#pragma once

// A small fully-connected classifier (ReLU hidden layers, softmax output,
// cross-entropy, plain SGD) that emits telemetry while it trains.
//
// Layers are named fc1, fc2, ...; parameters appear in telemetry as
// fcN.weight and fcN.bias, and their gradients are recorded under the same
// names with kind "gradients".

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "trainwatch/dataset.hpp"
#include "trainwatch/error.hpp"
#include "trainwatch/injectors.hpp"
#include "trainwatch/rng.hpp"
#include "trainwatch/symptoms.hpp"
#include "trainwatch/telemetry.hpp"

namespace trainwatch {

// ---------------------------------------------------------------------------
// Synthetic data

enum class SyntheticKind { two_gaussians, ring, tabular_metrics };

inline std::string_view to_string(SyntheticKind k) noexcept {
  switch (k) {
    case SyntheticKind::two_gaussians: return "two_gaussians";
    case SyntheticKind::ring: return "ring";
    case SyntheticKind::tabular_metrics: return "tabular_metrics";
  }
  return "?";
}

inline std::optional<SyntheticKind> parse_synthetic_kind(std::string_view s) noexcept {
  for (auto k : {SyntheticKind::two_gaussians, SyntheticKind::ring, SyntheticKind::tabular_metrics})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Column multipliers for tabular_metrics, cycled over the columns.
inline constexpr double kTabularScales[] = {1000.0, 1.0, 10.0, 0.5};

struct SyntheticOptions {
  double separation = 2.5;  // distance of each class mean from the origin
};

/// Balanced binary data. two_gaussians puts unit-covariance classes at
/// +/-mu with |mu| = separation along the diagonal; ring puts class 1 inside
/// radius 1 and class 2 in the shell 2..3; tabular_metrics is two_gaussians
/// with columns rescaled by kTabularScales.
inline Dataset generate_synthetic(SyntheticKind kind, std::size_t n, std::size_t d, std::uint64_t seed,
                                  const SyntheticOptions& opt = {}) {
  if (d == 0) throw InvalidArgument("synthetic data needs d >= 1");
  if (kind != SyntheticKind::two_gaussians && d < 2)
    throw InvalidArgument(fmt::format("{} needs d >= 2", to_string(kind)));
  if (n < 4) throw InvalidArgument("synthetic data needs n >= 2K = 4");
  Dataset ds;
  ds.num_classes = 2;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i < n / 2 ? 1 : 2;
  Rng order = Rng::substream(seed, 0);
  order.shuffle(std::span<int>(ds.labels));
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const double per_dim = opt.separation / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::substream(seed, i + 1);
    const auto row = static_cast<Eigen::Index>(i);
    const double sign = ds.labels[i] == 1 ? -1.0 : 1.0;
    if (kind == SyntheticKind::ring) {
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double z = rng.normal();
        ds.features(row, static_cast<Eigen::Index>(j)) = z;
        norm += z * z;
      }
      norm = std::sqrt(norm);
      const double radius = ds.labels[i] == 1 ? rng.uniform(0.0, 1.0) : rng.uniform(2.0, 3.0);
      ds.features.row(row) *= radius / (norm > 0.0 ? norm : 1.0);
    } else {
      for (std::size_t j = 0; j < d; ++j)
        ds.features(row, static_cast<Eigen::Index>(j)) = rng.normal() + sign * per_dim;
    }
  }
  if (kind == SyntheticKind::tabular_metrics)
    for (std::size_t j = 0; j < d; ++j)
      ds.features.col(static_cast<Eigen::Index>(j)) *= kTabularScales[j % std::size(kTabularScales)];
  for (std::size_t j = 0; j < d; ++j) ds.column_names.push_back(fmt::format("x{}", j + 1));
  return ds;
}

// ---------------------------------------------------------------------------
// Model

struct ToyModel {
  std::vector<std::size_t> layer_sizes;  // d, hidden..., K
  std::vector<Eigen::MatrixXd> weights;  // weights[l] is out x in
  std::vector<Eigen::VectorXd> biases;

  std::size_t depth() const noexcept { return weights.size(); }

  static std::string layer_name(std::size_t l, bool bias) { return fmt::format("fc{}.{}", l + 1, bias ? "bias" : "weight"); }

  void validate() const {
    if (layer_sizes.size() < 2) throw InvalidArgument("a model needs at least input and output sizes");
    for (auto s : layer_sizes)
      if (s == 0) throw InvalidArgument("layer sizes must be positive");
    if (weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size())
      throw InvalidArgument("parameter count does not match layer_sizes");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (static_cast<std::size_t>(weights[l].rows()) != layer_sizes[l + 1] ||
          static_cast<std::size_t>(weights[l].cols()) != layer_sizes[l] ||
          static_cast<std::size_t>(biases[l].size()) != layer_sizes[l + 1])
        throw InvalidArgument(fmt::format("layer {} has the wrong shape", l + 1));
    }
  }

  bool finite() const {
    for (std::size_t l = 0; l < depth(); ++l)
      if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    return true;
  }
};

/// Uniform +/-1/sqrt(fan_in) for weights and biases.
inline ToyModel init_model(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
  ToyModel m;
  m.layer_sizes = layer_sizes;
  if (layer_sizes.size() < 2) throw InvalidArgument("a model needs at least input and output sizes");
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(layer_sizes[l]);
    const auto out = static_cast<Eigen::Index>(layer_sizes[l + 1]);
    if (in == 0 || out == 0) throw InvalidArgument("layer sizes must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd w(out, in);
    Eigen::VectorXd b(out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

struct ForwardCache {
  std::vector<Eigen::MatrixXd> activations;  // a0 = input, a_l = relu(z_l) for hidden layers; rows are samples
  std::vector<Eigen::MatrixXd> pre;          // z_l for every layer
  Eigen::MatrixXd logits;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

inline ForwardCache forward(const ToyModel& m, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.cols()) != m.layer_sizes.front())
    throw InvalidArgument(fmt::format("input has {} features, model expects {}", x.cols(), m.layer_sizes.front()));
  ForwardCache c;
  c.activations.push_back(x);
  for (std::size_t l = 0; l < m.depth(); ++l) {
    Eigen::MatrixXd z = c.activations.back() * m.weights[l].transpose();
    z.rowwise() += m.biases[l].transpose();
    c.pre.push_back(z);
    if (l + 1 < m.depth()) c.activations.push_back(z.cwiseMax(0.0));
  }
  c.logits = c.pre.back();
  return c;
}

/// Row-wise softmax with the max subtracted.
inline Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Mean cross-entropy of `labels` (1..K) under `logits`, via log-sum-exp.
inline double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw InvalidArgument("logits and labels disagree");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)] - 1);
  }
  return total / static_cast<double>(logits.rows());
}

/// Analytic gradients of the mean cross-entropy.
inline Gradients backward(const ToyModel& m, const ForwardCache& c, const std::vector<int>& labels) {
  const auto n = c.logits.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw InvalidArgument("batch size and label count disagree");
  if (c.pre.size() != m.depth()) throw InvalidArgument("cache does not belong to this model");
  Eigen::MatrixXd delta = softmax(c.logits);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 1 || y > delta.cols()) throw InvalidArgument(fmt::format("label {} outside 1..{}", y, delta.cols()));
    delta(i, y - 1) -= 1.0;
  }
  delta /= static_cast<double>(n);
  Gradients g;
  g.weights.resize(m.depth());
  g.biases.resize(m.depth());
  for (std::size_t l = m.depth(); l-- > 0;) {
    g.weights[l] = delta.transpose() * c.activations[l];
    g.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::MatrixXd up = delta * m.weights[l];
      delta = up.cwiseProduct((c.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return g;
}

/// Central-difference gradients of the mean cross-entropy, for checking
/// backward().
inline Gradients numeric_gradients(ToyModel m, const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                   double h = 1e-5) {
  Gradients g;
  auto loss = [&]() { return cross_entropy(forward(m, x).logits, labels); };
  for (std::size_t l = 0; l < m.depth(); ++l) {
    g.weights.emplace_back(m.weights[l].rows(), m.weights[l].cols());
    for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) {
      double& p = m.weights[l].data()[i];
      const double keep = p;
      p = keep + h;
      const double up = loss();
      p = keep - h;
      const double down = loss();
      p = keep;
      g.weights[l].data()[i] = (up - down) / (2.0 * h);
    }
    g.biases.emplace_back(m.biases[l].size());
    for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) {
      double& p = m.biases[l][i];
      const double keep = p;
      p = keep + h;
      const double up = loss();
      p = keep - h;
      const double down = loss();
      p = keep;
      g.biases[l][i] = (up - down) / (2.0 * h);
    }
  }
  return g;
}

/// Predicted class ids (1..K), ties to the lowest class.
inline std::vector<int> predict(const ToyModel& m, const Eigen::MatrixXd& x) {
  const auto logits = forward(m, x).logits;
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg) + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassificationMetrics {
  double accuracy = 0.0;
  std::vector<double> precision;  // per class, index k-1
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

/// Per-class ratios with an empty denominator are 0.
inline ClassificationMetrics compute_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                                             int num_classes) {
  if (predicted.size() != truth.size()) throw InvalidArgument("prediction and truth lengths differ");
  if (truth.empty()) throw InvalidArgument("metrics need at least one sample");
  const auto k = static_cast<std::size_t>(num_classes);
  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i] - 1), t = static_cast<std::size_t>(truth[i] - 1);
    if (p >= k || t >= k) throw InvalidArgument("class id outside 1..K");
    if (p == t) {
      ++correct;
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  ClassificationMetrics m;
  m.accuracy = ratio(correct, truth.size());
  for (std::size_t c = 0; c < k; ++c) {
    m.precision.push_back(ratio(tp[c], tp[c] + fp[c]));
    m.recall.push_back(ratio(tp[c], tp[c] + fn[c]));
    const double s = m.precision[c] + m.recall[c];
    m.f1.push_back(s > 0.0 ? 2.0 * m.precision[c] * m.recall[c] / s : 0.0);
  }
  const double kk = static_cast<double>(k);
  m.macro_precision = std::accumulate(m.precision.begin(), m.precision.end(), 0.0) / kk;
  m.macro_recall = std::accumulate(m.recall.begin(), m.recall.end(), 0.0) / kk;
  m.macro_f1 = std::accumulate(m.f1.begin(), m.f1.end(), 0.0) / kk;
  return m;
}

inline ClassificationMetrics evaluate(const ToyModel& m, const Dataset& ds) {
  return compute_metrics(predict(m, ds.features), ds.labels, static_cast<int>(m.layer_sizes.back()));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::vector<std::size_t> hidden = {16};
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 0.08;
  Cadence cadence = Cadence::step;
  std::set<PreprocessOp> preprocessing = {PreprocessOp::dedup, PreprocessOp::impute_missing, PreprocessOp::standardize};
  std::optional<BugSpec> injection;
  std::uint64_t seed = 0;
  std::string run_id = "toy";

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning_rate must be >= 0");
    for (auto h : hidden)
      if (h == 0) throw InvalidArgument("hidden widths must be positive");
    if (run_id.empty()) throw InvalidArgument("run_id must not be empty");
    if (injection) injection->validate();
  }

  std::vector<std::size_t> layer_sizes(std::size_t d, std::size_t k) const {
    std::vector<std::size_t> s{d};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(k);
    return s;
  }
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::uint64_t step, std::uint64_t epoch)
      : Error(fmt::format("training diverged at step {} (epoch {}): non-finite loss or parameters", step, epoch)),
        step_(step),
        epoch_(epoch) {}
  std::uint64_t step() const noexcept { return step_; }
  std::uint64_t epoch() const noexcept { return epoch_; }

 private:
  std::uint64_t step_;
  std::uint64_t epoch_;
};

struct TrainResult {
  ToyModel model;
  std::vector<double> epoch_losses;
  ClassificationMetrics train_metrics;
  std::uint64_t steps = 0;
};

/// Data the trainer sees after injection and preprocessing. An injected
/// omit_preprocessing bug removes its ops from cfg.preprocessing; other bugs
/// are applied to the raw data first.
struct PreparedData {
  Dataset train;
  std::optional<Dataset> test;
  FittedPreprocessing fitted;
  std::vector<std::string> notices;
};

inline PreparedData prepare_training_data(const Dataset& raw, const TrainConfig& cfg) {
  cfg.validate();
  PreparedData out;
  std::set<PreprocessOp> ops = cfg.preprocessing;
  Dataset train = raw;
  if (cfg.injection) {
    if (cfg.injection->kind == BugKind::omit_preprocessing) {
      for (auto op : cfg.injection->omitted_ops) ops.erase(op);
    } else {
      auto inj = apply_bug(raw, *cfg.injection);
      train = std::move(inj.data);
      out.test = std::move(inj.test);
      out.notices = std::move(inj.notices);
    }
  }
  auto pre = apply_preprocessing(train, ops);
  out.train = std::move(pre.data);
  out.fitted = std::move(pre.fitted);
  out.notices.insert(out.notices.end(), pre.notices.begin(), pre.notices.end());
  if (out.test && out.test->rows() > 0) out.test = out.fitted.apply(std::move(*out.test));
  if (out.test && out.test->rows() == 0) out.test.reset();
  return out;
}

namespace detail {

inline std::vector<double> flatten(const Eigen::MatrixXd& m) {
  // Row-major so fcN.weight[i*in + j] is the (out i, in j) entry.
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

inline std::vector<double> flatten(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

/// Trains `model` in place on already-prepared data. Per cadence it records
/// the post-update weights and biases and the batch-mean gradients of that
/// step; train_loss (mean batch loss of the epoch) is recorded at each
/// epoch's last step. On divergence the finite records of the failing step
/// are still written and the sink is flushed before TrainingDiverged is
/// thrown.
inline TrainResult train(ToyModel model, const Dataset& ds, const TrainConfig& cfg, RecordSink& sink) {
  cfg.validate();
  model.validate();
  ds.validate();
  if (ds.cols() != model.layer_sizes.front())
    throw InvalidArgument(fmt::format("dataset has {} features, model expects {}", ds.cols(), model.layer_sizes.front()));
  if (static_cast<std::size_t>(ds.num_classes) > model.layer_sizes.back())
    throw InvalidArgument("dataset has more classes than model outputs");
  for (Eigen::Index i = 0; i < ds.features.size(); ++i)
    if (!std::isfinite(ds.features.data()[i]))
      throw InvalidArgument("training data has missing or non-finite features; impute first");

  TrainResult result;
  const std::size_t n = ds.rows();
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;

  auto emit = [&](TelemetryRecord rec) {
    sink.write(rec);
  };
  auto record_step = [&](const Gradients& g, std::uint64_t epoch) {
    for (std::size_t l = 0; l < model.depth(); ++l) {
      const struct {
        std::string name;
        std::vector<double> param, grad;
        TensorKind kind;
      } parts[] = {{ToyModel::layer_name(l, false), detail::flatten(model.weights[l]), detail::flatten(g.weights[l]),
                    TensorKind::weights},
                   {ToyModel::layer_name(l, true), detail::flatten(model.biases[l]), detail::flatten(g.biases[l]),
                    TensorKind::biases}};
      for (const auto& p : parts) {
        if (detail::all_finite(p.param)) emit(make_values_record(cfg.run_id, step, epoch, p.name, p.kind, p.param));
        if (detail::all_finite(p.grad))
          emit(make_values_record(cfg.run_id, step, epoch, p.name, TensorKind::gradients, p.grad));
      }
    }
  };

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto epoch = static_cast<std::uint64_t>(e);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler = Rng::substream(cfg.seed, e);
    shuffler.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(end - start), ds.features.cols());
      std::vector<int> y;
      y.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        x.row(static_cast<Eigen::Index>(k - start)) = ds.features.row(static_cast<Eigen::Index>(order[k]));
        y.push_back(ds.labels[order[k]]);
      }
      const auto cache = forward(model, x);
      const double loss = cross_entropy(cache.logits, y);
      const auto g = backward(model, cache, y);
      for (std::size_t l = 0; l < model.depth(); ++l) {
        model.weights[l] -= cfg.learning_rate * g.weights[l];
        model.biases[l] -= cfg.learning_rate * g.biases[l];
      }
      const bool last_in_epoch = end == n;
      const bool diverged = !std::isfinite(loss) || !model.finite();
      if (cfg.cadence == Cadence::step || last_in_epoch || diverged) record_step(g, epoch);
      if (diverged) {
        sink.flush();
        result.steps = step + 1;
        throw TrainingDiverged(step, epoch);
      }
      loss_sum += loss;
      ++batches;
      if (last_in_epoch) {
        const double mean_loss = loss_sum / static_cast<double>(batches);
        result.epoch_losses.push_back(mean_loss);
        emit(make_metric_record(cfg.run_id, step, epoch, "train_loss", mean_loss));
      }
      ++step;
    }
  }
  sink.flush();
  result.steps = step;
  result.train_metrics = evaluate(model, ds);
  result.model = std::move(model);
  return result;
}

/// Convenience: prepare the data, build a model sized for it and train.
struct ToyRun {
  PreparedData data;
  TrainResult result;
  std::optional<ClassificationMetrics> test_metrics;
};

inline ToyRun run_toy(const Dataset& raw, const TrainConfig& cfg, RecordSink& sink) {
  ToyRun run;
  run.data = prepare_training_data(raw, cfg);
  const auto k = static_cast<std::size_t>(std::max(2, run.data.train.num_classes));
  auto model = init_model(cfg.layer_sizes(run.data.train.cols(), k), Rng::substream(cfg.seed, 0x6d6f64656cULL).next());
  run.result = train(std::move(model), run.data.train, cfg, sink);
  if (run.data.test) run.test_metrics = evaluate(run.result.model, *run.data.test);
  return run;
}

}  // namespace trainwatch
