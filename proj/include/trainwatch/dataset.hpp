// SPDX-License-Identifier: Apache-2.0
#pragma once

// Labeled tabular datasets, CSV I/O and the canonical preprocessing chain.
//
// Labels are class ids 1..K. Missing feature cells (empty CSV fields) are
// stored as NaN until impute_missing replaces them.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "trainwatch/error.hpp"
#include "trainwatch/io.hpp"

namespace trainwatch {

struct Dataset {
  Eigen::MatrixXd features;  // n x d
  std::vector<int> labels;   // n entries in 1..num_classes
  std::optional<std::vector<double>> timestamps;
  std::vector<std::string> column_names;
  int num_classes = 0;

  std::size_t rows() const noexcept { return labels.size(); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(features.cols()); }

  void validate() const {
    if (labels.empty()) throw InvalidArgument("dataset must have at least one row");
    if (static_cast<std::size_t>(features.rows()) != labels.size())
      throw InvalidArgument("feature rows and labels disagree");
    if (column_names.size() != cols()) throw InvalidArgument("column_names must match the feature count");
    if (num_classes < 1) throw InvalidArgument("num_classes must be positive");
    for (int y : labels)
      if (y < 1 || y > num_classes) throw InvalidArgument(fmt::format("label {} outside 1..{}", y, num_classes));
    if (timestamps && timestamps->size() != labels.size()) throw InvalidArgument("timestamps must match the row count");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(static_cast<std::size_t>(num_classes), 0);
    for (int y : labels) ++c[static_cast<std::size_t>(y - 1)];
    return c;
  }

  /// Rows `idx` in the given order.
  Dataset select(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
    out.labels.reserve(idx.size());
    if (timestamps) out.timestamps.emplace();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.features.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(idx[k]));
      out.labels.push_back(labels[idx[k]]);
      if (timestamps) out.timestamps->push_back((*timestamps)[idx[k]]);
    }
    out.column_names = column_names;
    out.num_classes = num_classes;
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    if (a.features.rows() != b.features.rows() || a.features.cols() != b.features.cols()) return false;
    for (Eigen::Index i = 0; i < a.features.size(); ++i) {
      const double x = a.features.data()[i], y = b.features.data()[i];
      if (!(x == y || (std::isnan(x) && std::isnan(y)))) return false;
    }
    return a.labels == b.labels && a.timestamps == b.timestamps && a.column_names == b.column_names &&
           a.num_classes == b.num_classes;
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw ParseError(fmt::format("line {}: unterminated quote", line_no), line.size(), "");
  out.push_back(std::move(cur));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw InvalidArgument("not a number: '" + std::string(s) + "'");
  return v;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

}  // namespace detail

struct CsvOptions {
  std::string label_column = "label";
  std::optional<std::string> timestamp_column;
};

/// Reads a CSV with a header row. Every column other than the label and
/// timestamp columns is a feature; empty feature cells become NaN.
inline Dataset parse_csv(const std::string& text, const CsvOptions& opt = {}) {
  const auto lines = split_lines(text);
  std::size_t first = 0;
  while (first < lines.size() && detail::trim(lines[first]).empty()) ++first;
  if (first == lines.size()) throw ParseError("empty CSV", 0, "");
  const auto header = detail::split_csv_line(lines[first], first + 1);
  std::optional<std::size_t> label_idx, ts_idx;
  std::vector<std::size_t> feature_idx;
  Dataset ds;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string name(detail::trim(header[j]));
    if (name == opt.label_column) {
      label_idx = j;
    } else if (opt.timestamp_column && name == *opt.timestamp_column) {
      ts_idx = j;
    } else {
      feature_idx.push_back(j);
      ds.column_names.push_back(name);
    }
  }
  if (!label_idx) throw ParseError("missing label column '" + opt.label_column + "'", 0, opt.label_column);
  if (opt.timestamp_column && !ts_idx)
    throw ParseError("missing timestamp column '" + *opt.timestamp_column + "'", 0, *opt.timestamp_column);

  std::vector<std::vector<double>> rows;
  if (ts_idx) ds.timestamps.emplace();
  for (std::size_t i = first + 1; i < lines.size(); ++i) {
    if (detail::trim(lines[i]).empty()) continue;
    const auto cells = detail::split_csv_line(lines[i], i + 1);
    if (cells.size() != header.size())
      throw ParseError(fmt::format("line {}: expected {} fields, found {}", i + 1, header.size(), cells.size()), 0, "");
    std::vector<double> row;
    row.reserve(feature_idx.size());
    try {
      for (std::size_t j : feature_idx) row.push_back(detail::parse_double(cells[j]).value_or(std::nan("")));
      const auto y = detail::parse_double(cells[*label_idx]);
      if (!y || *y != std::floor(*y) || *y < 1.0) throw InvalidArgument("labels must be integers >= 1");
      ds.labels.push_back(static_cast<int>(*y));
      if (ts_idx) {
        const auto t = detail::parse_double(cells[*ts_idx]);
        if (!t) throw InvalidArgument("missing timestamp");
        ds.timestamps->push_back(*t);
      }
    } catch (const InvalidArgument& e) {
      throw ParseError(fmt::format("line {}: {}", i + 1, e.what()), 0, "");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("CSV has no data rows", 0, "");
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feature_idx.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < feature_idx.size(); ++j)
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  ds.num_classes = *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.validate();
  return ds;
}

inline Dataset read_csv(const std::string& path, const CsvOptions& opt = {}) { return parse_csv(read_file(path), opt); }

/// Features first, then the optional timestamp, then the label. Doubles use
/// the shortest round-trip representation; NaN is written as an empty cell.
inline void write_csv(std::ostream& out, const Dataset& ds, const CsvOptions& opt = {}) {
  for (std::size_t j = 0; j < ds.cols(); ++j) out << detail::csv_field(ds.column_names[j]) << ',';
  if (ds.timestamps) out << detail::csv_field(opt.timestamp_column.value_or("timestamp")) << ',';
  out << detail::csv_field(opt.label_column) << '\n';
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    for (std::size_t j = 0; j < ds.cols(); ++j) {
      const double x = ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (!std::isnan(x)) out << fmt::format("{}", x);
      out << ',';
    }
    if (ds.timestamps) out << fmt::format("{}", (*ds.timestamps)[i]) << ',';
    out << ds.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

enum class PreprocessOp { dedup, impute_missing, standardize, minmax_scale };

/// Canonical application order.
inline constexpr PreprocessOp kAllPreprocessOps[] = {PreprocessOp::dedup, PreprocessOp::impute_missing,
                                                     PreprocessOp::standardize, PreprocessOp::minmax_scale};

inline std::string_view to_string(PreprocessOp op) noexcept {
  switch (op) {
    case PreprocessOp::dedup: return "dedup";
    case PreprocessOp::impute_missing: return "impute_missing";
    case PreprocessOp::standardize: return "standardize";
    case PreprocessOp::minmax_scale: return "minmax_scale";
  }
  return "?";
}

inline std::optional<PreprocessOp> parse_preprocess_op(std::string_view s) noexcept {
  for (PreprocessOp op : kAllPreprocessOps)
    if (to_string(op) == s) return op;
  return std::nullopt;
}

/// Column-wise map learned by apply_preprocessing: missing cells become
/// `fill`, then x -> scale * x + offset. Lets held-out data reuse training
/// statistics.
struct FittedPreprocessing {
  std::vector<double> fill;
  std::vector<double> scale;
  std::vector<double> offset;

  static FittedPreprocessing identity(std::size_t d) {
    return {std::vector<double>(d, std::nan("")), std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
  }

  Dataset apply(Dataset ds) const {
    if (ds.cols() != scale.size()) throw InvalidArgument("preprocessing fitted on a different feature count");
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      const auto k = static_cast<std::size_t>(j);
      for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
        double& x = ds.features(i, j);
        if (std::isnan(x)) x = fill[k];
        x = scale[k] * x + offset[k];
      }
    }
    return ds;
  }
};

struct PreprocessResult {
  Dataset data;
  std::vector<std::string> notices;
  FittedPreprocessing fitted;
};

namespace detail {

inline bool same_row(const Dataset& ds, std::size_t a, std::size_t b) {
  if (ds.labels[a] != ds.labels[b]) return false;
  if (ds.timestamps && (*ds.timestamps)[a] != (*ds.timestamps)[b]) return false;
  for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
    const double x = ds.features(static_cast<Eigen::Index>(a), j), y = ds.features(static_cast<Eigen::Index>(b), j);
    if (!(x == y || (std::isnan(x) && std::isnan(y)))) return false;
  }
  return true;
}

// Column statistics over the non-missing cells.
struct ColumnSummary {
  std::size_t present = 0;
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double max = 0.0;
};

inline ColumnSummary summarize_column(const Eigen::MatrixXd& x, Eigen::Index j) {
  ColumnSummary s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double v = x(i, j);
    if (std::isnan(v)) continue;
    ++s.present;
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  if (s.present == 0) return s;
  s.mean = sum / static_cast<double>(s.present);
  double ss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double v = x(i, j);
    if (!std::isnan(v)) ss += (v - s.mean) * (v - s.mean);
  }
  s.sd = std::sqrt(ss / static_cast<double>(s.present));
  return s;
}

}  // namespace detail

/// Drops exact duplicate rows (features, label and timestamp), keeping the
/// first occurrence.
inline Dataset dedup_rows(const Dataset& ds, std::size_t* removed = nullptr) {
  std::map<std::vector<std::uint64_t>, std::vector<std::size_t>> buckets;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    std::vector<std::uint64_t> key;
    key.reserve(ds.cols() + 1);
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      double v = ds.features(static_cast<Eigen::Index>(i), j);
      if (std::isnan(v)) v = std::numeric_limits<double>::quiet_NaN();
      if (v == 0.0) v = 0.0;  // fold -0 into +0
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      key.push_back(bits);
    }
    key.push_back(static_cast<std::uint64_t>(ds.labels[i]));
    auto& bucket = buckets[key];
    const bool dup = std::any_of(bucket.begin(), bucket.end(), [&](std::size_t k) { return detail::same_row(ds, k, i); });
    if (dup) continue;
    bucket.push_back(i);
    keep.push_back(i);
  }
  if (removed) *removed = ds.rows() - keep.size();
  return ds.select(keep);
}

/// Applies `ops` in the canonical order dedup -> impute -> standardize -> minmax.
inline PreprocessResult apply_preprocessing(const Dataset& input, const std::set<PreprocessOp>& ops) {
  input.validate();
  PreprocessResult r{input, {}, FittedPreprocessing::identity(input.cols())};
  Dataset& ds = r.data;
  auto& fit = r.fitted;
  // Fold a new affine step a*x + c into the fitted map, then apply it.
  auto affine = [&](Eigen::Index j, double a, double c) {
    const auto k = static_cast<std::size_t>(j);
    fit.scale[k] *= a;
    fit.offset[k] = a * fit.offset[k] + c;
    for (Eigen::Index i = 0; i < ds.features.rows(); ++i) ds.features(i, j) = a * ds.features(i, j) + c;
  };
  if (ops.count(PreprocessOp::dedup)) {
    std::size_t removed = 0;
    ds = dedup_rows(ds, &removed);
    if (removed > 0) r.notices.push_back(fmt::format("dedup: removed {} duplicate rows", removed));
  }
  if (ops.count(PreprocessOp::impute_missing)) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      const auto s = detail::summarize_column(ds.features, j);
      const double fill = s.present > 0 ? s.mean : 0.0;
      fit.fill[static_cast<std::size_t>(j)] = fill;
      if (s.present == static_cast<std::size_t>(ds.features.rows())) continue;
      if (s.present == 0)
        r.notices.push_back(fmt::format("impute_missing: column '{}' has no values; filled with 0", ds.column_names[j]));
      for (Eigen::Index i = 0; i < ds.features.rows(); ++i)
        if (std::isnan(ds.features(i, j))) ds.features(i, j) = fill;
    }
  }
  if (ops.count(PreprocessOp::standardize)) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      const auto s = detail::summarize_column(ds.features, j);
      double divisor = s.sd;
      if (!(divisor > 0.0)) {
        divisor = 1.0;
        r.notices.push_back(
            fmt::format("standardize: column '{}' is constant; centered with divisor 1", ds.column_names[j]));
      }
      affine(j, 1.0 / divisor, -s.mean / divisor);
    }
  }
  if (ops.count(PreprocessOp::minmax_scale)) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      const auto s = detail::summarize_column(ds.features, j);
      const double span = s.max - s.min;
      if (!(span > 0.0)) {
        r.notices.push_back(fmt::format("minmax_scale: column '{}' is constant; set to 0", ds.column_names[j]));
        affine(j, 0.0, 0.0);
        continue;
      }
      affine(j, 1.0 / span, -s.min / span);
    }
  }
  return r;
}

}  // namespace trainwatch
