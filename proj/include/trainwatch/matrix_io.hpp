// SPDX-License-Identifier: Apache-2.0
#pragma once

// Matrix files for the XAI commands.
//
// CSV: one matrix row per line, comma separated. Blank lines separate the
// blocks of a stack (attention heads, feature-map channels). A first line
// that does not parse as numbers is taken as a header and skipped.
//
// JSON: a 2-D array (one matrix) or a 3-D array (a stack), optionally
// wrapped in an object under a named key.

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "trainwatch/dataset.hpp"
#include "trainwatch/error.hpp"
#include "trainwatch/io.hpp"

namespace trainwatch {

namespace detail {

inline std::optional<std::vector<double>> numeric_row(const std::string& line, std::size_t line_no) {
  std::vector<double> row;
  for (const auto& cell : split_csv_line(line, line_no)) {
    std::optional<double> v;
    try {
      v = parse_double(trim(cell));
    } catch (const InvalidArgument&) {
      return std::nullopt;
    }
    if (!v) return std::nullopt;
    row.push_back(*v);
  }
  return row;
}

inline Eigen::MatrixXd rows_to_matrix(const std::vector<std::vector<double>>& rows, const std::string& what) {
  const auto cols = rows.front().size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != cols) throw InvalidArgument(fmt::format("{}: ragged row {}", what, i + 1));
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(rows[i][j])) throw InvalidArgument(fmt::format("{}: non-finite value in row {}", what, i + 1));
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

inline Eigen::MatrixXd json_matrix(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw InvalidArgument(what + ": expected a non-empty 2-D array");
  std::vector<std::vector<double>> rows;
  for (const auto& r : j) {
    try {
      rows.push_back(r.get<std::vector<double>>());
    } catch (const nlohmann::json::exception&) {
      throw InvalidArgument(what + ": rows must be arrays of numbers");
    }
    if (rows.back().empty()) throw InvalidArgument(what + ": empty row");
  }
  return rows_to_matrix(rows, what);
}

}  // namespace detail

inline std::vector<Eigen::MatrixXd> parse_matrix_csv(const std::string& text, const std::string& what = "matrix") {
  std::vector<Eigen::MatrixXd> blocks;
  std::vector<std::vector<double>> rows;
  bool first = true;
  auto close = [&] {
    if (!rows.empty()) blocks.push_back(detail::rows_to_matrix(rows, what));
    rows.clear();
  };
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::trim(lines[i]).empty()) {
      close();
      continue;
    }
    auto row = detail::numeric_row(lines[i], i + 1);
    if (!row) {
      if (first) {
        first = false;
        continue;
      }
      throw ParseError(fmt::format("{}: line {}: non-numeric cell", what, i + 1), 0, "");
    }
    first = false;
    rows.push_back(std::move(*row));
  }
  close();
  if (blocks.empty()) throw InvalidArgument(what + ": no numeric rows");
  return blocks;
}

/// `key` selects a member when the document is an object.
inline std::vector<Eigen::MatrixXd> parse_matrix_json(const nlohmann::json& doc, const std::string& key = {},
                                                      const std::string& what = "matrix") {
  const nlohmann::json* j = &doc;
  if (doc.is_object()) {
    if (key.empty() || !doc.contains(key)) throw InvalidArgument(fmt::format("{}: missing key '{}'", what, key));
    j = &doc.at(key);
  }
  if (!j->is_array() || j->empty()) throw InvalidArgument(what + ": expected a non-empty array");
  if (j->front().is_array() && !j->front().empty() && j->front().front().is_array()) {
    std::vector<Eigen::MatrixXd> out;
    for (const auto& m : *j) out.push_back(detail::json_matrix(m, what));
    return out;
  }
  return {detail::json_matrix(*j, what)};
}

/// Dispatches on the ".json" suffix; anything else is CSV.
inline std::vector<Eigen::MatrixXd> read_matrices(const std::string& path, const std::string& key = {}) {
  const auto text = read_file(path);
  const bool json = path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0;
  if (!json) return parse_matrix_csv(text, path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte, "");
  }
  return parse_matrix_json(doc, key, path);
}

inline void write_matrix_csv(std::ostream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << fmt::format("{}", m(i, j));
    }
    out << '\n';
  }
}

}  // namespace trainwatch
