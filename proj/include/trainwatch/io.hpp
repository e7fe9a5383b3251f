// SPDX-License-Identifier: Apache-2.0
#pragma once

// File helpers: whole-file and line reads (transparently gunzipping "*.gz"),
// and atomic writes via a sibling temp file plus rename.

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "trainwatch/error.hpp"

namespace trainwatch {

inline bool has_gz_suffix(std::string_view path) noexcept {
  return path.size() >= 3 && path.substr(path.size() - 3) == ".gz";
}

inline std::string read_file(const std::string& path) {
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw IoError("cannot open " + path);
    std::string out;
    char buf[1 << 15];
    int got = 0;
    while ((got = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(got));
    int errnum = Z_OK;
    const char* msg = gzerror(f, &errnum);
    const bool failed = got < 0 || (errnum != Z_OK && errnum != Z_STREAM_END);
    const std::string what = failed ? std::string(msg) : std::string();
    gzclose(f);
    if (failed) throw IoError("gzip read failed for " + path + ": " + what);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Splits on '\n', dropping a trailing '\r' and a final empty line.
inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

/// Writes through `fill` into "<path>.tmp", then renames over `path`.
/// The temp file is removed if `fill` throws.
inline void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& fill) {
  const std::string tmp = path + ".tmp";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot create " + tmp);
      fill(out);
      out.flush();
      if (!out) throw IoError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
}

inline void write_file_atomic(const std::string& path, const std::string& content) {
  write_file_atomic(path, [&](std::ostream& out) { out << content; });
}

}  // namespace trainwatch
