#pragma once

#include <charconv>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "stdemand/common.hpp"

namespace stdemand::csv {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Minimal splitter: honours double-quoted fields without embedded newlines.
inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == sep) {
      fields.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.emplace_back(trim(cur));
  return fields;
}

inline double to_double(std::string_view s, std::string_view what) {
  s = trim(s);
  // std::from_chars for double is available in libstdc++ 11.
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DataError("cannot parse " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

inline long long to_int(std::string_view s, std::string_view what) {
  s = trim(s);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DataError("cannot parse " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path) {
    if (!in_) throw DataError("cannot open " + path);
  }

  /// Next non-empty record, or false at end of file.
  bool next(std::vector<std::string>& fields) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (trim(line).empty()) continue;
      fields = split(line);
      return true;
    }
    return false;
  }

  std::size_t line() const { return line_no_; }

 private:
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

inline void expect_header(const std::vector<std::string>& got, const std::vector<std::string>& want,
                          const std::string& file) {
  if (got.size() < want.size()) throw DataError(file + ": header has too few columns");
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (got[i] != want[i]) throw DataError(file + ": expected column '" + want[i] + "', got '" + got[i] + "'");
  }
}

}  // namespace stdemand::csv
