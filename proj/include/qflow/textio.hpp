#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qflow/errors.hpp"

namespace qflow::text {

/// printf-style %.<digits>g rendering.
inline std::string real(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// Rounds v to the value it takes after a print/parse cycle at `digits` significant digits.
inline double quantize(double v, int digits) { return std::strtod(real(v, digits).c_str(), nullptr); }

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

/// Parses the whole of `s` as a double; throws ParseError otherwise.
inline double parse_real(std::string_view s, std::size_t line = 0) {
  s = trim(s);
  const std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) throw ParseError("expected a real number, got '" + tmp + "'", line);
  return v;
}

template <class Int>
Int parse_int(std::string_view s, std::size_t line = 0) {
  s = trim(s);
  Int v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw ParseError("expected an integer, got '" + std::string(s) + "'", line);
  return v;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << contents;
  if (!out) throw Error("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Returns the value for `key` in a line of space-separated `key=value` fields.
inline std::string_view field(std::string_view line, std::string_view key, std::size_t lineno = 0) {
  for (auto tok : split_ws(line)) {
    const auto eq = tok.find('=');
    if (eq != std::string_view::npos && tok.substr(0, eq) == key) return tok.substr(eq + 1);
  }
  throw ParseError("missing field '" + std::string(key) + "'", lineno);
}

}  // namespace qflow::text
