#pragma once

// Observation CSV: header `x1,...,xd,a,y,delta,r`; floats for x/y, integers for a/delta/r.

#include <charconv>
#include <cmath>
#include <locale>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  in >> v;
  return !in.fail() && in.eof() && std::isfinite(v);
}

inline bool parse_int(const std::string& s, int& v) {
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace detail

inline void write_observations(std::ostream& out, const Dataset& data) {
  const std::size_t d = data.empty() ? 0 : data.front().x.size();
  for (std::size_t j = 0; j < d; ++j) out << 'x' << (j + 1) << ',';
  out << "a,y,delta,r\n";
  for (const auto& o : data) {
    require(o.x.size() == d, ErrorKind::InvalidInput, "inconsistent covariate dimension");
    for (double v : o.x) out << format_double(v) << ',';
    out << o.a << ',' << format_double(o.y) << ',' << o.delta << ',' << o.r << '\n';
  }
}

/// Parses the observation CSV; errors name the 1-based data row (header is row 0).
inline Dataset read_observations(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::IngestionError, "missing header");
  const auto header = detail::split_csv_line(line);
  require(header.size() >= 4, ErrorKind::IngestionError, "header must end with a,y,delta,r");
  const std::size_t d = header.size() - 4;
  for (std::size_t j = 0; j < d; ++j)
    require(header[j] == "x" + std::to_string(j + 1), ErrorKind::IngestionError,
            "header column " + std::to_string(j + 1) + " must be x" + std::to_string(j + 1));
  require(header[d] == "a" && header[d + 1] == "y" && header[d + 2] == "delta" && header[d + 3] == "r",
          ErrorKind::IngestionError, "header must end with a,y,delta,r");

  Dataset data;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    const std::string where = "row " + std::to_string(row);
    require(f.size() == header.size(), ErrorKind::IngestionError, where + ": expected " +
            std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    Observation o;
    o.x.resize(d);
    for (std::size_t j = 0; j < d; ++j)
      require(detail::parse_double(f[j], o.x[j]), ErrorKind::IngestionError, where + ": bad covariate x" + std::to_string(j + 1));
    require(detail::parse_int(f[d], o.a) && (o.a == 0 || o.a == 1), ErrorKind::IngestionError, where + ": a must be 0 or 1");
    require(detail::parse_double(f[d + 1], o.y) && o.y >= 0.0, ErrorKind::IngestionError, where + ": y must be a nonnegative number");
    require(detail::parse_int(f[d + 2], o.delta) && (o.delta == 0 || o.delta == 1), ErrorKind::IngestionError,
            where + ": delta must be 0 or 1");
    require(detail::parse_int(f[d + 3], o.r) && o.r >= 0, ErrorKind::IngestionError, where + ": r must be a nonnegative integer");
    data.push_back(std::move(o));
  }
  return data;
}

}  // namespace fedsurv
