#pragma once

// JSON and CSV encodings for vectors, matrices, instances, partitions and
// datasets. Doubles are written in shortest round-trip form, so a value read
// back is bitwise equal to the one written.

#include <charconv>
#include <cstddef>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "fedmsa/datagen.hpp"
#include "fedmsa/errors.hpp"
#include "fedmsa/instances.hpp"
#include "fedmsa/numerics.hpp"

namespace fedmsa {

using Json = nlohmann::ordered_json;

// Locale-independent shortest representation.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc{}) throw Error("format_double: conversion failed");
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw ConfigError("not a number: '" + std::string(s) + "'");
  return v;
}

inline Json to_json(const Vector& v) { return Json(v.values()); }

inline Vector vector_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("expected a JSON array of numbers");
  Vector v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("expected a JSON array of numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

// Row-major list of rows.
inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (std::size_t k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j, std::size_t rows, std::size_t cols) {
  if (!j.is_array() || j.size() != rows)
    throw ConfigError("expected a matrix with " + std::to_string(rows) + " rows");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const Vector r = vector_from_json(j[i]);
    if (r.size() != cols)
      throw ConfigError("expected matrix rows of length " + std::to_string(cols));
    for (std::size_t k = 0; k < cols; ++k) m(i, k) = r[k];
  }
  return m;
}

namespace detail {

inline const Json& require_key(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw ConfigError(std::string("missing field '") + key + "'");
  return j.at(key);
}

}  // namespace detail

inline Json to_json(const QuadraticBilevelInstance& inst) {
  Json clients = Json::array();
  for (const auto& c : inst.clients) {
    clients.push_back(Json{{"A", to_json(c.A)}, {"B", to_json(c.B)}, {"c", to_json(c.c)},
                           {"C", to_json(c.C)}, {"t", to_json(c.t)}, {"D", to_json(c.D)}});
  }
  return Json{{"d1", inst.d1},
              {"d2", inst.d2},
              {"sigma_f", inst.sigma_f},
              {"sigma_g", inst.sigma_g},
              {"tau", inst.tau},
              {"mu_g", inst.mu_g},
              {"L_g", inst.L_g},
              {"heterogeneity", inst.heterogeneity},
              {"x0", to_json(inst.x0)},
              {"clients", std::move(clients)}};
}

inline QuadraticBilevelInstance bilevel_from_json(const Json& j) {
  try {
    QuadraticBilevelInstance inst;
    inst.d1 = detail::require_key(j, "d1").get<std::size_t>();
    inst.d2 = detail::require_key(j, "d2").get<std::size_t>();
    inst.sigma_f = j.value("sigma_f", 0.0);
    inst.sigma_g = j.value("sigma_g", 0.0);
    inst.tau = j.value("tau", 0.0);
    inst.mu_g = j.value("mu_g", 0.0);
    inst.L_g = j.value("L_g", 0.0);
    inst.heterogeneity = j.value("heterogeneity", 0.0);
    if (j.contains("x0")) inst.x0 = vector_from_json(j.at("x0"));
    const std::size_t d1 = inst.d1;
    const std::size_t d2 = inst.d2;
    for (const auto& c : detail::require_key(j, "clients")) {
      BilevelClient cl;
      cl.A = matrix_from_json(detail::require_key(c, "A"), d2, d2);
      cl.B = matrix_from_json(detail::require_key(c, "B"), d2, d1);
      cl.c = vector_from_json(detail::require_key(c, "c"));
      cl.C = matrix_from_json(detail::require_key(c, "C"), d2, d2);
      cl.t = vector_from_json(detail::require_key(c, "t"));
      cl.D = matrix_from_json(detail::require_key(c, "D"), d1, d1);
      inst.clients.push_back(std::move(cl));
    }
    inst.validate();
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bilevel instance: ") + e.what());
  }
}

// Partitions serialize as a plain list of index lists.
inline Json to_json(const std::vector<std::vector<std::size_t>>& clients) { return Json(clients); }

inline std::vector<std::vector<std::size_t>> partition_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("partition: expected a list of index lists");
  std::vector<std::vector<std::size_t>> out;
  for (const auto& client : j) {
    if (!client.is_array()) throw ConfigError("partition: expected a list of index lists");
    auto& indices = out.emplace_back();
    for (const auto& i : client) {
      if (!i.is_number_unsigned()) throw ConfigError("partition: indices must be unsigned integers");
      indices.push_back(i.get<std::size_t>());
    }
  }
  return out;
}

// Columns a_1..a_d, b.
inline void write_dataset_csv(std::ostream& os, const std::vector<Vector>& a,
                              const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("write_dataset_csv: a and b differ in length");
  const std::size_t d = a.empty() ? 0 : a.front().size();
  for (std::size_t k = 0; k < d; ++k) os << "a_" << (k + 1) << ',';
  os << "b\n";
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != d) throw ShapeError("write_dataset_csv: ragged rows");
    for (std::size_t k = 0; k < d; ++k) os << format_double(a[i][k]) << ',';
    os << format_double(b[i]) << '\n';
  }
}

inline void read_dataset_csv(std::istream& is, std::vector<Vector>& a, std::vector<double>& b) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("dataset csv: empty input");
  std::size_t cols = 1;
  for (char ch : line) cols += ch == ',';
  if (cols < 2) throw ConfigError("dataset csv: need at least one feature column");
  a.clear();
  b.clear();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      row.push_back(parse_double(std::string_view(line).substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (row.size() != cols)
      throw ConfigError("dataset csv: line " + std::to_string(lineno) + " has " +
                        std::to_string(row.size()) + " fields, expected " + std::to_string(cols));
    b.push_back(row.back());
    row.pop_back();
    a.emplace_back(std::move(row));
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace fedmsa
