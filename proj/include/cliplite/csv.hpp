#pragma once

// Minimal CSV emission and a strict reader (header required, no ragged rows).
// Fields never contain commas, quotes or newlines here, so no quoting.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cliplite/binary_io.hpp"

namespace cliplite {

/// Shortest decimal that round-trips a double.
inline std::string format_double(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {
    if (header_.empty()) throw std::invalid_argument("csv: empty header");
    line(header_);
  }

  CsvWriter& row(const std::vector<std::string>& fields) {
    if (fields.size() != header_.size()) {
      throw std::invalid_argument("csv: row has " + std::to_string(fields.size()) + " fields, header has " +
                                  std::to_string(header_.size()));
    }
    line(fields);
    return *this;
  }

  const std::string& str() const noexcept { return out_; }

  void write(const std::filesystem::path& path) const { io::write_file_atomic(path, out_); }

 private:
  void line(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].find_first_of(",\"\n\r") != std::string::npos) {
        throw std::invalid_argument("csv: field '" + fields[i] + "' needs quoting");
      }
      if (i) out_ += ',';
      out_ += fields[i];
    }
    out_ += '\n';
  }

  std::vector<std::string> header_;
  std::string out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::out_of_range("csv: no column '" + name + "'");
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Parses text that must start with a header and contain only full rows.
inline CsvTable parse_csv_strict(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) throw std::invalid_argument("csv: empty line " + std::to_string(lineno));
    auto fields = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw std::invalid_argument("csv: ragged row at line " + std::to_string(lineno));
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw std::invalid_argument("csv: missing header");
  return t;
}

inline CsvTable read_csv_strict(const std::filesystem::path& path) {
  return parse_csv_strict(io::read_file(path));
}

}  // namespace cliplite
