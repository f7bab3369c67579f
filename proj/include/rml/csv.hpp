#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "rml/dataset.hpp"
#include "rml/error.hpp"

namespace rml {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw io_error("csv: missing column '" + name + "'");
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split(line, ',');
    std::vector<std::string> row(fields.begin(), fields.end());
    if (line_no == 1) {
      t.header = std::move(row);
    } else {
      if (row.size() != t.header.size())
        throw io_error("csv parse error: expected " +
                       std::to_string(t.header.size()) + " fields, got " +
                       std::to_string(row.size()) + " at line " +
                       std::to_string(line_no));
      t.rows.push_back(std::move(row));
    }
  }
  if (t.header.empty()) throw io_error("csv parse error: empty file " + path);
  return t;
}

inline void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) f << ',';
      f << row[i];
    }
    f << '\n';
  };
  emit(t.header);
  for (const auto& row : t.rows) emit(row);
  if (!f) throw io_error("write failed: " + path);
}

}  // namespace rml
