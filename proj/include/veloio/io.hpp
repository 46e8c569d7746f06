#pragma once

#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "veloio/common.hpp"

namespace veloio::io {

/// Shortest decimal representation that round-trips the 64-bit value.
inline std::string format_double(double v) {
  std::array<char, 64> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

/// Write via a temp file and rename, so failures never leave partial output.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out << content;
    if (!out.good()) {
      out.close();
      fs::remove(tmp);
      throw DataError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw DataError("rename failed: " + path.string() + ": " + ec.message());
  }
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw DataError("csv: missing column '" + name + "'");
  }
  bool has_column(const std::string& name) const {
    for (const auto& h : header)
      if (h == name) return true;
    return false;
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty csv: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t pos = 0;
  while (pos <= line.size()) {
    std::size_t next = line.find(',', pos);
    if (next == std::string::npos) next = line.size();
    t.header.push_back(line.substr(pos, next - pos));
    pos = next + 1;
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(t.header.size());
    const char* p = line.c_str();
    const char* end = p + line.size();
    while (p <= end) {
      char* after = nullptr;
      const double v = std::strtod(p, &after);
      if (after == p)
        throw DataError("csv: parse error at " + path.string() + ":" +
                        std::to_string(line_no));
      row.push_back(v);
      p = after;
      if (p < end && *p == ',') ++p;
      else break;
    }
    if (row.size() != t.header.size())
      throw DataError("csv: wrong field count at " + path.string() + ":" +
                      std::to_string(line_no));
    t.rows.push_back(std::move(row));
  }
  return t;
}

class CsvBuilder {
 public:
  explicit CsvBuilder(const std::vector<std::string>& header) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ += ',';
      out_ += header[i];
    }
    out_ += '\n';
    cols_ = header.size();
  }
  void row(const std::vector<double>& values) {
    if (values.size() != cols_) throw ShapeError("csv row width mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ += ',';
      out_ += format_double(values[i]);
    }
    out_ += '\n';
  }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
  std::size_t cols_ = 0;
};

}  // namespace veloio::io
