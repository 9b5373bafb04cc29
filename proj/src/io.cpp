#include "qsdlab/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qsdlab {

uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xCBF29CE484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
  return buf;
}

std::string fmt17(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path,
                     const std::vector<std::string>& columns,
                     const std::string& config_hash)
    : ncol_(columns.size()) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f_ = f;
  std::fprintf(f, "# config_hash=%s\n", config_hash.c_str());
  for (size_t i = 0; i < columns.size(); ++i)
    std::fprintf(f, "%s%s", columns[i].c_str(),
                 i + 1 < columns.size() ? "," : "\n");
}

CsvWriter::~CsvWriter() {
  if (f_) std::fclose(static_cast<FILE*>(f_));
}

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != ncol_)
    throw std::invalid_argument("CsvWriter: column count mismatch");
  FILE* f = static_cast<FILE*>(f_);
  for (size_t i = 0; i < values.size(); ++i)
    std::fprintf(f, "%.17g%s", values[i], i + 1 < values.size() ? "," : "\n");
}

void CsvWriter::raw_row(const std::string& line) {
  std::fprintf(static_cast<FILE*>(f_), "%s\n", line.c_str());
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return json::parse(is);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace qsdlab
