#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace qsdlab {

using json = nlohmann::json;

uint64_t fnv1a64(const void* data, size_t n);
std::string hex64(uint64_t v);

// All numeric output uses 17 significant digits so files round-trip doubles.
std::string fmt17(double v);

// CSV with a frozen column order: one comment line carrying the config hash,
// then the header, then rows.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns,
            const std::string& config_hash);
  ~CsvWriter();
  void row(const std::vector<double>& values);
  void raw_row(const std::string& line);

 private:
  void* f_ = nullptr;
  size_t ncol_;
};

void write_json_file(const std::string& path, const json& j);
json read_json_file(const std::string& path);
std::string read_text_file(const std::string& path);

}  // namespace qsdlab
