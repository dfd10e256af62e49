#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dpe {

/// Shortest round-trip decimal form; "nan" for NaN.
std::string format_double(double v);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// Minimal CSV builder: header row, comma-separated, LF line endings.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& row(std::vector<std::string> cells);
  const std::string& str() const { return out_; }
  std::size_t rows() const { return rows_; }

 private:
  std::size_t columns_;
  std::size_t rows_ = 0;
  std::string out_;
};

}  // namespace dpe
