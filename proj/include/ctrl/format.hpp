#pragma once

// Locale-independent number formatting and a small CSV writer. Every numeric
// artifact the library writes goes through format_double.

#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace ctrl {

/// Shortest-form-independent rendering with 17 significant digits, so a
/// double survives a text round trip bit-exactly.
std::string format_double(double v);
double parse_double(std::string_view text);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);
  void row_numbers(const std::vector<double>& values);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  size_t columns_;
};

std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

}  // namespace ctrl
