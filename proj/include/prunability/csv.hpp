#pragma once

// Minimal CSV helpers shared by the file formats. Numbers are written in
// the shortest form that round-trips exactly.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace prunability::csv {

std::string format_double(double x);

std::vector<std::string_view> split(std::string_view line, char sep = ',');

/// Parses a full-field double; throws ParseError tagged with `line_no`.
double parse_double(std::string_view field, long line_no);
long parse_long(std::string_view field, long line_no);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

/// Reads a numeric table. When `expect_header` is non-empty the first line
/// must match it exactly. Every row must have header.size() fields.
Table read(const std::filesystem::path& path, const std::vector<std::string>& expect_header);

void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<double>>& rows);

}  // namespace prunability::csv
