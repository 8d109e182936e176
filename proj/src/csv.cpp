#include "prunability/csv.hpp"

#include <charconv>
#include <fstream>

#include "prunability/errors.hpp"

namespace prunability::csv {

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

static std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_double(std::string_view field, long line_no) {
  field = trim(field);
  double v = 0.0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size() || field.empty())
    throw ParseError("malformed number '" + std::string(field) + "'", line_no);
  return v;
}

long parse_long(std::string_view field, long line_no) {
  field = trim(field);
  long v = 0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size() || field.empty())
    throw ParseError("malformed integer '" + std::string(field) + "'", line_no);
  return v;
}

Table read(const std::filesystem::path& path, const std::vector<std::string>& expect_header) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  Table t;
  std::string line;
  long line_no = 0;
  if (!expect_header.empty()) {
    if (!std::getline(in, line)) throw ParseError("missing header in " + path.string(), 1);
    ++line_no;
    for (auto f : split(trim(line))) t.header.emplace_back(trim(f));
    if (t.header != expect_header) throw ParseError("unexpected header in " + path.string(), 1);
  }
  while (std::getline(in, line)) {
    ++line_no;
    auto body = trim(line);
    if (body.empty()) continue;
    auto fields = split(body);
    if (!t.header.empty() && fields.size() != t.header.size())
      throw ParseError("expected " + std::to_string(t.header.size()) + " fields", line_no);
    if (t.header.empty() && !t.rows.empty() && fields.size() != t.rows.front().size())
      throw ParseError("ragged row", line_no);
    std::vector<double> row;
    row.reserve(fields.size());
    for (auto f : fields) row.push_back(parse_double(f, line_no));
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!header.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << format_double(row[i]);
    out << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace prunability::csv
