#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

namespace mlrecall {

// Shortest round-trip form; negative zero prints as 0.
inline std::string format_number(double v) { return fmt::format("{}", v == 0.0 ? 0.0 : v); }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

class CsvTable {
public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row(std::vector<std::string> cells) {
    cells.resize(header_.size());
    rows_.push_back(std::move(cells));
    return *this;
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  void write(std::ostream& out) const { out << str(); }

  std::string str() const {
    std::string s;
    auto add = [&s](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) s += ',';
        s += csv_escape(cells[i]);
      }
      s += '\n';
    };
    add(header_);
    for (const auto& r : rows_) add(r);
    return s;
  }

private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string cell(double v) { return format_number(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

} // namespace mlrecall
