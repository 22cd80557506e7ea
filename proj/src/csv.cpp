#include "offroad/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "offroad/common.hpp"

namespace offroad {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

namespace {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string csv_text(const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows) {
  if (header.empty()) throw DomainError("csv header is empty");
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += quote(header[i]);
  }
  out += '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != header.size()) {
      throw DomainError("csv row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                        " fields, header has " + std::to_string(header.size()));
    }
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      if (i) out += ',';
      out += format_double(rows[r][i]);
    }
    out += '\n';
  }
  return out;
}

void emit_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
              const std::vector<std::vector<double>>& rows) {
  const std::string text = csv_text(header, rows);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace offroad
