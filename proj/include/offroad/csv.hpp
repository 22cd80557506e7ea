#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace offroad {

// Shortest text that parses back to the same double, padded to 17
// significant digits.
std::string format_double(double v);

// Header plus numeric rows. Throws DomainError on ragged rows and
// std::runtime_error when the file cannot be written.
void emit_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
              const std::vector<std::vector<double>>& rows);

std::string csv_text(const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows);

}  // namespace offroad
