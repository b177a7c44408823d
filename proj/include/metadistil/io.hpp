#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace metadistil::io {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep);
std::string trim(std::string_view text);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace metadistil::io
