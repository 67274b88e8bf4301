#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace hetflow::csv {

/// Splits one comma-delimited line (no quoting). Trailing '\r' is dropped.
std::vector<std::string> split_line(std::string_view line);

/// Parses a finite double; the whole field must be consumed.
bool parse_double(std::string_view field, double& out);
bool parse_int(std::string_view field, int& out);

/// Shortest-round-trip text for a double ("%.17g").
std::string format_double(double v);

std::string trim(std::string_view s);

}  // namespace hetflow::csv
