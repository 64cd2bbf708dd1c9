#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace prinv {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses `key = value` lines. Blank lines and text after '#' are ignored.
// Throws ConfigError naming the line for anything else.
KeyValues parse_key_values(std::string_view text);

// "key=value" as given on a command line.
std::pair<std::string, std::string> parse_assignment(std::string_view text);

std::string format_key_values(const KeyValues& items);

bool parse_bool(std::string_view key, std::string_view value);
std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
double parse_double(std::string_view key, std::string_view value);
// Comma-separated sizes; "" and "none" give an empty list.
std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value);

std::string format_bool(bool value);
std::string format_double(double value);
std::string format_size_list(const std::vector<std::size_t>& values);

std::string read_text_file(const std::string& path);

}  // namespace prinv
