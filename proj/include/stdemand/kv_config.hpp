#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace stdemand {

using KeyValues = std::map<std::string, std::string>;

/// Flat `key=value` text. Blank lines and `#` comments are skipped.
KeyValues read_key_values(const std::filesystem::path& path);
KeyValues parse_key_values(const std::string& text);
void write_key_values(const KeyValues& kv, const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

}  // namespace stdemand
