#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

namespace sinemark::io {

using Json = nlohmann::json;

/// %.17g: enough digits for an exact double round trip.
std::string format17(double value);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Parses JSON and converts parse failures into ConfigError carrying the
/// byte offset and line number.
Json parse_json(const std::string& text, const std::string& origin);
Json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const Json& value);

/// Throws ConfigError naming the first field of `object` not in `allowed`.
void require_known_fields(const Json& object, std::initializer_list<std::string_view> allowed,
                          const std::string& where);

/// 64-bit FNV-1a, used for config hashes in run manifests.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace sinemark::io
