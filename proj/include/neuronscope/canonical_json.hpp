#pragma once

#include <string>

#include <json.hpp>

namespace neuronscope {

/// Serializes JSON canonically: object keys sorted, no insignificant
/// whitespace, doubles printed with 17 significant digits so byte-equal
/// artifacts mean value-equal artifacts.
std::string dump_canonical(const nlohmann::json& j);

/// Fixed 17-significant-digit rendering of a double (round-trip exact).
std::string format_double(double v);

nlohmann::json parse_json_file(const std::string& path);

}  // namespace neuronscope
