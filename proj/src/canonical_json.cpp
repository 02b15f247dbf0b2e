#include "neuronscope/canonical_json.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "neuronscope/errors.hpp"

namespace neuronscope {

namespace {

void append_escaped(std::string& out, const std::string& s) {
  out.push_back('"');
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\u%04x", c);
          out += buf;
        } else {
          out.push_back(c);
        }
    }
  }
  out.push_back('"');
}

void emit(std::string& out, const nlohmann::json& j) {
  using value_t = nlohmann::json::value_t;
  switch (j.type()) {
    case value_t::null: out += "null"; break;
    case value_t::boolean: out += j.get<bool>() ? "true" : "false"; break;
    case value_t::number_integer:
      out += std::to_string(j.get<int64_t>());
      break;
    case value_t::number_unsigned:
      out += std::to_string(j.get<uint64_t>());
      break;
    case value_t::number_float:
      out += format_double(j.get<double>());
      break;
    case value_t::string: append_escaped(out, j.get<std::string>()); break;
    case value_t::array: {
      out.push_back('[');
      bool first = true;
      for (const auto& el : j) {
        if (!first) out.push_back(',');
        first = false;
        emit(out, el);
      }
      out.push_back(']');
      break;
    }
    case value_t::object: {
      // nlohmann::json objects are std::map-backed: iteration is key-sorted.
      out.push_back('{');
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out.push_back(',');
        first = false;
        append_escaped(out, it.key());
        out.push_back(':');
        emit(out, it.value());
      }
      out.push_back('}');
      break;
    }
    default:
      throw UsageError("unsupported JSON value type in canonical dump");
  }
}

}  // namespace

std::string format_double(double v) {
  if (!std::isfinite(v)) throw NumericError("non-finite value in artifact");
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

std::string dump_canonical(const nlohmann::json& j) {
  std::string out;
  emit(out, j);
  return out;
}

nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ArtifactError("cannot open JSON file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace neuronscope
