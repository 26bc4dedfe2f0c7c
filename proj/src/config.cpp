#include "pseg/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace pseg {

namespace {

std::string float_repr(float v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

int64_t parse_int(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    fail(ErrCode::Config, "key '" + key + "' expects an integer, got '" + value + "'");
  return static_cast<int64_t>(v);
}

uint64_t parse_uint(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0' || value.find('-') != std::string::npos)
    fail(ErrCode::Config, "key '" + key + "' expects a non-negative integer, got '" + value + "'");
  return static_cast<uint64_t>(v);
}

float parse_float(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const float v = std::strtof(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    fail(ErrCode::Config, "key '" + key + "' expects a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail(ErrCode::Config, "key '" + key + "' expects true/false, got '" + value + "'");
}

struct Field {
  std::string key;
  std::function<void(AppConfig&, const std::string&)> set;
  std::function<std::string(const AppConfig&)> get;
};

const std::vector<Field>& fields() {
  auto int_field = [](std::string key, int64_t AppConfig::* member) {
    return Field{key,
                 [key, member](AppConfig& c, const std::string& v) { c.*member = parse_int(key, v); },
                 [member](const AppConfig& c) { return std::to_string(c.*member); }};
  };
  auto float_field = [](std::string key, float AppConfig::* member) {
    return Field{key,
                 [key, member](AppConfig& c, const std::string& v) { c.*member = parse_float(key, v); },
                 [member](const AppConfig& c) { return float_repr(c.*member); }};
  };
  auto bool_field = [](std::string key, bool AppConfig::* member) {
    return Field{key,
                 [key, member](AppConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
                 [member](const AppConfig& c) { return (c.*member) ? "true" : "false"; }};
  };
  auto string_field = [](std::string key, std::string AppConfig::* member) {
    return Field{key, [member](AppConfig& c, const std::string& v) { c.*member = v; },
                 [member](const AppConfig& c) { return c.*member; }};
  };
  static const std::vector<Field> table = {
      int_field("classes", &AppConfig::classes),
      int_field("height", &AppConfig::height),
      int_field("width", &AppConfig::width),
      int_field("channels", &AppConfig::channels),
      int_field("samples", &AppConfig::samples),
      int_field("sample_offset", &AppConfig::sample_offset),
      int_field("shapes_min", &AppConfig::shapes_min),
      int_field("shapes_max", &AppConfig::shapes_max),
      float_field("snr", &AppConfig::snr),
      Field{"seed", [](AppConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); },
            [](const AppConfig& c) { return std::to_string(c.seed); }},
      int_field("tokens_per_class", &AppConfig::tokens_per_class),
      int_field("r_dense", &AppConfig::r_dense),
      int_field("r_sparse", &AppConfig::r_sparse),
      int_field("decoder_layers", &AppConfig::decoder_layers),
      int_field("output_tokens", &AppConfig::output_tokens),
      int_field("upscale", &AppConfig::upscale),
      int_field("head_channels", &AppConfig::head_channels),
      float_field("learning_rate", &AppConfig::learning_rate),
      int_field("batch_size", &AppConfig::batch_size),
      int_field("max_steps", &AppConfig::max_steps),
      float_field("tau", &AppConfig::tau),
      bool_field("pcl_enabled", &AppConfig::pcl_enabled),
      bool_field("fixed_prototypes", &AppConfig::fixed_prototypes),
      string_field("train_manifest", &AppConfig::train_manifest),
      string_field("eval_manifest", &AppConfig::eval_manifest),
      int_field("eval_interval", &AppConfig::eval_interval),
      string_field("checkpoint_out", &AppConfig::checkpoint_out),
      string_field("history_out", &AppConfig::history_out),
  };
  return table;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

AppConfig parse_config_text(const std::string& text) {
  AppConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrCode::Config, "line " + std::to_string(lineno) + " is not key=value: '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (f.key == key) {
        field = &f;
        break;
      }
    if (!field) fail(ErrCode::Config, "unknown key '" + key + "'");
    if (!seen.insert(key).second) fail(ErrCode::Config, "duplicate key '" + key + "'");
    field->set(cfg, value);
  }
  return cfg;
}

AppConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrCode::Io, "cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const AppConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace pseg
