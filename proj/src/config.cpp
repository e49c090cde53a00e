#include "convoher2/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "convoher2/error.hpp"
#include "convoher2/head.hpp"

extern char** environ;

namespace convoher2 {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorCode::TypeError, "config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double to_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  bad_value(key, value, "a real number");
}

template <typename Int>
Int to_integer(const std::string& key, const std::string& value) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc{} || ptr != value.data() + value.size()) bad_value(key, value, "an integer");
  return v;
}

bool to_bool(const std::string& key, const std::string& value) {
  std::string v = value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  bad_value(key, value, "a boolean");
}

std::string real_text(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

struct Field {
  std::function<void(PipelineConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["learning_rate"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.learning_rate = to_real(k, v); },
                          [](const PipelineConfig& c) { return real_text(c.train.learning_rate); }};
    t["batch_size"] = {
        [](PipelineConfig& c, const auto& k, const auto& v) { c.train.batch_size = to_integer<std::size_t>(k, v); },
        [](const PipelineConfig& c) { return std::to_string(c.train.batch_size); }};
    t["epochs"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.epochs = to_integer<int>(k, v); },
                   [](const PipelineConfig& c) { return std::to_string(c.train.epochs); }};
    t["optimizer"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.train.optimizer = v; },
                      [](const PipelineConfig& c) { return c.train.optimizer; }};
    t["beta1"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.beta1 = to_real(k, v); },
                  [](const PipelineConfig& c) { return real_text(c.train.beta1); }};
    t["beta2"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.beta2 = to_real(k, v); },
                  [](const PipelineConfig& c) { return real_text(c.train.beta2); }};
    t["adam_epsilon"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.adam_epsilon = to_real(k, v); },
                         [](const PipelineConfig& c) { return real_text(c.train.adam_epsilon); }};
    t["loss"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.train.loss = v; },
                 [](const PipelineConfig& c) { return c.train.loss; }};
    t["seed"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train.seed = to_integer<std::uint64_t>(k, v); },
                 [](const PipelineConfig& c) { return std::to_string(c.train.seed); }};
    t["checkpoint_monitor"] = {
        [](PipelineConfig& c, const auto& k, const auto& v) {
          try {
            c.train.checkpoint_monitor = parse_monitor(v);
          } catch (const Error&) {
            bad_value(k, v, "train_loss or val_loss");
          }
        },
        [](const PipelineConfig& c) { return std::string(to_string(c.train.checkpoint_monitor)); }};
    t["modality"] = {[](PipelineConfig& c, const auto& k, const auto& v) {
                       try {
                         c.train.modality = parse_modality(v);
                       } catch (const Error&) {
                         bad_value(k, v, "HE or IHC");
                       }
                     },
                     [](const PipelineConfig& c) { return std::string(to_string(c.train.modality)); }};
    t["data_root"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.data_root = v; },
                      [](const PipelineConfig& c) { return c.data_root.string(); }};
    t["out_dir"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.out_dir = v; },
                    [](const PipelineConfig& c) { return c.out_dir.string(); }};
    t["backbone"] = {[](PipelineConfig& c, const auto& k, const auto& v) {
                       if (v != "inception_v3" && v != "stub") bad_value(k, v, "inception_v3 or stub");
                       c.backbone = v;
                     },
                     [](const PipelineConfig& c) { return c.backbone; }};
    t["backbone_weights"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.backbone_weights = v; },
                             [](const PipelineConfig& c) { return c.backbone_weights.string(); }};
    t["backbone_seed"] = {
        [](PipelineConfig& c, const auto& k, const auto& v) { c.backbone_seed = to_integer<std::uint64_t>(k, v); },
        [](const PipelineConfig& c) { return std::to_string(c.backbone_seed); }};
    t["augment"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.augment = to_bool(k, v); },
                    [](const PipelineConfig& c) { return std::string(c.augment ? "true" : "false"); }};
    t["image_side"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.image_side = to_integer<int>(k, v); },
                       [](const PipelineConfig& c) { return std::to_string(c.image_side); }};
    t["train_fraction"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.train_fraction = to_real(k, v); },
                           [](const PipelineConfig& c) { return real_text(c.train_fraction); }};
    t["stratified"] = {[](PipelineConfig& c, const auto& k, const auto& v) { c.stratified = to_bool(k, v); },
                       [](const PipelineConfig& c) { return std::string(c.stratified ? "true" : "false"); }};
    t["use_cached_features"] = {
        [](PipelineConfig& c, const auto& k, const auto& v) { c.use_cached_features = to_bool(k, v); },
        [](const PipelineConfig& c) { return std::string(c.use_cached_features ? "true" : "false"); }};
    t["feature_cache"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.feature_cache = v; },
                          [](const PipelineConfig& c) { return c.feature_cache.string(); }};
    t["label_pattern"] = {[](PipelineConfig& c, const auto&, const auto& v) { c.label_pattern = v; },
                          [](const PipelineConfig& c) { return c.label_pattern; }};
    return t;
  }();
  return table;
}

void apply(PipelineConfig& config, const KeyValues& values, const char* origin) {
  const auto& table = fields();
  for (const auto& [key, value] : values) {
    const auto it = table.find(key);
    if (it == table.end()) throw Error(ErrorCode::UnknownKey, std::string("unknown ") + origin + " key '" + key + "'");
    it->second.set(config, key, value);
  }
}

}  // namespace

std::vector<std::string> PipelineConfig::resolved_lines() const {
  std::vector<std::string> lines;
  for (const auto& [key, field] : fields()) lines.push_back(key + "=" + field.get(*this));
  return lines;
}

std::string PipelineConfig::config_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& line : resolved_lines()) {
    h = fnv1a64(line.data(), line.size(), h);
    h = fnv1a64("\n", 1, h);
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& entry : fields()) k.push_back(entry.first);
    return k;
  }();
  return keys;
}

KeyValues parse_config_text(std::string_view text) {
  KeyValues out;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::TypeError, "config line " + std::to_string(line_no) + " is not key=value: " + line);
    }
    out[trim(std::string_view(line).substr(0, eq))] = trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str());
}

KeyValues config_from_environment(const KeyValues& environment) {
  KeyValues out;
  for (const auto& key : config_keys()) {
    std::string name(kEnvPrefix);
    for (char c : key) name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (const auto it = environment.find(name); it != environment.end()) out[key] = it->second;
  }
  return out;
}

KeyValues current_environment() {
  KeyValues out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string_view entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos) continue;
    out[std::string(entry.substr(0, eq))] = std::string(entry.substr(eq + 1));
  }
  return out;
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& file, const KeyValues& environment,
                           const KeyValues& flags) {
  PipelineConfig config;
  if (file) apply(config, read_config_file(*file), "config file");
  apply(config, config_from_environment(environment), "environment");
  apply(config, flags, "flag");
  return config;
}

}  // namespace convoher2
