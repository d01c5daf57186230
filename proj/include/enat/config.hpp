#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "enat/decoder_input.hpp"
#include "enat/training.hpp"
#include "enat/transformer.hpp"

namespace enat {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every tunable of a pipeline run. Text form is one `key = value` per line;
/// `#` starts a comment. Keys:
///
///   decoder_input        copy | phrase | word | embed
///   mu, lambda           loss weights
///   epochs, max_tokens, seed, patience, clip_norm
///   learning_rate, warmup_steps
///   discriminator_rate, discriminator_steps
///   tau, raw_kernel      soft length kernel
///   layers, d_model, heads, d_ff, dropout, max_positions
///   alpha                length ratio (default: measured on the training corpus)
///   window_B, beam
///   max_phrase_length, ibm1_iterations
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  std::optional<double> alpha;
  std::size_t window_b = 0;
  std::size_t beam = 4;
  std::size_t max_phrase_length = 3;
  std::size_t ibm1_iterations = 10;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "decoder_input", "mu", "lambda", "epochs", "max_tokens", "seed", "patience", "clip_norm",
        "learning_rate", "warmup_steps", "discriminator_rate", "discriminator_steps", "tau", "raw_kernel",
        "layers", "d_model", "heads", "d_ff", "dropout", "max_positions", "alpha", "window_B", "beam",
        "max_phrase_length", "ibm1_iterations"};
    return k;
  }

  void set(const std::string& key, const std::string& value) {
    auto real = [&] { return parse_real(key, value); };
    auto count = [&] { return parse_count(key, value); };
    if (key == "decoder_input") {
      try {
        train.method = parse_decoder_input_method(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "mu") train.mu = real();
    else if (key == "lambda") train.lambda = real();
    else if (key == "epochs") train.epochs = count();
    else if (key == "max_tokens") train.max_tokens = count();
    else if (key == "seed") train.seed = count();
    else if (key == "patience") train.patience = count();
    else if (key == "clip_norm") train.clip_norm = real();
    else if (key == "learning_rate") train.schedule.base_rate = real();
    else if (key == "warmup_steps") train.schedule.warmup_steps = count();
    else if (key == "discriminator_rate") train.discriminator_rate = real();
    else if (key == "discriminator_steps") train.discriminator_steps = count();
    else if (key == "tau") train.tau = real();
    else if (key == "raw_kernel") train.raw_kernel = parse_bool(key, value);
    else if (key == "layers") model.num_layers = count();
    else if (key == "d_model") model.d_model = count();
    else if (key == "heads") model.num_heads = count();
    else if (key == "d_ff") model.d_ff = count();
    else if (key == "dropout") model.dropout = real();
    else if (key == "max_positions") model.max_positions = count();
    else if (key == "alpha") alpha = real();
    else if (key == "window_B") window_b = count();
    else if (key == "beam") beam = count();
    else if (key == "max_phrase_length") max_phrase_length = count();
    else if (key == "ibm1_iterations") ibm1_iterations = count();
    else throw ConfigError("unknown config key '" + key + "'");
  }

  void validate() const {
    try {
      train.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    if (train.discriminator_steps == 0) throw ConfigError("discriminator_steps must be >= 1");
    if (model.num_layers == 0 || model.d_model == 0 || model.num_heads == 0 || model.d_ff == 0)
      throw ConfigError("model sizes must be positive");
    if (model.d_model % model.num_heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (model.dropout < 0.0 || model.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (alpha && !(*alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (beam == 0) throw ConfigError("beam must be >= 1");
    if (max_phrase_length == 0) throw ConfigError("max_phrase_length must be >= 1");
  }

  /// `key = value` lines in `keys()` order; `parse_config` reads it back.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "decoder_input = " << to_string(train.method) << "\n"
       << "mu = " << train.mu << "\nlambda = " << train.lambda << "\nepochs = " << train.epochs
       << "\nmax_tokens = " << train.max_tokens << "\nseed = " << train.seed << "\npatience = " << train.patience
       << "\nclip_norm = " << train.clip_norm << "\nlearning_rate = " << train.schedule.base_rate
       << "\nwarmup_steps = " << train.schedule.warmup_steps << "\ndiscriminator_rate = " << train.discriminator_rate
       << "\ndiscriminator_steps = " << train.discriminator_steps << "\ntau = " << train.tau
       << "\nraw_kernel = " << (train.raw_kernel ? "true" : "false") << "\nlayers = " << model.num_layers
       << "\nd_model = " << model.d_model << "\nheads = " << model.num_heads << "\nd_ff = " << model.d_ff
       << "\ndropout = " << model.dropout << "\nmax_positions = " << model.max_positions << "\n";
    if (alpha) os << "alpha = " << *alpha << "\n";
    os << "window_B = " << window_b << "\nbeam = " << beam << "\nmax_phrase_length = " << max_phrase_length
       << "\nibm1_iterations = " << ibm1_iterations << "\n";
    return os.str();
  }

 private:
  static double parse_real(const std::string& key, const std::string& value) {
    double v = 0.0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': not a number: '" + value + "'");
    return v;
  }
  static std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t v = 0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end)
      throw ConfigError("config key '" + key + "': not a non-negative integer: '" + value + "'");
    return v;
  }
  static bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
  }
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

/// Parses `key = value` text into ordered assignments. Duplicate keys and
/// lines without '=' are errors.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                          const std::string& name = "<config>") {
  std::vector<std::pair<std::string, std::string>> out;
  std::map<std::string, std::size_t> seen;
  std::istringstream is(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(name + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(name + ":" + std::to_string(lineno) + ": empty key or value");
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError(name + ":" + std::to_string(lineno) + ": duplicate key '" + key + "' (first on line " +
                        std::to_string(it->second) + ")");
    out.emplace_back(key, value);
  }
  return out;
}

inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& name = "<config>") {
  for (const auto& [k, v] : parse_config_text(text, name)) {
    try {
      cfg.set(k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  apply_config_text(cfg, ss.str(), path);
}

}  // namespace enat
