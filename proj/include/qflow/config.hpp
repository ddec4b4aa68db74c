#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qflow/errors.hpp"
#include "qflow/paradigms.hpp"
#include "qflow/synthdata.hpp"
#include "qflow/textio.hpp"

namespace qflow {

/// Flat `section.key = value` entries; `#` starts a comment.
class ConfigFile {
 public:
  static ConfigFile parse(const std::vector<std::string>& lines) {
    ConfigFile cfg;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::string_view line = lines[i];
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = text::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ParseError("expected 'section.key = value'", i + 1);
      const std::string key(text::trim(line.substr(0, eq)));
      const std::string value(text::trim(line.substr(eq + 1)));
      if (key.find('.') == std::string::npos) throw ParseError("key '" + key + "' has no section", i + 1);
      if (!cfg.values_.emplace(key, value).second) throw ParseError("duplicate key '" + key + "'", i + 1);
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) { return parse(text::read_lines(path)); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::optional<std::string> get(const std::string& key) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  template <class T>
  T get_or(const std::string& key, T fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    return convert<T>(key, *v);
  }

  template <class T>
  T require(const std::string& key) const {
    const auto v = get(key);
    if (!v) throw InvalidInput("missing required config key '" + key + "'");
    return convert<T>(key, *v);
  }

  /// Keys present in the file that no accessor asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  template <class T>
  static T convert(const std::string& key, const std::string& v) {
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        return v;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ParseError("expected true/false");
      } else if constexpr (std::is_floating_point_v<T>) {
        return text::parse_real(v);
      } else {
        return text::parse_int<T>(v);
      }
    } catch (const ParseError& e) {
      throw InvalidInput("config key '" + key + "': " + e.what());
    }
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

struct DataSection {
  std::uint64_t seed = 0;
  long long n = 0;
  int feature_dim = 16;
  double train_fraction = 2.0 / 3.0;
  std::uint64_t split_seed = 0;
  std::string path;
};

struct EvalSection {
  std::vector<EvalMode> modes = {EvalMode::Image, EvalMode::Text, EvalMode::TextStripped};
};

struct RunConfig {
  DataSection data;
  std::string vocab_path;
  ModelDims model;
  ParadigmConfig paradigm;
  int checkpoint_every = 0;
  EvalSection eval;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

inline std::vector<EvalMode> parse_modes(std::string_view s) {
  std::vector<EvalMode> out;
  for (auto part : text::split(s, ',')) {
    const auto m = parse_eval_mode(text::trim(part));
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  return out;
}

/// Reads every section. `data.seed` must be explicit; commands that train also need `run.seed`.
inline RunConfig run_config_from(const ConfigFile& f) {
  RunConfig c;
  c.data.seed = f.require<std::uint64_t>("data.seed");
  c.data.n = f.get_or<long long>("data.n", 0);
  c.data.feature_dim = f.get_or<int>("data.f", 16);
  c.data.train_fraction = f.get_or<double>("data.train_fraction", 2.0 / 3.0);
  c.data.split_seed = f.get_or<std::uint64_t>("data.split_seed", c.data.seed);
  c.data.path = f.get_or<std::string>("data.path", "");
  c.vocab_path = f.get_or<std::string>("vocab.path", "");

  c.model.features = c.data.feature_dim;
  c.model.embed = f.get_or<int>("model.embed", 16);
  c.model.hidden = f.get_or<int>("model.hidden", 32);
  c.model.bins = f.get_or<int>("model.bins", 17);
  c.model.max_len = f.get_or<int>("model.max_len", 12);

  auto& p = c.paradigm;
  p.kind = parse_paradigm_kind(f.get_or<std::string>("paradigm.kind", "SelfConsistency"));
  p.alpha = f.get_or<double>("paradigm.alpha", 1.0);
  p.beta = f.get_or<double>("paradigm.beta", 1.0);
  p.iterations = f.get_or<int>("paradigm.iterations", 300);
  p.batch_size = f.get_or<int>("paradigm.batch_size", 16);
  p.temperature = f.get_or<double>("paradigm.temperature", 1.0);
  p.pretrain_iterations = f.get_or<int>("paradigm.pretrain_iterations", 0);
  c.checkpoint_every = f.get_or<int>("paradigm.checkpoint_every", 0);

  p.grpo.clip = f.get_or<double>("grpo.clip", 0.2);
  p.grpo.kl_coeff = f.get_or<double>("grpo.kl_coeff", 0.04);
  p.grpo.group_size = f.get_or<int>("grpo.group_size", 8);
  p.grpo.scores_per_trace = f.get_or<int>("grpo.scores_per_trace", 4);
  p.grpo.learning_rate = f.get_or<double>("grpo.learning_rate", 0.01);
  p.grpo.inner_epochs = f.get_or<int>("grpo.inner_epochs", 1);
  p.grpo.std_floor = f.get_or<double>("grpo.std_floor", 1e-8);
  p.grpo.kl_inside_min = f.get_or<bool>("grpo.kl_inside_min", false);

  p.rewards.tolerance = f.get_or<double>("reward.tolerance", 1.0);
  p.rewards.format_weight = f.get_or<double>("reward.format_weight", 1.0);

  if (const auto modes = f.get("eval.modes")) c.eval.modes = parse_modes(*modes);
  if (f.has("run.seed")) c.seed = f.require<std::uint64_t>("run.seed");
  c.out_dir = f.get_or<std::string>("run.out_dir", "");

  if (const auto extra = f.unused_keys(); !extra.empty()) throw InvalidInput("unknown config key '" + extra.front() + "'");
  if (c.data.feature_dim < 1) throw InvalidInput("data.f must be at least 1");
  if (!(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0))
    throw InvalidInput("data.train_fraction must be in (0,1)");
  if (c.checkpoint_every < 0) throw InvalidInput("paradigm.checkpoint_every must be >= 0");
  validate(p);
  return c;
}

}  // namespace qflow
