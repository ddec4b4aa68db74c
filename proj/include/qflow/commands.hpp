#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <sstream>
#include <utility>
#include <vector>

#include "qflow/captions.hpp"
#include "qflow/config.hpp"
#include "qflow/errors.hpp"
#include "qflow/evaluation.hpp"
#include "qflow/paradigms.hpp"
#include "qflow/policy.hpp"
#include "qflow/synthdata.hpp"
#include "qflow/textio.hpp"

namespace qflow::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInvalid = 1, kNumerical = 2, kUndefinedCorrelation = 3 };

inline Vocabulary vocabulary_for(const std::string& path) {
  return path.empty() ? default_vocabulary() : load_vocabulary(path);
}

inline ModelDims dims_for(const RunConfig& cfg, const Vocabulary& v) {
  ModelDims d = cfg.model;
  d.vocab = v.size();
  d.eos = v.eos();
  return d;
}

/// Writes the dataset described by the config's data section.
inline int cmd_gen_data(const std::string& config_path, const std::string& out_path, std::ostream& out,
                        std::ostream& err) {
  Dataset d;
  try {
    const auto cfg = run_config_from(ConfigFile::load(config_path));
    if (cfg.data.n < 1) throw InvalidInput("data.n must be at least 1 (got " + std::to_string(cfg.data.n) + ")");
    d = generate_dataset(cfg.data.seed, static_cast<std::size_t>(cfg.data.n), DataConfig{cfg.data.feature_dim});
    if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_dataset(d, out_path);
  } catch (const Error& e) {
    err << "gen-data: invalid config: " << e.what() << "\n";
    return kInvalid;
  }
  double lo = kMosMax, hi = kMosMin, sum = 0.0;
  std::size_t buckets[4] = {0, 0, 0, 0};
  for (const auto& r : d.records) {
    lo = std::min(lo, r.mos);
    hi = std::max(hi, r.mos);
    sum += r.mos;
    ++buckets[std::min<std::size_t>(3, static_cast<std::size_t>(r.mos - 1.0))];
  }
  out << "records=" << d.records.size() << "\n";
  out << "mos min=" << text::real(lo, 6) << " mean=" << text::real(sum / static_cast<double>(d.records.size()), 6)
      << " max=" << text::real(hi, 6) << "\n";
  out << "mos histogram [1,2)=" << buckets[0] << " [2,3)=" << buckets[1] << " [3,4)=" << buckets[2]
      << " [4,5]=" << buckets[3] << "\n";
  return kOk;
}

struct TrainOutcome {
  TrainResult result;
  Split split;
  int exit_code = kOk;
};

/// Trains per `cfg` and writes train.log, checkpoints/, final.ckpt and the
/// train/test split files into `out_dir`.
inline TrainOutcome run_training(const RunConfig& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  if (!cfg.seed) throw InvalidInput("missing required config key 'run.seed'");
  if (cfg.data.path.empty()) throw InvalidInput("missing required config key 'data.path'");
  if (!fs::exists(cfg.data.path)) throw InvalidInput("data.path '" + cfg.data.path + "' does not exist");
  const auto vocab = vocabulary_for(cfg.vocab_path);
  const auto data = load_dataset(cfg.data.path);
  auto dims = dims_for(cfg, vocab);
  if (data.feature_dim() != dims.features) dims.features = data.feature_dim();

  TrainOutcome outcome;
  outcome.split = split_dataset(data, cfg.data.train_fraction, cfg.data.split_seed);
  if (outcome.split.train.empty() || outcome.split.test.size() < 3)
    throw InvalidInput("data.n too small for the requested split");

  fs::create_directories(fs::path(out_dir) / "checkpoints");
  save_dataset(as_dataset(outcome.split.train, data.seed), (fs::path(out_dir) / "train.data").string());
  save_dataset(as_dataset(outcome.split.test, data.seed), (fs::path(out_dir) / "test.data").string());

  std::ofstream log((fs::path(out_dir) / "train.log").string(), std::ios::trunc);
  if (!log) throw Error("cannot write train.log in '" + out_dir + "'");
  TrainOptions opts;
  opts.checkpoint_every = cfg.checkpoint_every;
  opts.on_iteration = [&](const IterationStats& s) { log << format_log_line(s) << "\n" << std::flush; };
  opts.on_checkpoint = [&](int iter, const PolicyParams& p) {
    save_checkpoint(p, (fs::path(out_dir) / "checkpoints" / ("iter_" + std::to_string(iter) + ".ckpt")).string());
  };
  try {
    outcome.result = train(cfg.paradigm, dims, outcome.split.train, *cfg.seed, opts);
  } catch (const TrainingAborted& e) {
    outcome.result = e.last_good();
    save_checkpoint(outcome.result.params, (fs::path(out_dir) / "last_good.ckpt").string());
    err << "train: numerical abort: " << e.what() << " (last good checkpoint kept in last_good.ckpt)\n";
    outcome.exit_code = kNumerical;
    return outcome;
  }
  save_checkpoint(outcome.result.params, (fs::path(out_dir) / "final.ckpt").string());
  const double last_reward = outcome.result.log.empty() ? 0.0 : outcome.result.log.back().stage1_reward;
  out << "final mean_reward=" << text::real(last_reward, 9) << " iterations=" << outcome.result.log.size() << "\n";
  return outcome;
}

inline int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  try {
    const auto cfg = run_config_from(ConfigFile::load(config_path));
    return run_training(cfg, out_dir, out, err).exit_code;
  } catch (const Error& e) {
    err << "train: " << e.what() << "\n";
    return kInvalid;
  }
}

/// Evaluates a checkpoint under the requested conditions; writes
/// eval_report.txt and attention_<mode>.csv (+ attention_logits_<mode>.csv).
inline int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& modes_arg,
                    const std::string& out_dir, const std::string& vocab_path, std::ostream& out, std::ostream& err) {
  PolicyParams params;
  Dataset data;
  std::vector<EvalMode> modes;
  Vocabulary vocab = default_vocabulary();
  try {
    params = load_checkpoint(ckpt_path);
  } catch (const Error& e) {
    err << "eval: cannot load checkpoint '" << ckpt_path << "': " << e.what() << "\n";
    return kInvalid;
  }
  try {
    data = load_dataset(data_path);
    modes = parse_modes(modes_arg);
    vocab = vocabulary_for(vocab_path);
    if (vocab.size() != params.dims.vocab || vocab.eos() != params.dims.eos)
      throw InvalidInput("vocabulary does not match the checkpoint");
    if (data.feature_dim() != params.dims.features) throw InvalidInput("dataset feature dimension does not match the checkpoint");
    if (data.records.size() < 3) throw InvalidInput("evaluation needs at least 3 records");
  } catch (const Error& e) {
    err << "eval: " << e.what() << "\n";
    return kInvalid;
  }

  std::vector<ConditionPredictions> preds;
  EvalReport report;
  try {
    preds = predict_conditions(params, vocab, data.records, modes);
    report = report_from(preds, data.records);
  } catch (const UndefinedCorrelation& e) {
    err << "eval: " << e.what() << " (predictions are constant; the model has no ranking signal)\n";
    return kUndefinedCorrelation;
  }
  try {
    fs::create_directories(out_dir);
    text::write_file((fs::path(out_dir) / "eval_report.txt").string(), serialize_report(report));
    for (const auto& cp : preds) {
      const auto hist = aggregate_attention(cp.traces);
      const auto mode = to_string(cp.mode);
      text::write_file((fs::path(out_dir) / ("attention_" + mode + ".csv")).string(), serialize_histogram(hist, vocab));
      text::write_file((fs::path(out_dir) / ("attention_logits_" + mode + ".csv")).string(),
                       serialize_histogram_logits(hist, vocab));
    }
  } catch (const Error& e) {
    err << "eval: " << e.what() << "\n";
    return kInvalid;
  }
  out << serialize_report(report).substr(0, serialize_report(report).size() - format_gap_lines(report).size());
  out << format_gap_lines(report);
  return kOk;
}

/// Parses "a,b;a,b;..." into (alpha, beta) pairs.
inline std::vector<std::pair<double, double>> parse_grid(std::string_view s) {
  std::vector<std::pair<double, double>> grid;
  if (text::trim(s).empty()) return grid;
  for (auto cell : text::split(s, ';')) {
    if (text::trim(cell).empty()) continue;
    const auto ab = text::split(cell, ',');
    if (ab.size() != 2) throw InvalidInput("grid cell '" + std::string(cell) + "' is not 'alpha,beta'");
    grid.emplace_back(text::parse_real(ab[0]), text::parse_real(ab[1]));
  }
  return grid;
}

/// run_seed XOR hash(alpha, beta).
inline std::uint64_t cell_seed(std::uint64_t run_seed, double alpha, double beta) {
  const std::string key = text::real(alpha, 17) + "," + text::real(beta, 17);
  return run_seed ^ fnv1a(key);
}

inline std::string setting_name(ParadigmKind kind, double alpha, double beta) {
  return to_string(kind) + "(alpha=" + text::real(alpha, 6) + ",beta=" + text::real(beta, 6) + ")";
}

/// One model per grid cell; writes ablation.txt with an image row and a text
/// row per setting.
inline int cmd_ablate(const std::string& config_path, const std::string& grid_arg, const std::string& out_dir,
                      std::ostream& out, std::ostream& err) {
  RunConfig base;
  std::vector<std::pair<double, double>> grid;
  Vocabulary vocab = default_vocabulary();
  try {
    base = run_config_from(ConfigFile::load(config_path));
    grid = parse_grid(grid_arg);
    if (grid.empty()) throw InvalidInput("grid must contain at least one alpha,beta cell");
    if (!base.seed) throw InvalidInput("missing required config key 'run.seed'");
    vocab = vocabulary_for(base.vocab_path);
    fs::create_directories(out_dir);
  } catch (const Error& e) {
    err << "ablate: " << e.what() << "\n";
    return kInvalid;
  }

  std::string table = "# one image-conditioned row and one text-conditioned row per setting\n";
  bool all_ok = true;
  for (const auto& [alpha, beta] : grid) {
    const auto name = setting_name(base.paradigm.kind, alpha, beta);
    const auto cell_dir = (fs::path(out_dir) / ("cell_alpha" + text::real(alpha, 6) + "_beta" + text::real(beta, 6))).string();
    try {
      auto cfg = base;
      cfg.paradigm.alpha = alpha;
      cfg.paradigm.beta = beta;
      validate(cfg.paradigm);
      cfg.seed = cell_seed(*base.seed, alpha, beta);
      std::ostringstream cell_out;
      const auto outcome = run_training(cfg, cell_dir, cell_out, err);
      if (outcome.exit_code != kOk) throw NumericalError("training aborted");
      const auto report = gap_report(outcome.result.params, vocab, outcome.split.test);
      text::write_file((fs::path(cell_dir) / "eval_report.txt").string(), serialize_report(report));
      for (auto mode : {EvalMode::Image, EvalMode::Text}) {
        const auto* c = report.find(mode);
        table += "setting=" + name + " row=" + to_string(mode) + " plcc=" + text::real(c->plcc, 9) +
                 " srcc=" + text::real(c->srcc, 9) + "\n";
      }
      out << name << " done\n";
    } catch (const Error& e) {
      all_ok = false;
      table += "setting=" + name + " status=failed\n";
      err << "ablate: cell " << name << " failed: " << e.what() << "\n";
    }
  }
  try {
    text::write_file((fs::path(out_dir) / "ablation.txt").string(), table);
  } catch (const Error& e) {
    err << "ablate: " << e.what() << "\n";
    return kInvalid;
  }
  return all_ok ? kOk : kInvalid;
}

}  // namespace qflow::cli
