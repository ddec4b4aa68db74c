#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qflow/captions.hpp"
#include "qflow/errors.hpp"
#include "qflow/grpo.hpp"
#include "qflow/parallel.hpp"
#include "qflow/policy.hpp"
#include "qflow/rewards.hpp"
#include "qflow/rng.hpp"
#include "qflow/synthdata.hpp"

namespace qflow {

enum class ParadigmKind { ChainOfThought, SelfConsistency, AutoencoderLike, ScoreOnlyBaseline };

inline std::string to_string(ParadigmKind k) {
  switch (k) {
    case ParadigmKind::ChainOfThought: return "ChainOfThought";
    case ParadigmKind::SelfConsistency: return "SelfConsistency";
    case ParadigmKind::AutoencoderLike: return "AutoencoderLike";
    case ParadigmKind::ScoreOnlyBaseline: return "ScoreOnlyBaseline";
  }
  return "?";
}

inline ParadigmKind parse_paradigm_kind(std::string_view s) {
  for (auto k : {ParadigmKind::ChainOfThought, ParadigmKind::SelfConsistency, ParadigmKind::AutoencoderLike,
                 ParadigmKind::ScoreOnlyBaseline})
    if (s == to_string(k)) return k;
  throw InvalidInput("unknown paradigm '" + std::string(s) + "'");
}

struct ParadigmConfig {
  ParadigmKind kind = ParadigmKind::SelfConsistency;
  /// Stage-1 objective weight.
  double alpha = 1.0;
  /// Stage-2 objective weight (not the KL coefficient, which lives in grpo).
  double beta = 1.0;
  GrpoConfig grpo;
  RewardConfig rewards;
  int batch_size = 16;
  int iterations = 300;
  double temperature = 1.0;
  /// ScoreOnlyBaseline iterations run before the paradigm itself; the
  /// reference policy is re-anchored on the pretrained weights.
  int pretrain_iterations = 0;
};

inline void validate(const ParadigmConfig& c) {
  if (!(c.alpha >= 0.0) || !(c.beta >= 0.0)) throw InvalidInput("paradigm.alpha and paradigm.beta must be >= 0");
  if (!(c.alpha + c.beta > 0.0)) throw InvalidInput("paradigm.alpha + paradigm.beta must be positive");
  if (c.batch_size < 1) throw InvalidInput("paradigm.batch_size must be at least 1");
  if (c.iterations < 0) throw InvalidInput("paradigm.iterations must be >= 0");
  if (c.pretrain_iterations < 0) throw InvalidInput("paradigm.pretrain_iterations must be >= 0");
  if (!(c.temperature > 0.0)) throw InvalidInput("paradigm.temperature must be positive");
  validate(c.grpo);
  validate(c.rewards);
  if (c.kind == ParadigmKind::ChainOfThought && c.grpo.scores_per_trace < 2 && c.beta > 0.0)
    throw InvalidInput("grpo.scores_per_trace must be at least 2 when chain-of-thought stage 2 trains");
}

/// Independent random streams of one iteration.
struct IterationSeeds {
  std::uint64_t captions = 0;
  std::uint64_t stage1_scores = 0;
  std::uint64_t stage2_scores = 0;

  static IterationSeeds derive(std::uint64_t run_seed, std::uint64_t iteration) {
    return {derive_seed(run_seed, {iteration, 1}), derive_seed(run_seed, {iteration, 2}),
            derive_seed(run_seed, {iteration, 3})};
  }
};

/// Groups built from one batch, before the update.
struct Rollouts {
  std::vector<RolloutGroup> stage1;
  std::vector<RolloutGroup> stage2;
};

struct IterationStats {
  int iteration = 0;
  ParadigmKind kind = ParadigmKind::ScoreOnlyBaseline;
  double stage1_reward = 0.0;
  double stage2_reward = 0.0;
  double stage1_objective = 0.0;
  double stage2_objective = 0.0;
  double objective = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  std::size_t degenerate_groups = 0;
};

struct IterationResult {
  PolicyParams params;
  IterationStats stats;
  Rollouts rollouts;
};

/// Trace rewards of N reasoning traces: row i holds the M scores predicted from caption i.
inline std::vector<double> cot_trace_rewards(const std::vector<std::vector<double>>& scores, double mos, double t) {
  std::vector<double> out;
  out.reserve(scores.size());
  for (const auto& row : scores) out.push_back(trace_reward(row, mos, t));
  return out;
}

namespace detail {

inline RolloutCandidate make_candidate(const PolicyParams& p, const PolicyParams& ref, Trajectory t, double reward) {
  RolloutCandidate c;
  c.logprob_old = evaluate_trajectory(p, nullptr, t).logprob;
  c.logprob_current = c.logprob_old;
  c.logprob_ref = evaluate_trajectory(ref, nullptr, t).logprob;
  c.trajectory = std::move(t);
  c.reward = reward;
  return c;
}

/// Scorer trajectory that sees only the caption.
inline Trajectory text_only_score(const Caption& caption, int bin) {
  Caption ctx;
  ctx.tokens = caption.tokens;
  return Trajectory{Conditioning{}, std::move(ctx), false, bin, false};
}

struct RecordRollout {
  RolloutGroup stage1;
  std::vector<RolloutGroup> stage2;
};

inline RecordRollout rollout_record(const PolicyParams& p, const PolicyParams& ref, const QualityRecord& rec,
                                    const ParadigmConfig& cfg, const IterationSeeds& seeds, std::size_t index,
                                    std::size_t batch) {
  const int n = cfg.grpo.group_size;
  const int m = cfg.grpo.scores_per_trace;
  const double t = cfg.rewards.tolerance;
  const double fw = cfg.rewards.format_weight;
  const int bins = p.dims.bins;
  const auto eos = p.dims.eos;
  const auto max_len = static_cast<std::size_t>(p.dims.max_len);
  const double b = static_cast<double>(batch);
  Rng cap_rng(derive_seed(seeds.captions, {index}));
  Rng s1_rng(derive_seed(seeds.stage1_scores, {index}));
  Rng s2_rng(derive_seed(seeds.stage2_scores, {index}));

  Conditioning cond;
  cond.image = rec.features;
  if (cfg.kind == ParadigmKind::AutoencoderLike) cond.score_prefix = nearest_bin(rec.mos, bins);

  RecordRollout out;
  out.stage1.weight = (cfg.kind == ParadigmKind::ScoreOnlyBaseline ? 1.0 : cfg.alpha) / b;
  const auto captions = sample_captions(p, cond, n, cfg.temperature, cap_rng);

  switch (cfg.kind) {
    case ParadigmKind::ChainOfThought: {
      for (const auto& cap : captions) {
        RolloutGroup g;
        g.weight = cfg.beta / (b * n);
        std::vector<double> rewards;
        for (int j = 0; j < m; ++j) {
          const auto s = sample_score(p, nullptr, &cap, cfg.temperature, s2_rng);
          const double r = tolerance_reward(bin_center(s.bin, bins), rec.mos, t);
          rewards.push_back(r);
          g.candidates.push_back(make_candidate(p, ref, text_only_score(cap, s.bin), r));
        }
        double mean = 0.0;
        for (double r : rewards) mean += r;
        mean /= static_cast<double>(rewards.size());
        const double r1 = mean + fw * format_reward(cap, true, eos, max_len);
        out.stage1.candidates.push_back(make_candidate(p, ref, Trajectory{cond, cap, true, std::nullopt, true}, r1));
        out.stage2.push_back(std::move(g));
      }
      break;
    }
    case ParadigmKind::SelfConsistency: {
      RolloutGroup g2;
      g2.weight = cfg.beta / b;
      for (const auto& cap : captions) {
        const auto s1 = sample_score(p, &rec.features, &cap, cfg.temperature, s1_rng);
        const double r1 = tolerance_reward(bin_center(s1.bin, bins), rec.mos, t) + fw * format_reward(cap, true, eos, max_len);
        out.stage1.candidates.push_back(make_candidate(p, ref, Trajectory{cond, cap, true, s1.bin, true}, r1));
        const auto s2 = sample_score(p, nullptr, &cap, cfg.temperature, s2_rng);
        const double r2 = tolerance_reward(bin_center(s2.bin, bins), rec.mos, t);
        g2.candidates.push_back(make_candidate(p, ref, text_only_score(cap, s2.bin), r2));
      }
      out.stage2.push_back(std::move(g2));
      break;
    }
    case ParadigmKind::AutoencoderLike: {
      RolloutGroup g2;
      g2.weight = cfg.beta / b;
      for (const auto& cap : captions) {
        const auto s2 = sample_score(p, nullptr, &cap, cfg.temperature, s2_rng);
        const double r2 = tolerance_reward(bin_center(s2.bin, bins), rec.mos, t);
        const double r1 = r2 + fw * format_reward(cap, true, eos, max_len);
        out.stage1.candidates.push_back(make_candidate(p, ref, Trajectory{cond, cap, true, std::nullopt, true}, r1));
        g2.candidates.push_back(make_candidate(p, ref, text_only_score(cap, s2.bin), r2));
      }
      out.stage2.push_back(std::move(g2));
      break;
    }
    case ParadigmKind::ScoreOnlyBaseline: {
      // The caption is generated as context; only the score is reinforced.
      for (const auto& cap : captions) {
        const auto s1 = sample_score(p, &rec.features, &cap, cfg.temperature, s1_rng);
        const double r1 = tolerance_reward(bin_center(s1.bin, bins), rec.mos, t) + fw * format_reward(cap, true, eos, max_len);
        out.stage1.candidates.push_back(make_candidate(p, ref, Trajectory{cond, cap, false, s1.bin, true}, r1));
      }
      break;
    }
  }
  compute_advantages(out.stage1, cfg.grpo.std_floor);
  for (auto& g : out.stage2) compute_advantages(g, cfg.grpo.std_floor);
  return out;
}

inline double mean_reward(const std::vector<RolloutGroup>& groups) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups)
    for (const auto& c : g.candidates) {
      sum += c.reward;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// Samples every group of one iteration from the current policy. Per-record
/// random streams keep the result independent of the worker count.
inline Rollouts collect_rollouts(const PolicyParams& p, const PolicyParams& ref, std::span<const QualityRecord> batch,
                                 const ParadigmConfig& cfg, const IterationSeeds& seeds) {
  std::vector<detail::RecordRollout> per(batch.size());
  parallel_for(batch.size(),
               [&](std::size_t i) { per[i] = detail::rollout_record(p, ref, batch[i], cfg, seeds, i, batch.size()); });
  Rollouts r;
  for (auto& rec : per) {
    r.stage1.push_back(std::move(rec.stage1));
    for (auto& g : rec.stage2) r.stage2.push_back(std::move(g));
  }
  return r;
}

/// One combined update on alpha * stage-1 + beta * stage-2 objectives.
inline IterationResult run_iteration(const PolicyParams& p, const PolicyParams& ref, std::span<const QualityRecord> batch,
                                     const ParadigmConfig& cfg, const IterationSeeds& seeds) {
  validate(cfg);
  if (batch.empty()) throw InvalidInput("empty training batch");
  IterationResult res;
  res.rollouts = collect_rollouts(p, ref, batch, cfg, seeds);
  std::vector<RolloutGroup> all;
  all.reserve(res.rollouts.stage1.size() + res.rollouts.stage2.size());
  for (const auto& g : res.rollouts.stage1) all.push_back(g);
  for (const auto& g : res.rollouts.stage2) all.push_back(g);
  auto upd = grpo_update(p, ref, all, cfg.grpo);

  auto& s = res.stats;
  s.kind = cfg.kind;
  s.stage1_reward = detail::mean_reward(res.rollouts.stage1);
  s.stage2_reward = detail::mean_reward(res.rollouts.stage2);
  const std::size_t n1 = res.rollouts.stage1.size();
  const std::size_t n2 = res.rollouts.stage2.size();
  for (std::size_t i = 0; i < n1; ++i) s.stage1_objective += upd.group_objectives[i] / static_cast<double>(n1);
  for (std::size_t i = 0; i < n2; ++i) s.stage2_objective += upd.group_objectives[n1 + i] / static_cast<double>(n2);
  s.objective = upd.objective;
  s.kl = upd.kl;
  s.clip_fraction = upd.clip_fraction;
  s.degenerate_groups = upd.degenerate_groups;
  res.params = std::move(upd.params);
  return res;
}

inline IterationResult run_cot_iteration(const PolicyParams& p, const PolicyParams& ref,
                                         std::span<const QualityRecord> batch, const ParadigmConfig& cfg,
                                         const IterationSeeds& seeds) {
  if (cfg.kind != ParadigmKind::ChainOfThought) throw InvalidInput("run_cot_iteration needs a ChainOfThought config");
  return run_iteration(p, ref, batch, cfg, seeds);
}

inline IterationResult run_sc_iteration(const PolicyParams& p, const PolicyParams& ref,
                                        std::span<const QualityRecord> batch, const ParadigmConfig& cfg,
                                        const IterationSeeds& seeds) {
  if (cfg.kind != ParadigmKind::SelfConsistency) throw InvalidInput("run_sc_iteration needs a SelfConsistency config");
  return run_iteration(p, ref, batch, cfg, seeds);
}

inline IterationResult run_ae_iteration(const PolicyParams& p, const PolicyParams& ref,
                                        std::span<const QualityRecord> batch, const ParadigmConfig& cfg,
                                        const IterationSeeds& seeds) {
  if (cfg.kind != ParadigmKind::AutoencoderLike) throw InvalidInput("run_ae_iteration needs an AutoencoderLike config");
  return run_iteration(p, ref, batch, cfg, seeds);
}

/// `iter=<n> paradigm=<name> mean_reward=<r> objective=<J> kl=<k> clip_frac=<c> stage1_reward=<r1> stage2_reward=<r2>`
inline std::string format_log_line(const IterationStats& s) {
  auto r = [](double v) { return text::real(v, 9); };
  return "iter=" + std::to_string(s.iteration) + " paradigm=" + to_string(s.kind) + " mean_reward=" +
         r(s.stage1_reward) + " objective=" + r(s.objective) + " kl=" + r(s.kl) + " clip_frac=" + r(s.clip_fraction) +
         " stage1_reward=" + r(s.stage1_reward) + " stage2_reward=" + r(s.stage2_reward);
}

struct TrainOptions {
  /// Called every `checkpoint_every` iterations (0 disables) with the iteration count so far.
  int checkpoint_every = 0;
  std::function<void(int, const PolicyParams&)> on_checkpoint;
  std::function<void(const IterationStats&)> on_iteration;
};

struct TrainResult {
  PolicyParams params;
  std::vector<IterationStats> log;
};

/// Training stopped on a non-finite objective or gradient; carries the last good state.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, TrainResult last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const TrainResult& last_good() const { return last_good_; }

 private:
  TrainResult last_good_;
};

inline std::vector<QualityRecord> draw_batch(std::span<const QualityRecord> data, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  const std::size_t k = std::min(size, data.size());
  std::vector<QualityRecord> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    out.push_back(data[idx[i]]);
  }
  return out;
}

/// Untrained policy a run with this configuration starts from.
inline PolicyParams initial_params(const ParadigmConfig& cfg, const ModelDims& dims, std::uint64_t seed) {
  auto p = init_params(dims, derive_seed(seed, {0x1417}));
  p.uses_score_prefix = cfg.kind == ParadigmKind::AutoencoderLike;
  return p;
}

/// Deterministic in (cfg, dims, data, seed). The old policy is the iterate
/// itself at each rollout; the reference is fixed at the start (after
/// pretraining, when configured).
inline TrainResult train(const ParadigmConfig& cfg, const ModelDims& dims, std::span<const QualityRecord> data,
                         std::uint64_t seed, const TrainOptions& opts = {}) {
  validate(cfg);
  if (data.empty()) throw InvalidInput("training set is empty");
  TrainResult res;
  res.params = initial_params(cfg, dims, seed);
  PolicyParams ref = res.params;

  auto phase = [&](const ParadigmConfig& pc, int iterations, std::uint64_t phase_tag, int first_iter) {
    for (int it = 0; it < iterations; ++it) {
      const auto iter_no = static_cast<std::uint64_t>(it);
      const auto batch = draw_batch(data, static_cast<std::size_t>(pc.batch_size),
                                    derive_seed(seed, {phase_tag, iter_no, 0xba7c}));
      IterationResult step;
      try {
        step = run_iteration(res.params, ref, batch, pc, IterationSeeds::derive(derive_seed(seed, {phase_tag}), iter_no));
      } catch (const NumericalError& e) {
        throw TrainingAborted(e.what(), res);
      }
      step.stats.iteration = first_iter + it + 1;
      res.params = std::move(step.params);
      res.log.push_back(step.stats);
      if (opts.on_iteration) opts.on_iteration(step.stats);
      if (opts.checkpoint_every > 0 && opts.on_checkpoint && step.stats.iteration % opts.checkpoint_every == 0)
        opts.on_checkpoint(step.stats.iteration, res.params);
    }
  };

  if (cfg.pretrain_iterations > 0) {
    auto pre = cfg;
    pre.kind = ParadigmKind::ScoreOnlyBaseline;
    phase(pre, cfg.pretrain_iterations, 0x97e, 0);
    ref = res.params;
  }
  phase(cfg, cfg.iterations, 0xf17e, cfg.pretrain_iterations);
  return res;
}

// ---------------------------------------------------------------------------
// Inference under the evaluation conditions

enum class EvalMode { Image, Text, TextStripped };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::Image: return "image";
    case EvalMode::Text: return "text";
    case EvalMode::TextStripped: return "text_stripped";
  }
  return "?";
}

inline EvalMode parse_eval_mode(std::string_view s) {
  for (auto m : {EvalMode::Image, EvalMode::Text, EvalMode::TextStripped})
    if (s == to_string(m)) return m;
  throw InvalidInput("unknown evaluation mode '" + std::string(s) + "'");
}

struct Inference {
  double score = 0.0;
  Caption caption;
  AttentionTrace trace;
};

/// Greedy test-time caption; score-prefix models see the MASK placeholder.
inline Caption inference_caption(const PolicyParams& p, const QualityRecord& rec) {
  Conditioning c;
  c.image = rec.features;
  if (p.uses_score_prefix) c.score_prefix = p.mask_bin();
  return greedy_caption(p, c);
}

/// Scores a fixed caption under one evaluation condition. Text conditions
/// never give the scorer an image slot.
inline Inference score_with_caption(const PolicyParams& p, const Vocabulary& v, const QualityRecord& rec,
                                    const Caption& caption, EvalMode mode) {
  Inference out;
  out.caption = mode == EvalMode::TextStripped ? strip_score_words(caption, v) : caption;
  // A truncated caption made only of score words strips to nothing; the
  // text-only scorer then pools over a lone EOS slot.
  if (out.caption.empty() && mode != EvalMode::Image) out.caption.tokens.push_back(p.dims.eos);
  const Vec* image = mode == EvalMode::Image ? &rec.features : nullptr;
  auto [dist, trace] = score_distribution(p, image, out.caption.empty() ? nullptr : &out.caption);
  out.score = point_score(dist);
  out.trace = std::move(trace);
  return out;
}

inline Inference masked_inference(const PolicyParams& p, const Vocabulary& v, const QualityRecord& rec, EvalMode mode) {
  return score_with_caption(p, v, rec, inference_caption(p, rec), mode);
}

}  // namespace qflow
