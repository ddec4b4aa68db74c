#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qflow/captions.hpp"
#include "qflow/errors.hpp"
#include "qflow/rng.hpp"
#include "qflow/textio.hpp"

namespace qflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Slot label of the image in an attention trace.
inline constexpr TokenId kImageSlot = -1;

struct ModelDims {
  int vocab = 64;
  int features = 16;
  int embed = 16;
  int hidden = 32;
  int bins = 17;
  int max_len = 12;
  TokenId eos = 0;

  bool operator==(const ModelDims&) const = default;
};

/// Weights of the captioner and the attention-pooled scorer. One instance
/// serves both forward passes. Also used as the gradient container.
struct PolicyParams {
  ModelDims dims;
  /// Test-time captioning conditions on the MASK score prefix.
  bool uses_score_prefix = false;

  Mat token_emb;         // V x E
  Mat img_proj;          // E x F
  Mat score_prefix_emb;  // (K+1) x E, last row is MASK
  Mat cap_hidden;        // H x E
  Vec cap_hidden_bias;   // H
  Mat cap_out;           // V x H
  Vec attn_query;        // E
  Mat scorer_out;        // K x E
  Vec scorer_bias;       // K

  int mask_bin() const { return dims.bins; }

  static PolicyParams zeros(const ModelDims& d) {
    PolicyParams p;
    p.dims = d;
    p.token_emb = Mat::Zero(d.vocab, d.embed);
    p.img_proj = Mat::Zero(d.embed, d.features);
    p.score_prefix_emb = Mat::Zero(d.bins + 1, d.embed);
    p.cap_hidden = Mat::Zero(d.hidden, d.embed);
    p.cap_hidden_bias = Vec::Zero(d.hidden);
    p.cap_out = Mat::Zero(d.vocab, d.hidden);
    p.attn_query = Vec::Zero(d.embed);
    p.scorer_out = Mat::Zero(d.bins, d.embed);
    p.scorer_bias = Vec::Zero(d.bins);
    return p;
  }

  PolicyParams zeros_like() const {
    auto z = zeros(dims);
    z.uses_score_prefix = uses_score_prefix;
    return z;
  }

  /// Visits every tensor as (name, Eigen object).
  template <class F>
  void for_each(F&& f) {
    f("token_emb", token_emb);
    f("img_proj", img_proj);
    f("score_prefix_emb", score_prefix_emb);
    f("cap_hidden", cap_hidden);
    f("cap_hidden_bias", cap_hidden_bias);
    f("cap_out", cap_out);
    f("attn_query", attn_query);
    f("scorer_out", scorer_out);
    f("scorer_bias", scorer_bias);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<PolicyParams*>(this)->for_each([&](const char* n, const auto& t) { f(n, t); });
  }

  /// this += scale * other
  void axpy(double scale, const PolicyParams& other) {
    token_emb += scale * other.token_emb;
    img_proj += scale * other.img_proj;
    score_prefix_emb += scale * other.score_prefix_emb;
    cap_hidden += scale * other.cap_hidden;
    cap_hidden_bias += scale * other.cap_hidden_bias;
    cap_out += scale * other.cap_out;
    attn_query += scale * other.attn_query;
    scorer_out += scale * other.scorer_out;
    scorer_bias += scale * other.scorer_bias;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const char*, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const char*, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  double squared_norm() const {
    double s = 0.0;
    for_each([&](const char*, const auto& t) { s += t.squaredNorm(); });
    return s;
  }

  bool operator==(const PolicyParams& o) const {
    if (!(dims == o.dims) || uses_score_prefix != o.uses_score_prefix) return false;
    return token_emb == o.token_emb && img_proj == o.img_proj && score_prefix_emb == o.score_prefix_emb &&
           cap_hidden == o.cap_hidden && cap_hidden_bias == o.cap_hidden_bias && cap_out == o.cap_out &&
           attn_query == o.attn_query && scorer_out == o.scorer_out && scorer_bias == o.scorer_bias;
  }
};

/// Seeded Gaussian weights, zero biases.
inline PolicyParams init_params(const ModelDims& d, std::uint64_t seed, double stddev = 0.08) {
  if (d.vocab < 2 || d.features < 1 || d.embed < 1 || d.hidden < 1 || d.bins < 2 || d.max_len < 1)
    throw InvalidInput("model dimensions out of range");
  if (d.eos < 0 || d.eos >= d.vocab) throw InvalidInput("eos id out of range");
  auto p = PolicyParams::zeros(d);
  Rng rng(derive_seed(seed, {0x9a7a}));
  auto fill = [&](Mat& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal(0.0, stddev);
  };
  fill(p.token_emb);
  fill(p.img_proj);
  fill(p.score_prefix_emb);
  fill(p.cap_hidden);
  fill(p.cap_out);
  for (Eigen::Index i = 0; i < p.attn_query.size(); ++i) p.attn_query(i) = rng.normal(0.0, stddev);
  fill(p.scorer_out);
  return p;
}

// ---------------------------------------------------------------------------
// Numerics

inline Vec softmax(const Vec& z) {
  Vec e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline Vec log_softmax(const Vec& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

/// Σ p ln(p/q) with the 0 ln 0 = 0 convention.
inline double categorical_kl(const Vec& p, const Vec& q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) kl += p(i) * (std::log(p(i)) - std::log(q(i)));
  return kl;
}

// ---------------------------------------------------------------------------
// Score bins

inline double bin_center(int k, int bins) { return 1.0 + 4.0 * k / (bins - 1); }

inline int nearest_bin(double mos, int bins) {
  const double step = 4.0 / (bins - 1);
  const long k = std::lround((mos - 1.0) / step);
  return static_cast<int>(std::clamp<long>(k, 0, bins - 1));
}

struct ScoreDistribution {
  Vec probs;
  int bins() const { return static_cast<int>(probs.size()); }
};

/// Expected score over bin centers.
inline double point_score(const ScoreDistribution& d) {
  double s = 0.0;
  for (int k = 0; k < d.bins(); ++k) s += d.probs(k) * bin_center(k, d.bins());
  return s;
}

/// Softmax-normalized attention over scorer slots, with the raw logits.
struct AttentionTrace {
  std::vector<TokenId> labels;
  std::vector<double> weights;
  std::vector<double> logits;

  bool has_image_slot() const { return std::find(labels.begin(), labels.end(), kImageSlot) != labels.end(); }
};

// ---------------------------------------------------------------------------
// Forward passes

/// Inputs of a caption generation step.
struct Conditioning {
  std::optional<Vec> image;
  std::optional<int> score_prefix;
};

namespace detail {

struct CaptionStep {
  Vec ctx;
  Vec hidden;
  Vec logits;
  Vec log_probs;
  int items = 0;
};

inline void check_conditioning(const PolicyParams& p, const Conditioning& c) {
  if (!c.image && !c.score_prefix) throw InvalidInput("caption step needs an image or a score prefix");
  if (c.image && c.image->size() != p.dims.features) throw InvalidInput("image feature dimension mismatch");
  if (c.score_prefix && (*c.score_prefix < 0 || *c.score_prefix > p.dims.bins))
    throw InvalidInput("score prefix bin out of range");
}

inline CaptionStep caption_step(const PolicyParams& p, const Conditioning& c, std::span<const TokenId> prefix) {
  if (static_cast<int>(prefix.size()) >= p.dims.max_len)
    throw MustTerminate("caption prefix already at maximum length");
  CaptionStep s;
  s.ctx = Vec::Zero(p.dims.embed);
  if (c.image) {
    s.ctx += p.img_proj * *c.image;
    ++s.items;
  }
  if (c.score_prefix) {
    s.ctx += p.score_prefix_emb.row(*c.score_prefix).transpose();
    ++s.items;
  }
  for (TokenId t : prefix) {
    if (t < 0 || t >= p.dims.vocab) throw InvalidInput("token id out of range");
    s.ctx += p.token_emb.row(t).transpose();
    ++s.items;
  }
  s.ctx /= static_cast<double>(s.items);
  s.hidden = (p.cap_hidden * s.ctx + p.cap_hidden_bias).array().tanh().matrix();
  s.logits = p.cap_out * s.hidden;
  s.log_probs = log_softmax(s.logits);
  return s;
}

inline void caption_step_backward(const PolicyParams& p, const Conditioning& c, std::span<const TokenId> prefix,
                                  const CaptionStep& s, const Vec& dlogits, PolicyParams& g) {
  g.cap_out.noalias() += dlogits * s.hidden.transpose();
  const Vec dhidden = p.cap_out.transpose() * dlogits;
  const Vec dpre = (dhidden.array() * (1.0 - s.hidden.array().square())).matrix();
  g.cap_hidden.noalias() += dpre * s.ctx.transpose();
  g.cap_hidden_bias += dpre;
  const Vec ditem = (p.cap_hidden.transpose() * dpre) / static_cast<double>(s.items);
  if (c.image) g.img_proj.noalias() += ditem * c.image->transpose();
  if (c.score_prefix) g.score_prefix_emb.row(*c.score_prefix) += ditem.transpose();
  for (TokenId t : prefix) g.token_emb.row(t) += ditem.transpose();
}

struct ScorerPass {
  Mat slots;  // E x S
  std::vector<TokenId> labels;
  Vec attn_logits;
  Vec attn;
  Vec pooled;
  Vec logits;
  Vec log_probs;
};

inline ScorerPass scorer_forward(const PolicyParams& p, const Vec* image, std::span<const TokenId> caption) {
  const auto n_slots = static_cast<Eigen::Index>((image ? 1 : 0) + caption.size());
  if (n_slots == 0) throw InvalidInput("score prediction needs an image or a non-empty caption");
  if (image && image->size() != p.dims.features) throw InvalidInput("image feature dimension mismatch");
  ScorerPass s;
  s.slots.resize(p.dims.embed, n_slots);
  Eigen::Index col = 0;
  if (image) {
    s.slots.col(col++) = p.img_proj * *image;
    s.labels.push_back(kImageSlot);
  }
  for (TokenId t : caption) {
    if (t < 0 || t >= p.dims.vocab) throw InvalidInput("token id out of range");
    s.slots.col(col++) = p.token_emb.row(t).transpose();
    s.labels.push_back(t);
  }
  s.attn_logits = s.slots.transpose() * p.attn_query;
  s.attn = softmax(s.attn_logits);
  s.pooled = s.slots * s.attn;
  s.logits = p.scorer_out * s.pooled + p.scorer_bias;
  s.log_probs = log_softmax(s.logits);
  return s;
}

inline void scorer_backward(const PolicyParams& p, const Vec* image, std::span<const TokenId> caption,
                            const ScorerPass& s, const Vec& dlogits, PolicyParams& g) {
  g.scorer_out.noalias() += dlogits * s.pooled.transpose();
  g.scorer_bias += dlogits;
  const Vec dpooled = p.scorer_out.transpose() * dlogits;
  const Vec dattn = s.slots.transpose() * dpooled;
  const double mean_dattn = s.attn.dot(dattn);
  const Vec dalogits = (s.attn.array() * (dattn.array() - mean_dattn)).matrix();
  g.attn_query.noalias() += s.slots * dalogits;
  // d slot_i = attn_i * dpooled + dalogit_i * query
  const Mat dslots = dpooled * s.attn.transpose() + p.attn_query * dalogits.transpose();
  Eigen::Index col = 0;
  if (image) g.img_proj.noalias() += dslots.col(col++) * image->transpose();
  for (TokenId t : caption) g.token_emb.row(t) += dslots.col(col++).transpose();
}

}  // namespace detail

/// Next-token distribution given conditioning and a caption prefix.
inline Vec caption_step_distribution(const PolicyParams& p, const Conditioning& c, std::span<const TokenId> prefix) {
  detail::check_conditioning(p, c);
  return detail::caption_step(p, c, prefix).log_probs.array().exp().matrix();
}

namespace detail {

inline Caption decode_caption(const PolicyParams& p, const Conditioning& c, double temperature, Rng* rng) {
  Caption cap;
  cap.logprobs.emplace();
  while (static_cast<int>(cap.tokens.size()) < p.dims.max_len) {
    const auto step = caption_step(p, c, cap.tokens);
    TokenId next = 0;
    if (!rng) {
      Eigen::Index arg = 0;
      step.logits.maxCoeff(&arg);
      next = static_cast<TokenId>(arg);
    } else {
      next = static_cast<TokenId>(rng->categorical(softmax(step.logits / temperature)));
    }
    cap.tokens.push_back(next);
    cap.logprobs->push_back(step.log_probs(next));
    if (next == p.dims.eos) break;
  }
  return cap;
}

}  // namespace detail

/// Ancestral sampling of n captions. Sampling stops at EOS or at max_len
/// (the caption is then left unterminated). Stored logprobs are always at
/// temperature 1.
inline std::vector<Caption> sample_captions(const PolicyParams& p, const Conditioning& c, int n, double temperature,
                                            Rng& rng) {
  if (n < 1) throw InvalidInput("caption count must be at least 1");
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  detail::check_conditioning(p, c);
  std::vector<Caption> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(detail::decode_caption(p, c, temperature, &rng));
  return out;
}

/// Argmax decoding (the zero-temperature limit).
inline Caption greedy_caption(const PolicyParams& p, const Conditioning& c) {
  detail::check_conditioning(p, c);
  return detail::decode_caption(p, c, 1.0, nullptr);
}

/// Scorer over [image slot] ++ [caption tokens]. Either input may be absent, not both.
inline std::pair<ScoreDistribution, AttentionTrace> score_distribution(const PolicyParams& p, const Vec* image,
                                                                       const Caption* caption) {
  std::span<const TokenId> toks;
  if (caption) toks = caption->tokens;
  const auto s = detail::scorer_forward(p, image, toks);
  AttentionTrace trace;
  trace.labels = s.labels;
  trace.weights.assign(s.attn.data(), s.attn.data() + s.attn.size());
  trace.logits.assign(s.attn_logits.data(), s.attn_logits.data() + s.attn_logits.size());
  return {ScoreDistribution{s.log_probs.array().exp().matrix()}, std::move(trace)};
}

struct ScoreSample {
  int bin = 0;
  double logprob = 0.0;
};

inline ScoreSample sample_score(const PolicyParams& p, const Vec* image, const Caption* caption, double temperature,
                                Rng& rng) {
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  std::span<const TokenId> toks;
  if (caption) toks = caption->tokens;
  const auto s = detail::scorer_forward(p, image, toks);
  const int bin = static_cast<int>(rng.categorical(softmax(s.logits / temperature)));
  return {bin, s.log_probs(bin)};
}

// ---------------------------------------------------------------------------
// Trajectories: what a policy-gradient step differentiates

/// One generated sample. Caption tokens are actions when `caption_is_action`,
/// otherwise context only. The score step (if any) sees the caption, plus the
/// image when `score_sees_image`.
struct Trajectory {
  Conditioning context;
  Caption caption;
  bool caption_is_action = true;
  std::optional<int> score_bin;
  bool score_sees_image = true;

  const Vec* scorer_image() const { return score_sees_image && context.image ? &*context.image : nullptr; }
};

struct TrajectoryValue {
  double logprob = 0.0;
  double kl = 0.0;
};

/// Log-probability of the trajectory's actions under `p` and, when `ref` is
/// given, the summed per-step KL(p || ref). When `grad` is given, accumulates
/// coef_logprob * ∇logprob + coef_kl * ∇KL into it.
inline TrajectoryValue evaluate_trajectory(const PolicyParams& p, const PolicyParams* ref, const Trajectory& t,
                                           PolicyParams* grad = nullptr, double coef_logprob = 1.0,
                                           double coef_kl = 0.0) {
  TrajectoryValue v;
  const auto& toks = t.caption.tokens;
  if (t.caption_is_action) {
    detail::check_conditioning(p, t.context);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const std::span<const TokenId> prefix(toks.data(), i);
      const auto step = detail::caption_step(p, t.context, prefix);
      v.logprob += step.log_probs(toks[i]);
      Vec dlogits;
      if (grad) {
        dlogits = -coef_logprob * step.log_probs.array().exp().matrix();
        dlogits(toks[i]) += coef_logprob;
      }
      if (ref) {
        const auto rstep = detail::caption_step(*ref, t.context, prefix);
        const Vec probs = step.log_probs.array().exp().matrix();
        const Vec diff = step.log_probs - rstep.log_probs;
        const double kl = probs.dot(diff);
        v.kl += kl;
        if (grad && coef_kl != 0.0) dlogits += coef_kl * (probs.array() * (diff.array() - kl)).matrix();
      }
      if (grad) detail::caption_step_backward(p, t.context, prefix, step, dlogits, *grad);
    }
  }
  if (t.score_bin) {
    if (*t.score_bin < 0 || *t.score_bin >= p.dims.bins) throw InvalidInput("score bin out of range");
    const Vec* image = t.scorer_image();
    const auto s = detail::scorer_forward(p, image, toks);
    v.logprob += s.log_probs(*t.score_bin);
    Vec dlogits;
    if (grad) {
      dlogits = -coef_logprob * s.log_probs.array().exp().matrix();
      dlogits(*t.score_bin) += coef_logprob;
    }
    if (ref) {
      const auto rs = detail::scorer_forward(*ref, image, toks);
      const Vec probs = s.log_probs.array().exp().matrix();
      const Vec diff = s.log_probs - rs.log_probs;
      const double kl = probs.dot(diff);
      v.kl += kl;
      if (grad && coef_kl != 0.0) dlogits += coef_kl * (probs.array() * (diff.array() - kl)).matrix();
    }
    if (grad) detail::scorer_backward(p, image, toks, s, dlogits, *grad);
  }
  return v;
}

inline double sequence_logprob(const PolicyParams& p, const Trajectory& t) { return evaluate_trajectory(p, nullptr, t).logprob; }

/// Caption generated under `c`, optionally followed by a score that sees the
/// caption and the conditioning image.
inline double sequence_logprob(const PolicyParams& p, const Conditioning& c, const Caption& caption,
                               std::optional<int> score_bin = std::nullopt) {
  return sequence_logprob(p, Trajectory{c, caption, true, score_bin, true});
}

/// Exact gradient of sequence_logprob.
inline PolicyParams grad_logprob(const PolicyParams& p, const Trajectory& t) {
  auto g = p.zeros_like();
  evaluate_trajectory(p, nullptr, t, &g, 1.0, 0.0);
  return g;
}

inline PolicyParams grad_logprob(const PolicyParams& p, const Conditioning& c, const Caption& caption,
                                 std::optional<int> score_bin = std::nullopt) {
  return grad_logprob(p, Trajectory{c, caption, true, score_bin, true});
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointDigits = 17;

inline std::string serialize_checkpoint(const PolicyParams& p) {
  std::string out = "QFLOW-CKPT v1\n";
  auto put = [&](const std::string& name, const Mat& m) {
    out += name + " " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out += ' ';
        out += text::real(m(r, c), kCheckpointDigits);
      }
      out += '\n';
    }
  };
  Mat meta(1, 8);
  meta << p.dims.vocab, p.dims.features, p.dims.embed, p.dims.hidden, p.dims.bins, p.dims.max_len, p.dims.eos,
      p.uses_score_prefix ? 1 : 0;
  put("meta", meta);
  p.for_each([&](const char* name, const auto& t) { put(name, Mat(t)); });
  return out;
}

inline void save_checkpoint(const PolicyParams& p, const std::string& path) {
  text::write_file(path, serialize_checkpoint(p));
}

inline PolicyParams parse_checkpoint(const std::vector<std::string>& lines) {
  std::size_t li = 0;
  auto next_line = [&]() -> const std::string& {
    if (li >= lines.size()) throw ParseError("unexpected end of checkpoint", li + 1);
    return lines[li++];
  };
  const auto header = text::split_ws(next_line());
  if (header.size() != 2 || header[0] != "QFLOW-CKPT") throw ParseError("bad checkpoint header", 1);
  if (header[1] != "v1") throw FormatError("unsupported checkpoint version '" + std::string(header[1]) + "'");

  auto read_tensor = [&](std::string_view expected) {
    const std::size_t lineno = li + 1;
    const auto head = text::split_ws(next_line());
    if (head.size() != 2 || head[0] != expected)
      throw ParseError("expected tensor '" + std::string(expected) + "'", lineno);
    const auto shape = text::split(head[1], 'x');
    if (shape.size() != 2) throw ParseError("bad tensor shape", lineno);
    const auto rows = text::parse_int<Eigen::Index>(shape[0], lineno);
    const auto cols = text::parse_int<Eigen::Index>(shape[1], lineno);
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t rl = li + 1;
      const auto vals = text::split_ws(next_line());
      if (static_cast<Eigen::Index>(vals.size()) != cols) throw ParseError("wrong number of values in tensor row", rl);
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = text::parse_real(vals[static_cast<std::size_t>(c)], rl);
    }
    return m;
  };

  const Mat meta = read_tensor("meta");
  if (meta.rows() != 1 || meta.cols() != 8) throw ParseError("meta tensor must be 1x8");
  ModelDims d;
  d.vocab = static_cast<int>(meta(0, 0));
  d.features = static_cast<int>(meta(0, 1));
  d.embed = static_cast<int>(meta(0, 2));
  d.hidden = static_cast<int>(meta(0, 3));
  d.bins = static_cast<int>(meta(0, 4));
  d.max_len = static_cast<int>(meta(0, 5));
  d.eos = static_cast<int>(meta(0, 6));
  if (d.vocab < 2 || d.features < 1 || d.embed < 1 || d.hidden < 1 || d.bins < 2 || d.max_len < 1 || d.eos < 0 ||
      d.eos >= d.vocab)
    throw ParseError("checkpoint dimensions out of range");
  auto p = PolicyParams::zeros(d);
  p.uses_score_prefix = meta(0, 7) != 0.0;
  p.for_each([&](const char* name, auto& t) {
    const Mat m = read_tensor(name);
    if (m.rows() != t.rows() || m.cols() != t.cols())
      throw ParseError(std::string("tensor '") + name + "' has the wrong shape");
    t = m;
  });
  for (; li < lines.size(); ++li)
    if (!text::trim(lines[li]).empty()) throw ParseError("trailing content after last tensor", li + 1);
  if (!p.all_finite()) throw InvariantViolation("checkpoint contains non-finite weights");
  return p;
}

inline PolicyParams load_checkpoint(const std::string& path) { return parse_checkpoint(text::read_lines(path)); }

}  // namespace qflow
