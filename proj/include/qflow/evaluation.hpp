#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qflow/captions.hpp"
#include "qflow/errors.hpp"
#include "qflow/parallel.hpp"
#include "qflow/paradigms.hpp"
#include "qflow/policy.hpp"
#include "qflow/synthdata.hpp"
#include "qflow/textio.hpp"

namespace qflow {

// ---------------------------------------------------------------------------
// Correlation metrics

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidInput("correlation inputs differ in length");
  if (x.size() < 3) throw InvalidInput("correlation needs at least 3 points");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InvalidInput("correlation inputs must be finite");
}

}  // namespace detail

/// Pearson linear correlation. Throws UndefinedCorrelation on constant input.
inline double plcc(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("correlation undefined: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the average of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson over fractional ranks.
inline double srcc(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  return plcc(rx, ry);
}

// ---------------------------------------------------------------------------
// Reports

struct ConditionResult {
  EvalMode mode = EvalMode::Image;
  double plcc = 0.0;
  double srcc = 0.0;
  std::size_t n = 0;
  bool operator==(const ConditionResult&) const = default;
};

struct EvalReport {
  std::vector<ConditionResult> conditions;
  /// plcc(image) - plcc(text), present when both conditions were evaluated.
  std::optional<double> gap_plcc;
  std::optional<double> gap_srcc;

  const ConditionResult* find(EvalMode m) const {
    for (const auto& c : conditions)
      if (c.mode == m) return &c;
    return nullptr;
  }
  bool operator==(const EvalReport&) const = default;
};

inline constexpr int kReportDigits = 17;

inline std::string format_gap_lines(const EvalReport& r) {
  std::string out;
  if (r.gap_plcc) out += "gap_plcc=" + text::real(*r.gap_plcc, kReportDigits) + "\n";
  if (r.gap_srcc) out += "gap_srcc=" + text::real(*r.gap_srcc, kReportDigits) + "\n";
  return out;
}

inline std::string serialize_report(const EvalReport& r) {
  std::string out;
  for (const auto& c : r.conditions)
    out += "condition=" + to_string(c.mode) + " plcc=" + text::real(c.plcc, kReportDigits) +
           " srcc=" + text::real(c.srcc, kReportDigits) + " n=" + std::to_string(c.n) + "\n";
  return out + format_gap_lines(r);
}

inline EvalReport parse_report(const std::vector<std::string>& lines) {
  EvalReport r;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = text::trim(lines[i]);
    const std::size_t lineno = i + 1;
    if (line.empty() || line.front() == '#') continue;
    if (line.starts_with("condition=")) {
      ConditionResult c;
      c.mode = parse_eval_mode(text::field(line, "condition", lineno));
      c.plcc = text::parse_real(text::field(line, "plcc", lineno), lineno);
      c.srcc = text::parse_real(text::field(line, "srcc", lineno), lineno);
      c.n = text::parse_int<std::size_t>(text::field(line, "n", lineno), lineno);
      r.conditions.push_back(c);
    } else if (line.starts_with("gap_plcc=")) {
      r.gap_plcc = text::parse_real(line.substr(9), lineno);
    } else if (line.starts_with("gap_srcc=")) {
      r.gap_srcc = text::parse_real(line.substr(9), lineno);
    } else {
      throw ParseError("unrecognized report line", lineno);
    }
  }
  return r;
}

/// Per-record predictions under one condition.
struct ConditionPredictions {
  EvalMode mode = EvalMode::Image;
  std::vector<double> scores;
  std::vector<AttentionTrace> traces;
  std::vector<Caption> captions;
};

inline ConditionResult summarize(const ConditionPredictions& preds, std::span<const QualityRecord> test) {
  std::vector<double> mos;
  mos.reserve(test.size());
  for (const auto& r : test) mos.push_back(r.mos);
  return {preds.mode, plcc(preds.scores, mos), srcc(preds.scores, mos), test.size()};
}

/// Runs each requested condition on one greedy caption per record.
inline std::vector<ConditionPredictions> predict_conditions(const PolicyParams& p, const Vocabulary& v,
                                                            std::span<const QualityRecord> test,
                                                            std::span<const EvalMode> modes) {
  std::vector<Caption> captions(test.size());
  parallel_for(test.size(), [&](std::size_t i) { captions[i] = inference_caption(p, test[i]); });
  std::vector<ConditionPredictions> out;
  for (auto mode : modes) {
    ConditionPredictions cp;
    cp.mode = mode;
    cp.scores.resize(test.size());
    cp.traces.resize(test.size());
    cp.captions.resize(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
      auto inf = score_with_caption(p, v, test[i], captions[i], mode);
      cp.scores[i] = inf.score;
      cp.traces[i] = std::move(inf.trace);
      cp.captions[i] = std::move(inf.caption);
    });
    out.push_back(std::move(cp));
  }
  return out;
}

inline ConditionResult evaluate(const PolicyParams& p, const Vocabulary& v, std::span<const QualityRecord> test,
                                EvalMode mode) {
  if (test.size() < 3) throw InvalidInput("evaluation needs at least 3 records");
  const EvalMode modes[] = {mode};
  return summarize(predict_conditions(p, v, test, modes).front(), test);
}

inline EvalReport report_from(const std::vector<ConditionPredictions>& preds, std::span<const QualityRecord> test) {
  EvalReport r;
  for (const auto& cp : preds) r.conditions.push_back(summarize(cp, test));
  const auto* img = r.find(EvalMode::Image);
  const auto* txt = r.find(EvalMode::Text);
  if (img && txt) {
    r.gap_plcc = img->plcc - txt->plcc;
    r.gap_srcc = img->srcc - txt->srcc;
  }
  return r;
}

inline const std::vector<EvalMode>& all_modes() {
  static const std::vector<EvalMode> modes = {EvalMode::Image, EvalMode::Text, EvalMode::TextStripped};
  return modes;
}

/// All three conditions on shared greedy captions, with image-text gaps.
inline EvalReport gap_report(const PolicyParams& p, const Vocabulary& v, std::span<const QualityRecord> test) {
  if (test.size() < 3) throw InvalidInput("evaluation needs at least 3 records");
  return report_from(predict_conditions(p, v, test, all_modes()), test);
}

// ---------------------------------------------------------------------------
// Attention histogram

struct AttentionEntry {
  TokenId label = kImageSlot;
  double mean_weight = 0.0;
  double mean_logit = 0.0;
  std::size_t count = 0;
  bool operator==(const AttentionEntry&) const = default;
};

/// Mean softmax-normalized attention per slot label, sorted by weight descending.
struct AttentionHistogram {
  std::vector<AttentionEntry> entries;
  bool operator==(const AttentionHistogram&) const = default;
};

inline AttentionHistogram aggregate_attention(std::span<const AttentionTrace> traces) {
  struct Acc {
    double weight = 0.0;
    double logit = 0.0;
    std::size_t count = 0;
  };
  std::map<TokenId, Acc> acc;
  for (const auto& t : traces)
    for (std::size_t i = 0; i < t.labels.size(); ++i) {
      auto& a = acc[t.labels[i]];
      a.weight += t.weights[i];
      a.logit += t.logits.empty() ? 0.0 : t.logits[i];
      ++a.count;
    }
  AttentionHistogram h;
  for (const auto& [label, a] : acc)
    h.entries.push_back({label, a.weight / static_cast<double>(a.count), a.logit / static_cast<double>(a.count), a.count});
  std::stable_sort(h.entries.begin(), h.entries.end(),
                   [](const auto& a, const auto& b) { return a.mean_weight > b.mean_weight; });
  return h;
}

inline AttentionHistogram attention_report(const PolicyParams& p, const Vocabulary& v,
                                           std::span<const QualityRecord> test, EvalMode mode) {
  const EvalMode modes[] = {mode};
  return aggregate_attention(predict_conditions(p, v, test, modes).front().traces);
}

inline std::string slot_label_name(TokenId label, const Vocabulary& v) {
  return label == kImageSlot ? "IMAGE_SLOT" : v.token(label);
}

/// `label,mean_weight,count` lines.
inline std::string serialize_histogram(const AttentionHistogram& h, const Vocabulary& v) {
  std::string out;
  for (const auto& e : h.entries)
    out += slot_label_name(e.label, v) + "," + text::real(e.mean_weight, kReportDigits) + "," +
           std::to_string(e.count) + "\n";
  return out;
}

/// `label,mean_logit,count` lines, same order as the weight histogram.
inline std::string serialize_histogram_logits(const AttentionHistogram& h, const Vocabulary& v) {
  std::string out;
  for (const auto& e : h.entries)
    out += slot_label_name(e.label, v) + "," + text::real(e.mean_logit, kReportDigits) + "," +
           std::to_string(e.count) + "\n";
  return out;
}

/// Parses the weight histogram; logits are not part of that file.
inline AttentionHistogram parse_histogram(const std::vector<std::string>& lines, const Vocabulary& v) {
  AttentionHistogram h;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = text::trim(lines[i]);
    if (line.empty() || line.front() == '#') continue;
    const auto parts = text::split(line, ',');
    if (parts.size() != 3) throw ParseError("expected label,mean_weight,count", i + 1);
    AttentionEntry e;
    if (parts[0] == "IMAGE_SLOT") {
      e.label = kImageSlot;
    } else {
      const auto id = v.find(parts[0]);
      if (!id) throw ParseError("unknown label '" + std::string(parts[0]) + "'", i + 1);
      e.label = *id;
    }
    e.mean_weight = text::parse_real(parts[1], i + 1);
    e.count = text::parse_int<std::size_t>(parts[2], i + 1);
    if (e.mean_weight < 0.0 || e.mean_weight > 1.0) throw InvariantViolation("mean weight outside [0,1]");
    h.entries.push_back(e);
  }
  return h;
}

}  // namespace qflow
