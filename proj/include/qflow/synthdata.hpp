#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qflow/errors.hpp"
#include "qflow/rng.hpp"
#include "qflow/textio.hpp"

namespace qflow {

/// Planted quality attributes of a synthetic image. All fields live in [0, 1].
struct SceneAttributes {
  double blur = 0.0;
  double noise = 0.0;
  double exposure_error = 0.0;
  double composition = 0.5;

  std::array<double, 4> as_array() const { return {blur, noise, exposure_error, composition}; }
  bool operator==(const SceneAttributes&) const = default;
};

inline void validate(const SceneAttributes& a) {
  static constexpr const char* names[] = {"blur", "noise", "exposure_error", "composition"};
  const auto v = a.as_array();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]) || v[i] < 0.0 || v[i] > 1.0)
      throw InvalidInput(std::string("attribute ") + names[i] + " out of [0,1]: " + text::real(v[i], 9));
}

inline constexpr double kMosMin = 1.0;
inline constexpr double kMosMax = 5.0;
inline constexpr double kMaxNoiseDraw = 0.25;

/// Unclamped affine part of the MOS oracle.
inline double mos_affine(const SceneAttributes& a) {
  return 5.0 - 1.6 * a.blur - 1.2 * a.noise - 0.8 * a.exposure_error + 1.0 * (a.composition - 0.5) * 0.8;
}

/// Ground-truth MOS for a set of attributes and an observation-noise draw.
inline double mos_oracle(const SceneAttributes& a, double noise_draw) {
  validate(a);
  if (!std::isfinite(noise_draw) || std::abs(noise_draw) > kMaxNoiseDraw)
    throw InvalidInput("noise_draw outside [-0.25, 0.25]: " + text::real(noise_draw, 9));
  return std::clamp(mos_affine(a) + noise_draw, kMosMin, kMosMax);
}

struct QualityRecord {
  std::int64_t id = 0;
  Eigen::VectorXd features;
  SceneAttributes attributes;
  double mos = 3.0;

  bool operator==(const QualityRecord& o) const {
    return id == o.id && attributes == o.attributes && mos == o.mos && features.size() == o.features.size() &&
           features == o.features;
  }
};

struct DataConfig {
  int feature_dim = 16;
};

inline constexpr double kFeaturePerturbation = 0.02;
inline constexpr int kStoredDigits = 9;

inline std::string config_digest(const DataConfig& cfg) {
  const std::string canon = "qflow-data-v1;f=" + std::to_string(cfg.feature_dim) + ";perturb=0.02";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canon)));
  return buf;
}

struct Dataset {
  std::vector<QualityRecord> records;
  std::uint64_t seed = 0;
  std::string config_digest;

  int feature_dim() const { return records.empty() ? 0 : static_cast<int>(records.front().features.size()); }
  bool operator==(const Dataset&) const = default;
};

namespace detail {

/// Fixed projection shared by every dataset with the same feature dimension.
struct FeatureEmbedding {
  Eigen::MatrixXd projection;  // F x 4
  Eigen::VectorXd bias;        // F

  explicit FeatureEmbedding(const DataConfig& cfg) : projection(cfg.feature_dim, 4), bias(cfg.feature_dim) {
    Rng rng(derive_seed(0x51f10e7ab1e5eedULL, {static_cast<std::uint64_t>(cfg.feature_dim)}));
    for (int r = 0; r < cfg.feature_dim; ++r) {
      for (int c = 0; c < 4; ++c) projection(r, c) = rng.normal();
      bias(r) = rng.normal(0.0, 0.3);
    }
  }

  Eigen::VectorXd operator()(const SceneAttributes& a) const {
    const auto v = a.as_array();
    Eigen::Vector4d centered(2 * v[0] - 1, 2 * v[1] - 1, 2 * v[2] - 1, 2 * v[3] - 1);
    return (projection * centered + bias).array().tanh().matrix();
  }
};

}  // namespace detail

/// Deterministic synthetic dataset. Every stored real is already rounded to
/// the file precision, so save/load is exact.
inline Dataset generate_dataset(std::uint64_t seed, std::size_t n, const DataConfig& cfg = {}) {
  if (n == 0) throw InvalidInput("n must be at least 1");
  if (cfg.feature_dim < 1) throw InvalidInput("feature_dim must be at least 1");
  const detail::FeatureEmbedding embed(cfg);
  Rng rng(derive_seed(seed, {0xda7a}));
  auto q = [](double v) { return text::quantize(v, kStoredDigits); };

  Dataset d;
  d.seed = seed;
  d.config_digest = config_digest(cfg);
  d.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    QualityRecord r;
    r.id = static_cast<std::int64_t>(i);
    r.attributes.blur = q(rng.uniform());
    r.attributes.noise = q(rng.uniform());
    r.attributes.exposure_error = q(rng.uniform());
    r.attributes.composition = q(rng.uniform());
    const double noise_draw = rng.uniform(-kMaxNoiseDraw, kMaxNoiseDraw);
    r.mos = q(mos_oracle(r.attributes, noise_draw));
    r.features = embed(r.attributes);
    for (auto& f : r.features) f = q(f + rng.normal(0.0, kFeaturePerturbation));
    d.records.push_back(std::move(r));
  }
  return d;
}

/// Observation noise implied by a record's stored MOS (exact only when the
/// oracle did not clamp).
inline double implied_noise_draw(const QualityRecord& r) { return r.mos - mos_affine(r.attributes); }

inline void check_record(const QualityRecord& r, std::size_t line) {
  const std::string where = "record on line " + std::to_string(line) + ": ";
  if (!std::isfinite(r.mos) || r.mos < kMosMin || r.mos > kMosMax)
    throw InvariantViolation(where + "mos " + text::real(r.mos, 9) + " outside [1,5]");
  try {
    validate(r.attributes);
  } catch (const InvalidInput& e) {
    throw InvariantViolation(where + e.what());
  }
  for (auto f : r.features)
    if (!std::isfinite(f)) throw InvariantViolation(where + "non-finite feature");
  // Quantization of attributes and mos leaves ~1e-8 slack.
  constexpr double slack = 1e-6;
  const double base = mos_affine(r.attributes);
  const double lo = std::clamp(base - kMaxNoiseDraw, kMosMin, kMosMax);
  const double hi = std::clamp(base + kMaxNoiseDraw, kMosMin, kMosMax);
  if (r.mos < lo - slack || r.mos > hi + slack)
    throw InvariantViolation(where + "mos " + text::real(r.mos, 9) + " inconsistent with the oracle");
}

inline std::string serialize_dataset(const Dataset& d) {
  std::string out = "QFLOW-DATA v1 seed=" + std::to_string(d.seed) + " f=" + std::to_string(d.feature_dim()) + "\n";
  for (const auto& r : d.records) {
    out += std::to_string(r.id);
    out += '|';
    const auto a = r.attributes.as_array();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (i) out += ',';
      out += text::real(a[i], kStoredDigits);
    }
    out += '|';
    out += text::real(r.mos, kStoredDigits);
    out += '|';
    for (Eigen::Index i = 0; i < r.features.size(); ++i) {
      if (i) out += ',';
      out += text::real(r.features(i), kStoredDigits);
    }
    out += '\n';
  }
  return out;
}

inline void save_dataset(const Dataset& d, const std::string& path) { text::write_file(path, serialize_dataset(d)); }

inline Dataset parse_dataset(const std::vector<std::string>& lines) {
  if (lines.empty()) throw ParseError("empty dataset file", 1);
  const auto header = text::split_ws(lines[0]);
  if (header.size() != 4 || header[0] != "QFLOW-DATA") throw ParseError("bad dataset header", 1);
  if (header[1] != "v1") throw FormatError("unsupported dataset version '" + std::string(header[1]) + "'");
  if (header[2].substr(0, 5) != "seed=" || header[3].substr(0, 2) != "f=") throw ParseError("bad dataset header", 1);
  Dataset d;
  d.seed = text::parse_int<std::uint64_t>(header[2].substr(5), 1);
  const int f = text::parse_int<int>(header[3].substr(2), 1);
  if (f < 1) throw ParseError("feature dimension must be positive", 1);
  d.config_digest = config_digest(DataConfig{f});

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t lineno = li + 1;
    if (text::trim(lines[li]).empty()) {
      if (li + 1 == lines.size()) break;
      throw ParseError("blank line inside record block", lineno);
    }
    const auto parts = text::split(lines[li], '|');
    if (parts.size() != 4) throw ParseError("expected 4 '|'-separated fields", lineno);
    QualityRecord r;
    r.id = text::parse_int<std::int64_t>(parts[0], lineno);
    const auto attrs = text::split(parts[1], ',');
    if (attrs.size() != 4) throw ParseError("expected 4 attributes", lineno);
    r.attributes = {text::parse_real(attrs[0], lineno), text::parse_real(attrs[1], lineno),
                    text::parse_real(attrs[2], lineno), text::parse_real(attrs[3], lineno)};
    r.mos = text::parse_real(parts[2], lineno);
    const auto feats = text::split(parts[3], ',');
    if (static_cast<int>(feats.size()) != f)
      throw ParseError("expected " + std::to_string(f) + " features, got " + std::to_string(feats.size()), lineno);
    r.features.resize(f);
    for (int i = 0; i < f; ++i) r.features(i) = text::parse_real(feats[i], lineno);
    if (r.id != static_cast<std::int64_t>(d.records.size()))
      throw InvariantViolation("record on line " + std::to_string(lineno) + ": ids must be contiguous from 0");
    check_record(r, lineno);
    d.records.push_back(std::move(r));
  }
  if (d.records.empty()) throw ParseError("dataset has no records", lines.size() + 1);
  return d;
}

inline Dataset load_dataset(const std::string& path) { return parse_dataset(text::read_lines(path)); }

struct Split {
  std::vector<QualityRecord> train;
  std::vector<QualityRecord> test;
};

/// Seeded shuffle, then the first `train_fraction` of records train and the rest test.
inline Split split_dataset(const Dataset& d, double train_fraction, std::uint64_t shuffle_seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidInput("train_fraction must be in (0,1)");
  std::vector<std::size_t> order(d.records.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(shuffle_seed, {0x5b117}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size())));
  Split s;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? s.train : s.test).push_back(d.records[order[i]]);
  return s;
}

/// Packs records into a standalone dataset with ids renumbered from 0.
inline Dataset as_dataset(std::span<const QualityRecord> records, std::uint64_t seed) {
  Dataset d;
  d.seed = seed;
  d.records.assign(records.begin(), records.end());
  for (std::size_t i = 0; i < d.records.size(); ++i) d.records[i].id = static_cast<std::int64_t>(i);
  d.config_digest = config_digest(DataConfig{d.feature_dim()});
  return d;
}

}  // namespace qflow
