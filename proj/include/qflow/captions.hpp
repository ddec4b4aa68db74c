#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qflow/errors.hpp"
#include "qflow/textio.hpp"

namespace qflow {

using TokenId = int;

inline constexpr std::string_view kEosToken = "<eos>";

/// Token inventory shared by the captioner and the scorer.
class Vocabulary {
 public:
  /// `score_words` lists tokens removed by strip_score_words; each must appear in `tokens`.
  Vocabulary(std::vector<std::string> tokens, const std::vector<std::string>& score_words) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\r\n") != std::string::npos)
        throw InvalidInput("vocabulary token '" + tokens_[i] + "' is empty or contains whitespace");
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw InvalidInput("duplicate vocabulary token '" + tokens_[i] + "'");
    }
    const auto eos = index_.find(std::string(kEosToken));
    if (eos == index_.end()) throw InvalidInput("vocabulary has no <eos> token");
    eos_ = eos->second;
    for (const auto& w : score_words) {
      const auto it = index_.find(w);
      if (it == index_.end()) throw InvalidInput("score word '" + w + "' is not in the vocabulary");
      if (it->second == eos_) throw InvalidInput("<eos> cannot be a score word");
      score_word_ids_.push_back(it->second);
    }
    std::sort(score_word_ids_.begin(), score_word_ids_.end());
    score_word_ids_.erase(std::unique(score_word_ids_.begin(), score_word_ids_.end()), score_word_ids_.end());
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  TokenId eos() const { return eos_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<TokenId>& score_word_ids() const { return score_word_ids_; }

  std::optional<TokenId> find(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool is_score_word(TokenId id) const {
    return std::binary_search(score_word_ids_.begin(), score_word_ids_.end(), id);
  }

  bool valid(TokenId id) const { return id >= 0 && id < size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<TokenId> score_word_ids_;
  TokenId eos_ = -1;
};

/// The five score-related words removed in the word-removal evaluation.
inline const std::vector<std::string>& default_score_words() {
  static const std::vector<std::string> words = {"good", "moderate", "average", "poor", "decent"};
  return words;
}

/// 64 tokens: EOS, quality words, score words and fillers.
inline Vocabulary default_vocabulary() {
  std::vector<std::string> tokens = {
      std::string(kEosToken),
      // quality cues
      "blurry", "sharp", "focus", "composition", "noisy", "clean", "bright", "dark",
      // score words
      "good", "moderate", "average", "poor", "decent",
      // fillers and descriptors
      "a", "the", "photo", "image", "with", "and", "is", "very", "slightly", "somewhat", "quite", "overall",
      "lighting", "colors", "details", "subject", "background", "exposure", "contrast", "texture", "scene",
      "edges", "grain", "highlights", "shadows", "framing", "balanced", "soft", "crisp", "vivid", "dull", "muted",
      "well", "poorly", "lit", "centered", "cluttered", "natural", "visible", "strong", "weak", "fine", "heavy",
      "mild", "little", "some", "of", "in", "but", "clear"};
  return Vocabulary(std::move(tokens), default_score_words());
}

/// Vocabulary file: one token per line, `#` starts a comment, a score word
/// carries a trailing tab and `SCORE`.
inline Vocabulary parse_vocabulary(const std::vector<std::string>& lines) {
  std::vector<std::string> tokens;
  std::vector<std::string> score_words;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (text::trim(line).empty()) continue;
    const auto fields = text::split(line, '\t');
    const auto word = text::trim(fields[0]);
    if (word.empty() || word.find(' ') != std::string_view::npos) throw ParseError("malformed vocabulary token", i + 1);
    if (fields.size() > 2) throw ParseError("too many tab-separated fields", i + 1);
    if (fields.size() == 2) {
      const auto tag = text::trim(fields[1]);
      if (tag == "SCORE")
        score_words.emplace_back(word);
      else if (!tag.empty())
        throw ParseError("unknown token tag '" + std::string(tag) + "'", i + 1);
    }
    tokens.emplace_back(word);
  }
  try {
    return Vocabulary(std::move(tokens), score_words);
  } catch (const InvalidInput& e) {
    throw ParseError(e.what());
  }
}

inline Vocabulary load_vocabulary(const std::string& path) { return parse_vocabulary(text::read_lines(path)); }

inline std::string serialize_vocabulary(const Vocabulary& v) {
  std::string out = "# qflow vocabulary\n";
  for (TokenId i = 0; i < v.size(); ++i) {
    out += v.token(i);
    if (v.is_score_word(i)) out += "\tSCORE";
    out += '\n';
  }
  return out;
}

/// A token sequence, optionally carrying the per-token log-probabilities it
/// was sampled with. Complete iff the last token is EOS.
struct Caption {
  std::vector<TokenId> tokens;
  std::optional<std::vector<double>> logprobs;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  bool complete(TokenId eos) const { return !tokens.empty() && tokens.back() == eos; }
  bool operator==(const Caption&) const = default;
};

/// Checks the caption invariants: ids valid, at most one EOS and only at the
/// end, length within `max_len`, logprobs finite and non-positive.
inline void validate(const Caption& c, const Vocabulary& v, std::size_t max_len) {
  if (c.tokens.size() > max_len) throw InvalidInput("caption longer than the maximum length");
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    if (!v.valid(c.tokens[i])) throw InvalidInput("caption holds an invalid token id " + std::to_string(c.tokens[i]));
    if (c.tokens[i] == v.eos() && i + 1 != c.tokens.size()) throw InvalidInput("EOS before the end of a caption");
  }
  if (c.logprobs) {
    if (c.logprobs->size() != c.tokens.size()) throw InvalidInput("logprob count differs from token count");
    for (double lp : *c.logprobs)
      if (!std::isfinite(lp) || lp > 0.0) throw InvalidInput("caption logprob must be finite and <= 0");
  }
}

/// Removes every score word; order and EOS are kept, logprobs dropped.
inline Caption strip_score_words(const Caption& c, const Vocabulary& v) {
  Caption out;
  out.tokens.reserve(c.tokens.size());
  for (TokenId t : c.tokens)
    if (!v.is_score_word(t)) out.tokens.push_back(t);
  return out;
}

/// Space-joined words; EOS renders as nothing.
inline std::string detokenize(const Caption& c, const Vocabulary& v) {
  std::string out;
  for (TokenId t : c.tokens) {
    if (t == v.eos()) continue;
    if (!out.empty()) out += ' ';
    out += v.token(t);
  }
  return out;
}

/// Inverse of detokenize. A complete caption gets EOS appended.
inline Caption tokenize(std::string_view s, const Vocabulary& v, bool complete = true) {
  Caption c;
  for (auto word : text::split_ws(s)) {
    const auto id = v.find(word);
    if (!id) throw TokenizationError("unknown word '" + std::string(word) + "'");
    if (*id == v.eos()) throw TokenizationError("literal <eos> in caption text");
    c.tokens.push_back(*id);
  }
  if (complete) c.tokens.push_back(v.eos());
  return c;
}

}  // namespace qflow
