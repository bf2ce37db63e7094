#pragma once

#include "rnn_dynamo/common.hpp"

#include "json.hpp"

#include <array>
#include <cctype>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace rnn_dynamo {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";

/// Sentences longer than this are truncated at load time.
inline constexpr std::size_t kMaxSentenceTokens = 60;

/// Lowercases ASCII and splits on whitespace and punctuation; punctuation is
/// dropped. The special tokens "<pad>" and "<unk>" survive as whole words so
/// that rendering ids back to text and re-tokenizing is a no-op.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
      ++i;
      continue;
    }
    if (current.empty()) {
      bool special = false;
      for (std::string_view tok : {kPadToken, kUnkToken}) {
        const std::size_t end = i + tok.size();
        if (text.substr(i, tok.size()) == tok &&
            (end == text.size() || std::isspace(static_cast<unsigned char>(text[end])))) {
          words.emplace_back(tok);
          i = end;
          special = true;
          break;
        }
      }
      if (special) continue;
    }
    if (c < 0x80 && std::ispunct(c)) {
      flush();
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
    ++i;
  }
  flush();
  return words;
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{std::string(kPadToken), std::string(kUnkToken)} {
    ids_.emplace(kPadToken, kPadId);
    ids_.emplace(kUnkToken, kUnkId);
  }

  explicit Vocabulary(const std::vector<std::string>& ordered_tokens) : Vocabulary() {
    for (const auto& t : ordered_tokens) {
      if (t == kPadToken || t == kUnkToken) continue;
      if (!ids_.emplace(t, static_cast<int>(tokens_.size())).second) {
        throw Error("duplicate vocabulary token '" + t + "'");
      }
      tokens_.push_back(t);
    }
  }

  int id(const std::string& token) const {
    const auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& t : tokens_) {
      h.update(t);
      h.update(std::string_view("\n"));
    }
    return h.digest();
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Frequency-ranked vocabulary; ties are broken lexicographically.
inline Vocabulary build_vocabulary(const std::vector<std::string>& sentences, int min_freq,
                                   int max_size) {
  if (sentences.empty()) throw Error("empty corpus");
  if (min_freq < 1) throw Error("min_freq must be >= 1");
  if (max_size < 3) throw Error("max_size must be >= 3");
  std::map<std::string, int> counts;
  for (const auto& s : sentences) {
    for (auto& w : normalize_words(s)) {
      if (w == kPadToken || w == kUnkToken) continue;
      ++counts[w];
    }
  }
  std::vector<std::pair<std::string, int>> ranked;
  for (auto& [w, c] : counts) {
    if (c >= min_freq) ranked.emplace_back(w, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  const std::size_t room = static_cast<std::size_t>(max_size) - 2;
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) kept.push_back(ranked[i].first);
  return Vocabulary(kept);
}

inline std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
  const auto words = normalize_words(text);
  if (words.empty()) throw Error("empty after tokenization");
  std::vector<int> ids;
  ids.reserve(std::min(words.size(), kMaxSentenceTokens));
  for (std::size_t i = 0; i < words.size() && i < kMaxSentenceTokens; ++i) {
    ids.push_back(vocab.id(words[i]));
  }
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

enum class Split { unassigned, train, val, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "unassigned";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val" || name == "valid" || name == "validation" || name == "dev") return Split::val;
  if (name == "test") return Split::test;
  throw Error("unknown split '" + std::string(name) + "'");
}

struct LabeledSentence {
  std::string text;
  std::vector<std::string> words;  // normalized, truncated
  std::vector<int> tokens;         // filled by encode()
  int intent = 0;
  Split split = Split::unassigned;
};

struct LabeledCorpus {
  std::vector<LabeledSentence> sentences;
  std::vector<std::string> intents;  // sorted; index is the intent id

  int n_intents() const { return static_cast<int>(intents.size()); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (sentences[i].split == s) out.push_back(i);
    }
    return out;
  }

  std::vector<int> class_counts(std::optional<Split> s = std::nullopt) const {
    std::vector<int> counts(intents.size(), 0);
    for (const auto& sent : sentences) {
      if (!s || sent.split == *s) ++counts[static_cast<std::size_t>(sent.intent)];
    }
    return counts;
  }

  std::vector<std::string> texts(Split s) const {
    std::vector<std::string> out;
    for (const auto& sent : sentences) {
      if (sent.split == s) out.push_back(sent.text);
    }
    return out;
  }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& name : intents) {
      h.update(name);
      h.update(std::string_view("\x1f"));
    }
    for (const auto& s : sentences) {
      h.update(s.text);
      h.update(std::string_view("\x1f"));
      h.update(intents[static_cast<std::size_t>(s.intent)]);
      h.update(split_name(s.split));
      h.update(std::string_view("\n"));
    }
    return h.digest();
  }
};

/// Maps every sentence's words through the vocabulary.
inline void encode(LabeledCorpus& corpus, const Vocabulary& vocab) {
  for (auto& s : corpus.sentences) {
    s.tokens.clear();
    for (const auto& w : s.words) s.tokens.push_back(vocab.id(w));
  }
}

/// Reads JSON Lines records {"text": ..., "intent": ...} with an optional
/// "split" field. Intent ids follow lexicographic order of the names.
inline LabeledCorpus parse_corpus(std::istream& in) {
  struct Raw {
    std::string text;
    std::string intent;
    std::vector<std::string> words;
    Split split;
  };
  std::vector<Raw> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw Error("line " + std::to_string(line_no) + ": expected an object");
    for (const char* key : {"text", "intent"}) {
      if (!obj.contains(key)) {
        throw Error("line " + std::to_string(line_no) + ": missing field '" + key + "'");
      }
      if (!obj[key].is_string()) {
        throw Error("line " + std::to_string(line_no) + ": field '" + key + "' must be a string");
      }
    }
    Raw r;
    r.text = obj["text"].get<std::string>();
    r.intent = obj["intent"].get<std::string>();
    r.split = Split::unassigned;
    if (obj.contains("split")) {
      if (!obj["split"].is_string()) {
        throw Error("line " + std::to_string(line_no) + ": field 'split' must be a string");
      }
      try {
        r.split = parse_split(obj["split"].get<std::string>());
      } catch (const Error& e) {
        throw Error("line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    r.words = normalize_words(r.text);
    if (r.words.empty()) {
      throw Error("line " + std::to_string(line_no) + ": empty after tokenization");
    }
    if (r.words.size() > kMaxSentenceTokens) r.words.resize(kMaxSentenceTokens);
    rows.push_back(std::move(r));
  }
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.intent);
  LabeledCorpus corpus;
  corpus.intents.assign(names.begin(), names.end());
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < corpus.intents.size(); ++i) index[corpus.intents[i]] = static_cast<int>(i);
  for (auto& r : rows) {
    LabeledSentence s;
    s.text = std::move(r.text);
    s.words = std::move(r.words);
    s.intent = index[r.intent];
    s.split = r.split;
    corpus.sentences.push_back(std::move(s));
  }
  return corpus;
}

inline LabeledCorpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus '" + path + "'");
  return parse_corpus(in);
}

inline void write_corpus(std::ostream& out, const LabeledCorpus& corpus, bool with_split) {
  for (const auto& s : corpus.sentences) {
    nlohmann::ordered_json obj;
    obj["text"] = s.text;
    obj["intent"] = corpus.intents[static_cast<std::size_t>(s.intent)];
    if (with_split) obj["split"] = std::string(split_name(s.split));
    out << obj.dump() << '\n';
  }
}

/// Drops intents that have no training sentence and renumbers the rest.
inline LabeledCorpus drop_untrained_intents(const LabeledCorpus& corpus) {
  const auto train_counts = corpus.class_counts(Split::train);
  std::vector<int> remap(corpus.intents.size(), -1);
  LabeledCorpus out;
  for (std::size_t c = 0; c < corpus.intents.size(); ++c) {
    if (train_counts[c] > 0) {
      remap[c] = out.n_intents();
      out.intents.push_back(corpus.intents[c]);
    }
  }
  for (const auto& s : corpus.sentences) {
    const int id = remap[static_cast<std::size_t>(s.intent)];
    if (id < 0) continue;
    auto copy = s;
    copy.intent = id;
    out.sentences.push_back(std::move(copy));
  }
  return out;
}

/// Assigns train/val/test membership. Stratified splits round each class's
/// share independently, so per-class proportions are off by at most one
/// sentence.
inline LabeledCorpus split(const LabeledCorpus& corpus, std::array<double, 3> fractions,
                           bool stratified, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw Error("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("split fractions must sum to 1");

  LabeledCorpus out = corpus;
  Rng rng(seed);
  auto assign = [&](std::vector<std::size_t>& idx) {
    const auto n = static_cast<long>(idx.size());
    long n_train = std::lround(fractions[0] * static_cast<double>(n));
    long n_val = std::lround(fractions[1] * static_cast<double>(n));
    if (stratified) {
      n_train = std::clamp(n_train, 1L, n - 2);
      n_val = std::clamp(n_val, 1L, n - n_train - 1);
    } else {
      n_train = std::min(n_train, n);
      n_val = std::min(n_val, n - n_train);
    }
    for (long i = 0; i < n; ++i) {
      const Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
      out.sentences[idx[static_cast<std::size_t>(i)]].split = s;
    }
  };

  if (stratified) {
    std::vector<std::vector<std::size_t>> by_class(corpus.intents.size());
    for (std::size_t i = 0; i < corpus.sentences.size(); ++i) {
      by_class[static_cast<std::size_t>(corpus.sentences[i].intent)].push_back(i);
    }
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      if (by_class[c].size() < fractions.size()) {
        throw Error("class '" + corpus.intents[c] + "' has " + std::to_string(by_class[c].size()) +
                    " sentences, fewer than the 3 splits");
      }
      rng.shuffle(by_class[c]);
      assign(by_class[c]);
    }
  } else {
    std::vector<std::size_t> idx(corpus.sentences.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    assign(idx);
  }
  return out;
}

/// Moves a stratified fraction of the training sentences into the validation
/// split, keeping at least one training sentence per class. Used for corpora
/// that ship with a fixed train/test partition.
inline LabeledCorpus split_validation(const LabeledCorpus& corpus, double val_fraction,
                                      std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("validation fraction must be in (0,1)");
  LabeledCorpus out = corpus;
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(corpus.intents.size());
  for (std::size_t i = 0; i < corpus.sentences.size(); ++i) {
    if (corpus.sentences[i].split == Split::train) {
      by_class[static_cast<std::size_t>(corpus.sentences[i].intent)].push_back(i);
    }
  }
  for (auto& idx : by_class) {
    if (idx.size() < 2) continue;
    rng.shuffle(idx);
    const long n = static_cast<long>(idx.size());
    const long n_val = std::clamp(std::lround(val_fraction * static_cast<double>(n)), 0L, n - 1);
    for (long i = 0; i < n_val; ++i) out.sentences[idx[static_cast<std::size_t>(i)]].split = Split::val;
  }
  return out;
}

struct SyntheticSpec {
  int n_intents = 7;
  int per_intent = 300;
  int templates_per_intent = 8;
  int lexicon_size = 12;
  std::uint64_t seed = 13;
  // Per-class sentence counts; overrides per_intent when non-empty.
  std::vector<int> class_counts;
  // Probability that a keyword in a minority-class sentence (< 2% of the
  // corpus) is swapped for one of the majority class's keywords.
  double minority_confusion = 0.0;
  // Probability that an open slot is filled with one of the intent's own keywords.
  double keyword_rate = 0.2;
  int filler_size = 40;
  int min_length = 4;
  int max_length = 12;
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
  static constexpr std::array<std::string_view, 16> kOnsets = {
      "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"};
  static constexpr std::array<std::string_view, 6> kVowels = {"a", "e", "i", "o", "u", "ai"};
  const std::size_t syllables = 2 + rng.below(2);
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(kOnsets.size())];
    w += kVowels[rng.below(kVowels.size())];
  }
  if (rng.below(3) == 0) w += "n";
  return w;
}

}  // namespace detail

/// Templated intent grammar. Each intent owns a keyword lexicon; each template
/// fixes two of those keywords at fixed positions and leaves the other slots
/// to shared filler words (or, occasionally, further keywords of the intent).
inline LabeledCorpus generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_intents < 2) throw Error("n_intents must be >= 2");
  if (spec.class_counts.empty() && spec.per_intent < 10) throw Error("per_intent must be >= 10");
  if (!spec.class_counts.empty() && static_cast<int>(spec.class_counts.size()) != spec.n_intents) {
    throw Error("class_counts must have one entry per intent");
  }
  if (spec.templates_per_intent < 1) throw Error("templates_per_intent must be >= 1");
  if (spec.lexicon_size < spec.templates_per_intent) {
    throw Error("lexicon_size must be >= templates_per_intent");
  }
  if (spec.lexicon_size < 2) throw Error("lexicon_size must be >= 2");
  if (spec.min_length < 2 || spec.max_length < spec.min_length) throw Error("invalid sentence length range");

  Rng rng(spec.seed);
  std::set<std::string> used;
  auto fresh_word = [&] {
    for (;;) {
      auto w = detail::pseudo_word(rng);
      if (used.insert(w).second) return w;
    }
  };
  std::vector<std::string> fillers;
  for (int i = 0; i < spec.filler_size; ++i) fillers.push_back(fresh_word());
  std::vector<std::vector<std::string>> lexicons(static_cast<std::size_t>(spec.n_intents));
  for (auto& lex : lexicons) {
    for (int i = 0; i < spec.lexicon_size; ++i) lex.push_back(fresh_word());
  }

  struct Slot {
    int keyword = -1;  // index into the intent lexicon; -1 means sampled
  };
  std::vector<std::vector<std::vector<Slot>>> templates(static_cast<std::size_t>(spec.n_intents));
  for (int c = 0; c < spec.n_intents; ++c) {
    for (int j = 0; j < spec.templates_per_intent; ++j) {
      const int len = spec.min_length +
                      static_cast<int>(rng.below(static_cast<std::size_t>(spec.max_length - spec.min_length + 1)));
      std::vector<Slot> slots(static_cast<std::size_t>(len));
      const auto first = rng.below(static_cast<std::size_t>(len));
      auto second = rng.below(static_cast<std::size_t>(len - 1));
      if (second >= first) ++second;
      slots[first].keyword = j;
      slots[second].keyword =
          (j + 1 + static_cast<int>(rng.below(static_cast<std::size_t>(spec.lexicon_size - 1)))) %
          spec.lexicon_size;
      templates[static_cast<std::size_t>(c)].push_back(std::move(slots));
    }
  }

  std::vector<int> counts = spec.class_counts;
  if (counts.empty()) counts.assign(static_cast<std::size_t>(spec.n_intents), spec.per_intent);
  const long total = std::accumulate(counts.begin(), counts.end(), 0L);
  const auto majority = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());

  LabeledCorpus corpus;
  const int width = spec.n_intents > 100 ? 3 : 2;
  for (int c = 0; c < spec.n_intents; ++c) {
    std::string id = std::to_string(c);
    corpus.intents.push_back("intent_" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(id.size()))), '0') + id);
  }
  for (int c = 0; c < spec.n_intents; ++c) {
    const auto& lex = lexicons[static_cast<std::size_t>(c)];
    const bool minority = static_cast<double>(counts[static_cast<std::size_t>(c)]) < 0.02 * static_cast<double>(total);
    for (int k = 0; k < counts[static_cast<std::size_t>(c)]; ++k) {
      const auto& tmpl = templates[static_cast<std::size_t>(c)][rng.below(templates[static_cast<std::size_t>(c)].size())];
      std::string text;
      for (const auto& slot : tmpl) {
        std::string word;
        bool keyword = true;
        if (slot.keyword >= 0) {
          word = lex[static_cast<std::size_t>(slot.keyword)];
        } else if (rng.uniform() < spec.keyword_rate) {
          word = lex[rng.below(lex.size())];
        } else {
          word = fillers[rng.below(fillers.size())];
          keyword = false;
        }
        if (keyword && minority && static_cast<std::size_t>(c) != majority &&
            rng.uniform() < spec.minority_confusion) {
          const auto& other = lexicons[majority];
          word = other[rng.below(other.size())];
        }
        if (!text.empty()) text.push_back(' ');
        text += word;
      }
      LabeledSentence s;
      s.text = text;
      s.words = normalize_words(text);
      s.intent = c;
      corpus.sentences.push_back(std::move(s));
    }
  }
  return corpus;
}

inline LabeledCorpus generate_synthetic(int n_intents, int per_intent, int templates_per_intent,
                                        int lexicon_size, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_intents = n_intents;
  spec.per_intent = per_intent;
  spec.templates_per_intent = templates_per_intent;
  spec.lexicon_size = lexicon_size;
  spec.seed = seed;
  return generate_synthetic(spec);
}

}  // namespace rnn_dynamo
