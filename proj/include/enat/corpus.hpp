#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace enat {

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Tokens = std::vector<std::string>;
using TokenIds = std::vector<int>;

struct TextPair {
  Tokens source;
  Tokens target;

  bool operator==(const TextPair&) const = default;
};

using TextCorpus = std::vector<TextPair>;

inline Tokens split_tokens(std::string_view line) {
  Tokens out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

inline std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

/// Joint source/target vocabulary. Ids 0..3 are reserved.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (int i = 0; i < kReserved; ++i) index_[tokens_[static_cast<std::size_t>(i)]] = i;
  }

  /// Builds from an explicit token list (reserved tokens first, in order).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    if (tokens.size() < kReserved) throw IngestionError("vocabulary: fewer than 4 tokens");
    for (int i = 0; i < kReserved; ++i)
      if (tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)])
        throw IngestionError("vocabulary: reserved token mismatch at id " + std::to_string(i));
    for (std::size_t i = kReserved; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  int add(const std::string& token) {
    auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("vocabulary: id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenIds encode(const Tokens& tokens) const {
    TokenIds out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  Tokens decode(const TokenIds& ids) const {
    Tokens out;
    for (int i : ids)
      if (i >= kReserved || i == kUnk) out.push_back(token(i));
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  static Vocabulary deserialize(const std::string& text) {
    std::vector<std::string> toks;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) toks.push_back(line);
    return from_tokens(toks);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Joint vocabulary over both sides of `corpus`; tokens seen fewer than
/// `min_count` times map to <unk>. Content tokens are sorted.
inline Vocabulary build_vocab(const TextCorpus& corpus, std::size_t min_count = 1) {
  if (corpus.empty()) throw IngestionError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& p : corpus) {
    for (const auto& t : p.source) ++counts[t];
    for (const auto& t : p.target) ++counts[t];
  }
  Vocabulary v;
  for (const auto& [tok, c] : counts)
    if (c >= min_count && !v.contains(tok)) v.add(tok);
  return v;
}

struct SentencePair {
  TokenIds source;
  TokenIds target;

  bool operator==(const SentencePair&) const = default;
};

inline std::vector<SentencePair> encode_corpus(const TextCorpus& corpus, const Vocabulary& vocab) {
  std::vector<SentencePair> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) {
    if (p.source.empty() || p.target.empty()) throw IngestionError("encode_corpus: empty sentence");
    out.push_back({vocab.encode(p.source), vocab.encode(p.target)});
  }
  return out;
}

/// Mean over pairs of target length / source length.
inline double length_ratio_alpha(const TextCorpus& corpus) {
  if (corpus.empty()) throw IngestionError("length_ratio_alpha: empty corpus");
  double total = 0.0;
  for (const auto& p : corpus) {
    if (p.source.empty()) throw IngestionError("length_ratio_alpha: empty source sentence");
    total += static_cast<double>(p.target.size()) / static_cast<double>(p.source.size());
  }
  return total / static_cast<double>(corpus.size());
}

/// Row-major padded id matrix with per-row lengths.
struct PaddedIds {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  int at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }

  /// 1 on real tokens, 0 on padding.
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(rows * width, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < lengths[r]; ++c) m[r * width + c] = 1;
    return m;
  }

  TokenIds row(std::size_t r) const {
    return TokenIds(ids.begin() + static_cast<long>(r * width),
                    ids.begin() + static_cast<long>(r * width + lengths[r]));
  }

  /// Pads `seqs` with <pad> to `min_width` or the longest sequence, whichever is larger.
  static PaddedIds from(const std::vector<TokenIds>& seqs, std::size_t min_width = 0) {
    PaddedIds p;
    p.rows = seqs.size();
    p.width = min_width;
    for (const auto& s : seqs) p.width = std::max(p.width, s.size());
    p.ids.assign(p.rows * p.width, Vocabulary::kPad);
    for (std::size_t r = 0; r < p.rows; ++r) {
      std::copy(seqs[r].begin(), seqs[r].end(), p.ids.begin() + static_cast<long>(r * p.width));
      p.lengths.push_back(seqs[r].size());
    }
    return p;
  }
};

struct Batch {
  PaddedIds source;
  PaddedIds target;
  std::vector<std::size_t> indices;  // positions in the originating corpus
};

inline Batch make_batch(const std::vector<SentencePair>& pairs, const std::vector<std::size_t>& indices,
                        std::size_t min_width = 0) {
  std::vector<TokenIds> src, tgt;
  for (std::size_t i : indices) {
    src.push_back(pairs[i].source);
    tgt.push_back(pairs[i].target);
  }
  return {PaddedIds::from(src, min_width), PaddedIds::from(tgt, min_width), indices};
}

/// Length-bucketed batches whose padded token count (rows x longest side)
/// stays within `max_tokens`. Within-bucket order and batch order are
/// shuffled from `seed`; every pair appears exactly once.
inline std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t max_tokens,
                                       std::uint64_t seed) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t len = std::max(pairs[i].source.size(), pairs[i].target.size());
    if (len > max_tokens) {
      throw IngestionError("make_batches: pair " + std::to_string(i) + " has " + std::to_string(len) +
                           " tokens, over the budget of " + std::to_string(max_tokens));
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::max(pairs[a].source.size(), pairs[a].target.size()) <
           std::max(pairs[b].source.size(), pairs[b].target.size());
  });
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  std::size_t width = 0;
  for (std::size_t i : order) {
    const std::size_t len = std::max(pairs[i].source.size(), pairs[i].target.size());
    const std::size_t new_width = std::max(width, len);
    if (!current.empty() && new_width * (current.size() + 1) > max_tokens) {
      groups.push_back(std::move(current));
      current.clear();
      width = 0;
    }
    current.push_back(i);
    width = std::max(width, len);
  }
  if (!current.empty()) groups.push_back(std::move(current));
  std::shuffle(groups.begin(), groups.end(), rng);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(pairs, g));
  return batches;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// One "source<TAB>target" pair per line. Blank lines are skipped.
inline TextCorpus read_tsv_corpus(const std::string& path) {
  TextCorpus corpus;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos)
      throw IngestionError(path + ":" + std::to_string(i + 1) + ": missing TAB separator");
    TextPair p{split_tokens(std::string_view(lines[i]).substr(0, tab)),
               split_tokens(std::string_view(lines[i]).substr(tab + 1))};
    if (p.source.empty() || p.target.empty())
      throw IngestionError(path + ":" + std::to_string(i + 1) + ": empty side");
    corpus.push_back(std::move(p));
  }
  if (corpus.empty()) throw IngestionError("corpus '" + path + "' is empty");
  return corpus;
}

/// Two line-aligned files, one sentence per line.
inline TextCorpus read_parallel_corpus(const std::string& source_path, const std::string& target_path) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size())
    throw IngestionError("parallel corpus: " + std::to_string(src.size()) + " source lines vs " +
                         std::to_string(tgt.size()) + " target lines");
  TextCorpus corpus;
  for (std::size_t i = 0; i < src.size(); ++i) {
    TextPair p{split_tokens(src[i]), split_tokens(tgt[i])};
    if (p.source.empty() && p.target.empty()) continue;
    if (p.source.empty() || p.target.empty())
      throw IngestionError("parallel corpus: line " + std::to_string(i + 1) + " has an empty side");
    corpus.push_back(std::move(p));
  }
  if (corpus.empty()) throw IngestionError("parallel corpus is empty");
  return corpus;
}

inline void write_tsv_corpus(const std::string& path, const TextCorpus& corpus) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IngestionError("cannot write '" + path + "'");
  for (const auto& p : corpus) os << join_tokens(p.source) << '\t' << join_tokens(p.target) << '\n';
}

}  // namespace enat
