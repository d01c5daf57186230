#pragma once

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "enat/corpus.hpp"

namespace enat {

/// A malformed line in a phrase-table file.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct PhraseCandidate {
  Tokens target;
  double probability = 0.0;
};

/// Source phrases mapped to target phrases, best candidate first.
///
/// Candidates are ordered by descending probability; ties are broken by
/// the lexicographic order of the target phrase.
class PhraseTable {
 public:
  /// Adds (or updates) one entry. Re-adding an existing source/target pair
  /// keeps the larger probability.
  void add(const Tokens& source, const Tokens& target, double probability) {
    if (source.empty() || target.empty()) throw std::invalid_argument("phrase table: empty phrase");
    if (!(probability > 0.0 && probability <= 1.0))
      throw std::invalid_argument("phrase table: probability outside (0,1]");
    auto& cands = entries_[source];
    auto it = std::find_if(cands.begin(), cands.end(), [&](const auto& c) { return c.target == target; });
    if (it != cands.end()) {
      it->probability = std::max(it->probability, probability);
    } else {
      cands.push_back({target, probability});
    }
    std::sort(cands.begin(), cands.end(), [](const PhraseCandidate& a, const PhraseCandidate& b) {
      if (a.probability != b.probability) return a.probability > b.probability;
      return a.target < b.target;
    });
    max_source_length_ = std::max(max_source_length_, source.size());
  }

  /// Candidates for a source phrase, or nullptr.
  const std::vector<PhraseCandidate>* find(std::span<const std::string> source) const {
    if (source.empty() || source.size() > max_source_length_) return nullptr;
    auto it = entries_.find(Tokens(source.begin(), source.end()));
    return it == entries_.end() ? nullptr : &it->second;
  }

  /// Longest source phrase present (0 for an empty table).
  std::size_t max_source_length() const { return max_source_length_; }
  std::size_t source_phrase_count() const { return entries_.size(); }
  std::size_t entry_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : entries_) n += v.size();
    return n;
  }
  bool empty() const { return entries_.empty(); }

  const std::map<Tokens, std::vector<PhraseCandidate>>& entries() const { return entries_; }

  bool operator==(const PhraseTable& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [k, v] : entries_) {
      auto it = other.entries_.find(k);
      if (it == other.entries_.end() || it->second.size() != v.size()) return false;
      for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i].target != it->second[i].target || v[i].probability != it->second[i].probability)
          return false;
    }
    return true;
  }

 private:
  std::map<Tokens, std::vector<PhraseCandidate>> entries_;
  std::size_t max_source_length_ = 0;
};

// ---------------------------------------------------------------------------
// IBM Model 1
// ---------------------------------------------------------------------------

inline const std::string kNullToken = "<null>";

/// Lexical translation table t(target | source) with a NULL source word.
struct AlignmentModel {
  std::unordered_map<std::string, std::unordered_map<std::string, double>> table;
  /// Corpus log-likelihood before the first and after every EM iteration.
  std::vector<double> log_likelihood;

  double prob(const std::string& target, const std::string& source) const {
    auto it = table.find(source);
    if (it == table.end()) return 0.0;
    auto jt = it->second.find(target);
    return jt == it->second.end() ? 0.0 : jt->second;
  }

  /// Most probable target for `source`; ties go to the smaller token.
  std::optional<std::string> best_target(const std::string& source) const {
    auto it = table.find(source);
    if (it == table.end() || it->second.empty()) return std::nullopt;
    const std::pair<const std::string, double>* best = nullptr;
    for (const auto& kv : it->second)
      if (!best || kv.second > best->second || (kv.second == best->second && kv.first < best->first))
        best = &kv;
    return best->first;
  }
};

namespace detail {

inline double ibm1_log_likelihood(const TextCorpus& corpus, const AlignmentModel& m) {
  double ll = 0.0;
  for (const auto& p : corpus) {
    const double norm = 1.0 / static_cast<double>(p.source.size() + 1);
    for (const auto& y : p.target) {
      double s = m.prob(y, kNullToken);
      for (const auto& x : p.source) s += m.prob(y, x);
      ll += std::log(s * norm);
    }
  }
  return ll;
}

}  // namespace detail

/// IBM Model 1 EM for t(target | source). Distributions start uniform over
/// the co-occurring targets of each source word.
inline AlignmentModel train_ibm1(const TextCorpus& corpus, std::size_t iterations) {
  if (corpus.empty()) throw IngestionError("train_ibm1: empty corpus");
  if (iterations == 0) throw std::invalid_argument("train_ibm1: iterations must be >= 1");
  AlignmentModel model;
  for (const auto& p : corpus)
    for (const auto& y : p.target) {
      model.table[kNullToken][y] = 1.0;
      for (const auto& x : p.source) model.table[x][y] = 1.0;
    }
  for (auto& [x, row] : model.table)
    for (auto& [y, t] : row) t = 1.0 / static_cast<double>(row.size());

  model.log_likelihood.push_back(detail::ibm1_log_likelihood(corpus, model));
  for (std::size_t it = 0; it < iterations; ++it) {
    std::unordered_map<std::string, std::unordered_map<std::string, double>> counts;
    for (const auto& p : corpus) {
      for (const auto& y : p.target) {
        double denom = model.prob(y, kNullToken);
        for (const auto& x : p.source) denom += model.prob(y, x);
        counts[kNullToken][y] += model.prob(y, kNullToken) / denom;
        for (const auto& x : p.source) counts[x][y] += model.prob(y, x) / denom;
      }
    }
    for (auto& [x, row] : counts) {
      double total = 0.0;
      for (const auto& [y, c] : row) total += c;
      auto& dst = model.table[x];
      for (auto& [y, t] : dst) t = 0.0;
      for (const auto& [y, c] : row) dst[y] = c / total;
    }
    model.log_likelihood.push_back(detail::ibm1_log_likelihood(corpus, model));
  }
  return model;
}

/// Swaps source and target sides (for the reverse-direction model).
inline TextCorpus reverse_corpus(const TextCorpus& corpus) {
  TextCorpus out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back({p.target, p.source});
  return out;
}

/// Intersection of the two directional Viterbi alignments, as (src, tgt) links.
/// Equal-probability choices (repeated words) go to the position nearest
/// the diagonal.
inline std::vector<std::pair<std::size_t, std::size_t>> symmetric_alignment(const TextPair& pair,
                                                                            const AlignmentModel& fwd,
                                                                            const AlignmentModel& rev) {
  const double n = static_cast<double>(pair.source.size()), m = static_cast<double>(pair.target.size());
  const auto off_diagonal = [&](std::size_t i, std::size_t j) {
    return std::abs((static_cast<double>(i) + 0.5) / n - (static_cast<double>(j) + 0.5) / m);
  };
  std::vector<long> tgt_to_src(pair.target.size(), -1);
  for (std::size_t j = 0; j < pair.target.size(); ++j) {
    double best = fwd.prob(pair.target[j], kNullToken);
    for (std::size_t i = 0; i < pair.source.size(); ++i) {
      const double p = fwd.prob(pair.target[j], pair.source[i]);
      const long cur = tgt_to_src[j];
      if (p > best || (p == best && cur >= 0 && off_diagonal(i, j) < off_diagonal(static_cast<std::size_t>(cur), j))) {
        best = p;
        tgt_to_src[j] = static_cast<long>(i);
      }
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> links;
  for (std::size_t i = 0; i < pair.source.size(); ++i) {
    double best = rev.prob(pair.source[i], kNullToken);
    long arg = -1;
    for (std::size_t j = 0; j < pair.target.size(); ++j) {
      const double p = rev.prob(pair.source[i], pair.target[j]);
      if (p > best || (p == best && arg >= 0 && off_diagonal(i, j) < off_diagonal(i, static_cast<std::size_t>(arg)))) {
        best = p;
        arg = static_cast<long>(j);
      }
    }
    if (arg >= 0 && tgt_to_src[static_cast<std::size_t>(arg)] == static_cast<long>(i))
      links.emplace_back(i, static_cast<std::size_t>(arg));
  }
  return links;
}

/// Alignment-consistent phrase pairs up to `max_length` tokens per side,
/// scored by relative frequency p(target | source).
inline PhraseTable extract_phrases(const TextCorpus& corpus, const AlignmentModel& fwd,
                                   const AlignmentModel& rev, std::size_t max_length) {
  if (corpus.empty()) throw IngestionError("extract_phrases: empty corpus");
  if (max_length == 0) throw std::invalid_argument("extract_phrases: max_length must be >= 1");
  std::map<Tokens, std::map<Tokens, std::size_t>> counts;
  for (const auto& pair : corpus) {
    const auto links = symmetric_alignment(pair, fwd, rev);
    const std::size_t n = pair.source.size(), m = pair.target.size();
    std::vector<bool> tgt_aligned(m, false);
    for (const auto& [i, j] : links) tgt_aligned[j] = true;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t e = s; e < n && e - s + 1 <= max_length; ++e) {
        std::size_t tmin = m, tmax = 0;
        for (const auto& [i, j] : links)
          if (i >= s && i <= e) {
            tmin = std::min(tmin, j);
            tmax = std::max(tmax, j);
          }
        if (tmin == m) continue;  // no links from this source span
        bool consistent = true;
        for (const auto& [i, j] : links)
          if (j >= tmin && j <= tmax && (i < s || i > e)) consistent = false;
        if (!consistent) continue;
        // Extend over unaligned target words at the span edges.
        for (std::size_t lo = tmin + 1; lo-- > 0;) {
          if (lo < tmin && tgt_aligned[lo]) break;
          for (std::size_t hi = tmax; hi < m; ++hi) {
            if (hi > tmax && tgt_aligned[hi]) break;
            if (hi - lo + 1 > max_length) break;
            Tokens src(pair.source.begin() + static_cast<long>(s), pair.source.begin() + static_cast<long>(e + 1));
            Tokens tgt(pair.target.begin() + static_cast<long>(lo), pair.target.begin() + static_cast<long>(hi + 1));
            ++counts[src][tgt];
          }
          if (lo == 0) break;
        }
      }
    }
  }
  PhraseTable table;
  for (const auto& [src, tgts] : counts) {
    std::size_t total = 0;
    for (const auto& [t, c] : tgts) total += c;
    for (const auto& [t, c] : tgts)
      table.add(src, t, static_cast<double>(c) / static_cast<double>(total));
  }
  return table;
}

/// IBM-1 in both directions, intersection alignment, phrase extraction.
inline PhraseTable build_phrase_table(const TextCorpus& corpus, std::size_t max_length = 3,
                                      std::size_t ibm_iterations = 10) {
  const auto fwd = train_ibm1(corpus, ibm_iterations);
  const auto rev = train_ibm1(reverse_corpus(corpus), ibm_iterations);
  return extract_phrases(corpus, fwd, rev, max_length);
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

/// Reads all lines of a plain or gzip-compressed file.
inline std::vector<std::string> read_maybe_gzip_lines(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string current;
  char buf[1 << 14];
  while (gzgets(f, buf, sizeof(buf)) != nullptr) {
    current += buf;
    if (!current.empty() && current.back() == '\n') {
      current.pop_back();
      if (!current.empty() && current.back() == '\r') current.pop_back();
      lines.push_back(std::move(current));
      current.clear();
    }
  }
  int err = 0;
  gzerror(f, &err);
  gzclose(f);
  if (err != Z_OK && err != Z_STREAM_END) throw std::runtime_error("read error in '" + path + "'");
  if (!current.empty()) lines.push_back(std::move(current));
  return lines;
}

}  // namespace detail

/// Reads a Moses phrase table ("src ||| tgt ||| scores ..."), plain or gzip.
/// `score_column` selects the probability kept; 2 is the direct phrase
/// translation probability in the standard five-score layout.
inline PhraseTable parse_moses_table(const std::string& path, std::size_t score_column = 2) {
  PhraseTable table;
  const auto lines = detail::read_maybe_gzip_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    std::string_view line = lines[n];
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto fields = detail::split_fields(line, "|||");
    if (fields.size() < 3) throw ParseError(path, n + 1, "expected at least 3 '|||' fields");
    const Tokens src = split_tokens(fields[0]);
    const Tokens tgt = split_tokens(fields[1]);
    if (src.empty() || tgt.empty()) throw ParseError(path, n + 1, "empty phrase");
    const Tokens scores = split_tokens(fields[2]);
    if (score_column >= scores.size())
      throw ParseError(path, n + 1, "score column " + std::to_string(score_column) + " missing");
    const auto p = detail::parse_double(scores[score_column]);
    if (!p) throw ParseError(path, n + 1, "unparseable score '" + scores[score_column] + "'");
    if (!(*p > 0.0 && *p <= 1.0)) throw ParseError(path, n + 1, "probability outside (0,1]");
    table.add(src, tgt, *p);
  }
  return table;
}

/// Native format: "src phrase<TAB>tgt phrase<TAB>prob", sorted.
inline void write_native_table(std::ostream& os, const PhraseTable& table) {
  char buf[64];
  for (const auto& [src, cands] : table.entries()) {
    for (const auto& c : cands) {
      std::snprintf(buf, sizeof(buf), "%.17g", c.probability);
      os << join_tokens(src) << '\t' << join_tokens(c.target) << '\t' << buf << '\n';
    }
  }
}

inline void write_native_table(const std::string& path, const PhraseTable& table) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  write_native_table(os, table);
}

inline PhraseTable read_native_table(std::istream& is, const std::string& name = "<stream>") {
  PhraseTable table;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_fields(line, "\t");
    if (fields.size() != 3) throw ParseError(name, n, "expected 3 TAB-separated fields");
    const auto p = detail::parse_double(fields[2]);
    if (!p) throw ParseError(name, n, "unparseable probability");
    const Tokens src = split_tokens(fields[0]);
    const Tokens tgt = split_tokens(fields[1]);
    if (src.empty() || tgt.empty()) throw ParseError(name, n, "empty phrase");
    if (!(*p > 0.0 && *p <= 1.0)) throw ParseError(name, n, "probability outside (0,1]");
    table.add(src, tgt, *p);
  }
  return table;
}

inline PhraseTable read_native_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_native_table(is, path);
}

inline std::string serialize_table(const PhraseTable& table) {
  std::ostringstream os;
  write_native_table(os, table);
  return os.str();
}

inline PhraseTable deserialize_table(const std::string& text) {
  std::istringstream is(text);
  return read_native_table(is);
}

// ---------------------------------------------------------------------------
// Lookup
// ---------------------------------------------------------------------------

/// Greedy left-to-right segmentation: at each position try the longest
/// span first (down to one token), emit the best target phrase of the
/// first span found and continue after it. Positions where no span has a
/// translation are skipped.
inline Tokens greedy_lookup(std::span<const std::string> sentence, const PhraseTable& table) {
  Tokens out;
  const std::size_t max_len = table.max_source_length();
  std::size_t i = 0;
  while (i < sentence.size()) {
    std::size_t matched = 0;
    for (std::size_t len = std::min(max_len, sentence.size() - i); len >= 1; --len) {
      if (const auto* cands = table.find(sentence.subspan(i, len))) {
        const auto& best = cands->front().target;
        out.insert(out.end(), best.begin(), best.end());
        matched = len;
        break;
      }
    }
    i += matched ? matched : 1;
  }
  return out;
}

/// Single-token restriction of a phrase table.
struct WordTable {
  std::map<std::string, PhraseCandidate> entries;

  /// The same content as a phrase table with L = 1 (for greedy_lookup).
  PhraseTable as_phrase_table() const {
    PhraseTable t;
    for (const auto& [src, c] : entries) t.add({src}, c.target, c.probability);
    return t;
  }
};

/// Best single-token target for every single-token source phrase.
inline WordTable extract_word_table(const PhraseTable& table) {
  WordTable words;
  for (const auto& [src, cands] : table.entries()) {
    if (src.size() != 1) continue;
    for (const auto& c : cands) {
      if (c.target.size() == 1) {
        words.entries.emplace(src.front(), c);
        break;  // candidates are already in preference order
      }
    }
  }
  return words;
}

}  // namespace enat
