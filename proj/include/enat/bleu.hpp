#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "enat/corpus.hpp"

namespace enat {

/// Sufficient statistics for corpus BLEU-4.
struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < 4; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hypothesis_length += o.hypothesis_length;
    reference_length += o.reference_length;
    return *this;
  }

  /// Score in [0, 100]: geometric mean of clipped n-gram precisions times
  /// the brevity penalty. Any zero precision gives 0 (no smoothing).
  double score() const {
    if (hypothesis_length == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
      if (totals[n] == 0 || matches[n] == 0) return 0.0;
      log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
    }
    const double c = static_cast<double>(hypothesis_length);
    const double r = static_cast<double>(reference_length);
    const double log_bp = c < r ? 1.0 - r / c : 0.0;
    return 100.0 * std::exp(log_bp + log_sum / 4.0);
  }
};

namespace detail {

inline Tokens normalize_case(const Tokens& t, bool case_sensitive) {
  if (case_sensitive) return t;
  Tokens out = t;
  for (auto& w : out)
    for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

}  // namespace detail

inline BleuStats sentence_bleu_stats(const Tokens& hypothesis, const Tokens& reference, bool case_sensitive = true) {
  const Tokens hyp = detail::normalize_case(hypothesis, case_sensitive);
  const Tokens ref = detail::normalize_case(reference, case_sensitive);
  BleuStats s;
  s.hypothesis_length = hyp.size();
  s.reference_length = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<Tokens, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[Tokens(ref.begin() + static_cast<long>(i), ref.begin() + static_cast<long>(i + n))];
    std::map<Tokens, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i)
      ++hyp_counts[Tokens(hyp.begin() + static_cast<long>(i), hyp.begin() + static_cast<long>(i + n))];
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      s.matches[n - 1] += std::min(c, it == ref_counts.end() ? std::size_t{0} : it->second);
      s.totals[n - 1] += c;
    }
  }
  return s;
}

/// Corpus-level BLEU-4 (single reference per sentence) in [0, 100].
inline double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                   bool case_sensitive = true) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    total += sentence_bleu_stats(hypotheses[i], references[i], case_sensitive);
  return total.score();
}

struct BucketScore {
  std::size_t lower = 0;                 // inclusive reference length
  std::optional<std::size_t> upper;      // exclusive; none for the last bucket
  std::size_t count = 0;
  std::optional<double> bleu;            // absent when the bucket is empty
};

/// Corpus BLEU restricted to reference-length buckets. `edges` are strictly
/// increasing cut points: buckets are [0, e0), [e0, e1), ..., [e_last, inf).
inline std::vector<BucketScore> bleu_by_length_bucket(const std::vector<Tokens>& hypotheses,
                                                      const std::vector<Tokens>& references,
                                                      const std::vector<std::size_t>& edges,
                                                      bool case_sensitive = true) {
  if (hypotheses.size() != references.size()) throw std::invalid_argument("bleu_by_length_bucket: size mismatch");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw std::invalid_argument("bleu_by_length_bucket: edges must increase");
  std::vector<BucketScore> buckets(edges.size() + 1);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    buckets[b].lower = b == 0 ? 0 : edges[b - 1];
    if (b < edges.size()) buckets[b].upper = edges[b];
  }
  std::vector<BleuStats> stats(buckets.size());
  for (std::size_t i = 0; i < references.size(); ++i) {
    const std::size_t len = references[i].size();
    const std::size_t b =
        static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), len) - edges.begin());
    stats[b] += sentence_bleu_stats(hypotheses[i], references[i], case_sensitive);
    ++buckets[b].count;
  }
  for (std::size_t b = 0; b < buckets.size(); ++b)
    if (buckets[b].count > 0) buckets[b].bleu = stats[b].score();
  return buckets;
}

}  // namespace enat
