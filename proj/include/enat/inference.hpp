#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "enat/corpus.hpp"
#include "enat/decoder_input.hpp"
#include "enat/phrase_table.hpp"
#include "enat/transformer.hpp"

namespace enat {

/// Candidate target lengths around floor(alpha * T).
struct LengthWindow {
  double alpha = 1.0;
  std::size_t half_width = 0;  // B

  void validate() const {
    if (!(alpha > 0.0)) throw ContractError("length window: alpha must be positive");
  }
};

/// c = floor(alpha * T), lengths c-B .. c+B clamped below at 1, sorted and unique.
inline std::vector<std::size_t> predict_lengths(std::size_t candidate_length, const LengthWindow& window) {
  window.validate();
  if (candidate_length == 0) throw ContractError("predict_lengths: candidate length must be >= 1");
  // The epsilon keeps products like 1.1 * 10 = 11.000000000000002 or 10.999999999999998 on the right side.
  const auto center = static_cast<long>(
      std::floor(window.alpha * static_cast<double>(candidate_length) + 1e-9));
  const long b = static_cast<long>(window.half_width);
  std::set<std::size_t> lengths;
  for (long len = center - b; len <= center + b; ++len) lengths.insert(static_cast<std::size_t>(std::max(1L, len)));
  return {lengths.begin(), lengths.end()};
}

/// The non-autoregressive student with everything its decoder input needs.
struct Student {
  Transformer model;
  Vocabulary vocab;
  DecoderInputMethod method = DecoderInputMethod::kCopy;
  MappingGenerator generator;
  Discriminator discriminator;
  std::optional<PhraseTable> lookup_table;  // phrase table, or word table (L = 1)
  double tau = 0.3;
  bool raw_kernel = false;
  double alpha = 1.0;

  DecoderInputResources resources() const {
    DecoderInputResources r;
    r.vocab = &vocab;
    r.lookup_table = lookup_table ? &*lookup_table : nullptr;
    r.generator = &generator;
    r.tau = tau;
    r.raw_kernel = raw_kernel;
    return r;
  }

  /// Theta: encoder, decoder and (for the mapping method) W.
  ParameterList main_parameters() const {
    auto p = model.parameters();
    if (method == DecoderInputMethod::kEmbed) p.push_back(generator.parameters().front());
    return p;
  }

  /// Candidate tokens for the lookup methods (empty for copy/embed).
  TokenIds candidate_tokens(const TokenIds& source) const {
    if (method != DecoderInputMethod::kPhrase && method != DecoderInputMethod::kWord) return {};
    if (!lookup_table) throw ConfigurationError("student: lookup method without a table");
    return lookup_candidate(source, *lookup_table, vocab);
  }

  /// T_z~ used for length prediction; an all-skipped lookup falls back to T_x.
  std::size_t candidate_length(const TokenIds& source, const TokenIds& candidate) const {
    if (method == DecoderInputMethod::kPhrase || method == DecoderInputMethod::kWord)
      return candidate.empty() ? source.size() : candidate.size();
    return source.size();
  }
};

/// Argmax over content tokens at each of the first `lengths[b]` positions.
/// Also returns the mean max log-probability per row.
inline std::vector<std::pair<TokenIds, double>> argmax_decode(const Tensor& logits,
                                                              const std::vector<std::size_t>& lengths) {
  const std::size_t b = logits.dim(0), w = logits.dim(1), v = logits.dim(2);
  std::vector<std::pair<TokenIds, double>> out(b);
  const auto lv = logits.values();
  for (std::size_t r = 0; r < b; ++r) {
    double total = 0.0;
    for (std::size_t t = 0; t < lengths[r]; ++t) {
      const double* row = lv.data() + (r * w + t) * v;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, row[i]);
      double z = 0.0;
      for (std::size_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
      std::size_t best = Vocabulary::kReserved;
      for (std::size_t i = Vocabulary::kReserved; i < v; ++i)
        if (row[i] > row[best]) best = i;
      out[r].first.push_back(static_cast<int>(best));
      total += row[best] - mx - std::log(z);
    }
    out[r].second = lengths[r] ? total / static_cast<double>(lengths[r]) : 0.0;
  }
  return out;
}

struct Candidate {
  std::size_t length = 0;
  TokenIds tokens;
  double nat_score = 0.0;
  std::optional<double> teacher_score;
};

using CandidateSet = std::vector<Candidate>;

/// Index of the winning candidate: best teacher score (or NAT score when
/// unscored); ties go to the shorter, then lexicographically smaller one.
inline std::size_t select_best(const CandidateSet& set) {
  if (set.empty()) throw ContractError("select_best: empty candidate set");
  auto key = [](const Candidate& c) { return c.teacher_score ? *c.teacher_score : c.nat_score; };
  std::size_t best = 0;
  for (std::size_t i = 1; i < set.size(); ++i) {
    const auto& a = set[i];
    const auto& b = set[best];
    if (key(a) > key(b) || (key(a) == key(b) && (a.length < b.length || (a.length == b.length && a.tokens < b.tokens))))
      best = i;
  }
  return best;
}

struct LatencyReport {
  double wall_ms = 0.0;
  std::size_t decoder_passes = 0;
  double lookup_ms = 0.0;
  double rescoring_ms = 0.0;
  std::size_t output_length = 0;
};

struct Translation {
  TokenIds tokens;
  CandidateSet candidates;
  LatencyReport latency;
};

namespace detail {
using Clock = std::chrono::steady_clock;
inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace detail

/// Translates one sentence: one decoder pass per predicted length, then
/// teacher rescoring when the window has B >= 1.
inline Translation nat_translate(const Student& student, const TokenIds& source, const LengthWindow& window,
                                 const Transformer* teacher = nullptr) {
  if (window.half_width >= 1 && !teacher)
    throw ConfigurationError("nat_translate: a teacher is required for rescoring when B >= 1");
  NoGradGuard no_grad;
  const auto t0 = detail::Clock::now();
  const std::size_t passes_before = student.model.decoder_passes();
  Translation out;

  const auto t_lookup = detail::Clock::now();
  const TokenIds cand = student.candidate_tokens(source);
  out.latency.lookup_ms = detail::ms_since(t_lookup);

  const PaddedIds src = PaddedIds::from({source});
  const EncoderState enc = student.model.encode(src);
  const auto res = student.resources();
  const std::vector<TokenIds> cands{cand};
  for (std::size_t len : predict_lengths(student.candidate_length(source, cand), window)) {
    const auto input = build_decoder_input(student.model, src, student.method, {len}, res, &cands);
    const Tensor logits = student.model.nat_forward(input.embeddings, {len}, enc);
    auto decoded = argmax_decode(logits, {len});
    out.candidates.push_back({len, std::move(decoded[0].first), decoded[0].second, std::nullopt});
  }
  if (window.half_width >= 1) {
    const auto t_rescore = detail::Clock::now();
    std::vector<TokenIds> seqs;
    for (const auto& c : out.candidates) seqs.push_back(c.tokens);
    const auto scores = teacher_scores(*teacher, teacher->encode(src), seqs);
    for (std::size_t i = 0; i < scores.size(); ++i) out.candidates[i].teacher_score = scores[i];
    out.latency.rescoring_ms = detail::ms_since(t_rescore);
  }
  out.tokens = out.candidates[select_best(out.candidates)].tokens;
  out.latency.decoder_passes = student.model.decoder_passes() - passes_before;
  out.latency.output_length = out.tokens.size();
  out.latency.wall_ms = detail::ms_since(t0);
  return out;
}

/// B = 0 decoding of many sentences, `batch_size` sentences per decoder pass.
inline std::vector<TokenIds> nat_decode_greedy(const Student& student, const std::vector<TokenIds>& sources,
                                               std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  std::vector<TokenIds> out;
  out.reserve(sources.size());
  const auto res = student.resources();
  const LengthWindow window{student.alpha, 0};
  for (std::size_t start = 0; start < sources.size(); start += batch_size) {
    const std::size_t end = std::min(sources.size(), start + batch_size);
    std::vector<TokenIds> rows(sources.begin() + static_cast<long>(start), sources.begin() + static_cast<long>(end));
    std::vector<TokenIds> cands;
    std::vector<std::size_t> lengths;
    for (const auto& s : rows) {
      cands.push_back(student.candidate_tokens(s));
      lengths.push_back(predict_lengths(student.candidate_length(s, cands.back()), window).front());
    }
    const PaddedIds src = PaddedIds::from(rows);
    const EncoderState enc = student.model.encode(src);
    const auto input = build_decoder_input(student.model, src, student.method, lengths, res, &cands);
    const Tensor logits = student.model.nat_forward(input.embeddings, lengths, enc);
    for (auto& d : argmax_decode(logits, lengths)) out.push_back(std::move(d.first));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latency accounting
// ---------------------------------------------------------------------------

enum class LatencyMode { kAutoregressiveGreedy, kNatGreedy, kNatRescored };

inline std::string to_string(LatencyMode m) {
  switch (m) {
    case LatencyMode::kAutoregressiveGreedy: return "at-greedy";
    case LatencyMode::kNatGreedy: return "nat-b0";
    case LatencyMode::kNatRescored: return "nat-b4";
  }
  return "?";
}

/// Ordinary least squares fit y = a + b x with a two-sided 95% interval on b.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;

  bool ci_contains_zero() const { return ci_low <= 0.0 && 0.0 <= ci_high; }
};

inline SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw std::invalid_argument("fit_slope: need >= 3 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("fit_slope: x has no spread");
  SlopeFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.intercept + f.slope * x[i]);
    sse += r * r;
  }
  const double se = std::sqrt(sse / (n - 2.0) / sxx);
  const boost::math::students_t dist(n - 2.0);
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  f.ci_low = f.slope - t * se;
  f.ci_high = f.slope + t * se;
  return f;
}

struct LatencySummary {
  LatencyMode mode = LatencyMode::kNatGreedy;
  std::vector<LatencyReport> sentences;
  double mean_wall_ms = 0.0;
  double mean_decoder_passes = 0.0;
  double mean_lookup_ms = 0.0;
  double mean_rescoring_ms = 0.0;
  SlopeFit wall_vs_length;
};

/// Per-sentence latency at batch size 1 over `sources`, after
/// `warmup` untimed translations.
inline LatencySummary measure_latency(LatencyMode mode, const std::vector<TokenIds>& sources, const Student* student,
                                      const Transformer* teacher, std::size_t warmup = 5,
                                      std::size_t max_output = 256) {
  if (sources.empty()) throw std::invalid_argument("measure_latency: no sentences");
  if (mode != LatencyMode::kAutoregressiveGreedy && !student)
    throw ConfigurationError("measure_latency: NAT modes need a student");
  if (mode != LatencyMode::kNatGreedy && !teacher) throw ConfigurationError("measure_latency: mode needs a teacher");
  auto run = [&](const TokenIds& src) {
    if (mode == LatencyMode::kAutoregressiveGreedy) {
      const auto t0 = detail::Clock::now();
      const auto r = greedy_decode(*teacher, src, std::min(max_output, 2 * src.size() + 10));
      LatencyReport rep;
      rep.wall_ms = detail::ms_since(t0);
      rep.decoder_passes = r.decoder_passes;
      rep.output_length = r.tokens.size() + 1;  // including the end-of-sentence step
      return rep;
    }
    const LengthWindow w{student->alpha, mode == LatencyMode::kNatGreedy ? 0u : 4u};
    return nat_translate(*student, src, w, teacher).latency;
  };
  for (std::size_t i = 0; i < warmup; ++i) run(sources[i % sources.size()]);
  LatencySummary s;
  s.mode = mode;
  std::vector<double> x, y;
  for (const auto& src : sources) {
    s.sentences.push_back(run(src));
    const auto& r = s.sentences.back();
    s.mean_wall_ms += r.wall_ms;
    s.mean_decoder_passes += static_cast<double>(r.decoder_passes);
    s.mean_lookup_ms += r.lookup_ms;
    s.mean_rescoring_ms += r.rescoring_ms;
    x.push_back(static_cast<double>(r.output_length));
    y.push_back(r.wall_ms);
  }
  const double n = static_cast<double>(sources.size());
  s.mean_wall_ms /= n;
  s.mean_decoder_passes /= n;
  s.mean_lookup_ms /= n;
  s.mean_rescoring_ms /= n;
  if (sources.size() >= 3) {
    try {
      s.wall_vs_length = fit_slope(x, y);
    } catch (const std::invalid_argument&) {
      // all outputs had the same length; leave the fit at zero
    }
  }
  return s;
}

}  // namespace enat
