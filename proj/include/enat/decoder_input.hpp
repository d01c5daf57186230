#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "enat/corpus.hpp"
#include "enat/ops.hpp"
#include "enat/phrase_table.hpp"
#include "enat/transformer.hpp"

namespace enat {

/// Gaussian length-mapping weights between a candidate of `source_len`
/// positions and an output of `target_len` positions, as a
/// [target_len x source_len] row-major matrix.
///
/// With 1-based positions, candidate i is centred at j'(i) = i * T_y / T_z
/// and w_ij = exp(-(j - j'(i))^2 / tau). When `normalize` is set each
/// output row is divided by its sum, so every output is a convex
/// combination of the candidate embeddings.
inline std::vector<double> length_kernel(std::size_t source_len, std::size_t target_len, double tau,
                                         bool normalize = true) {
  if (source_len == 0 || target_len == 0) throw ContractError("length_kernel: lengths must be >= 1");
  if (!(tau > 0.0)) throw ContractError("length_kernel: tau must be positive");
  std::vector<double> w(target_len * source_len);
  const double ratio = static_cast<double>(target_len) / static_cast<double>(source_len);
  for (std::size_t j = 1; j <= target_len; ++j) {
    double row_sum = 0.0;
    for (std::size_t i = 1; i <= source_len; ++i) {
      const double center = static_cast<double>(i) * ratio;
      const double diff = static_cast<double>(j) - center;
      const double v = std::exp(-diff * diff / tau);
      w[(j - 1) * source_len + (i - 1)] = v;
      row_sum += v;
    }
    if (normalize) {
      if (row_sum == 0.0) {
        // Row far from every centre (tiny tau): fall back to the nearest candidate.
        std::size_t nearest = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 1; i <= source_len; ++i) {
          const double dist = std::abs(static_cast<double>(j) - static_cast<double>(i) * ratio);
          if (dist < best) {
            best = dist;
            nearest = i;
          }
        }
        w[(j - 1) * source_len + (nearest - 1)] = 1.0;
      } else {
        for (std::size_t i = 0; i < source_len; ++i) w[(j - 1) * source_len + i] /= row_sum;
      }
    }
  }
  return w;
}

struct LengthMapped {
  Tensor embeddings;               // [B, target_width, d]
  bool empty_candidate = false;    // some row had no candidate tokens; its output is zero
};

/// Batched soft length mapping: row b maps its first `candidate_lengths[b]`
/// candidate embeddings onto `target_lengths[b]` output positions. Positions
/// beyond a row's target length are zero. Differentiable in `candidates`.
inline LengthMapped soft_length_map(const Tensor& candidates, const std::vector<std::size_t>& candidate_lengths,
                                    const std::vector<std::size_t>& target_lengths, std::size_t target_width,
                                    double tau, bool normalize = true) {
  if (candidates.rank() != 3) throw ShapeError("soft_length_map: candidates must be [B, T, d]");
  const std::size_t batch = candidates.dim(0), width = candidates.dim(1);
  if (candidate_lengths.size() != batch || target_lengths.size() != batch)
    throw ShapeError("soft_length_map: length vectors must have one entry per row");
  std::vector<double> kernel(batch * target_width * width, 0.0);
  LengthMapped out;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t tz = candidate_lengths[b], ty = target_lengths[b];
    if (ty == 0 || ty > target_width) throw ContractError("soft_length_map: target length out of range");
    if (tz > width) throw ContractError("soft_length_map: candidate length exceeds width");
    if (tz == 0) {
      out.empty_candidate = true;
      continue;
    }
    const auto w = length_kernel(tz, ty, tau, normalize);
    for (std::size_t j = 0; j < ty; ++j)
      for (std::size_t i = 0; i < tz; ++i) kernel[(b * target_width + j) * width + i] = w[j * tz + i];
  }
  out.embeddings = matmul(Tensor(Shape{batch, target_width, width}, std::move(kernel)), candidates);
  return out;
}

/// Single-sequence form: [T_z, d] -> [T_y, d].
inline Tensor soft_length_map(const Tensor& candidate, std::size_t target_len, double tau, bool normalize = true) {
  if (candidate.rank() != 2) throw ShapeError("soft_length_map: candidate must be [T, d]");
  const std::size_t tz = candidate.dim(0), d = candidate.dim(1);
  auto mapped = soft_length_map(reshape(candidate, Shape{1, tz, d}), {tz}, {target_len}, target_len, tau, normalize);
  return reshape(mapped.embeddings, Shape{target_len, d});
}

/// Linear map W (d x d) from source-side to target-side embedding space.
struct MappingGenerator {
  Tensor weight;

  static MappingGenerator identity(std::size_t d) {
    Tensor w(Shape{d, d}, 0.0, true);
    for (std::size_t i = 0; i < d; ++i) w.mutable_values()[i * d + i] = 1.0;
    return {w};
  }

  ParameterList parameters() const { return {{"mapping.weight", weight}}; }
};

/// E_z~ = E_x W, row by row.
inline Tensor map_embeddings(const Tensor& source_embeddings, const MappingGenerator& generator) {
  if (source_embeddings.shape().back() != generator.weight.dim(0))
    throw ShapeError("map_embeddings: embedding width " + std::to_string(source_embeddings.shape().back()) +
                     " vs mapping " + to_string(generator.weight.shape()));
  return matmul(source_embeddings, generator.weight);
}

/// Two-layer perceptron d -> h -> 1 scoring "is a real target embedding".
struct Discriminator {
  Tensor hidden_weight, hidden_bias, output_weight, output_bias;

  static Discriminator create(std::size_t d, std::size_t hidden, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::size_t in, std::size_t out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-limit, limit);
      Tensor t(Shape{in, out}, 0.0, true);
      for (double& v : t.mutable_values()) v = u(rng);
      return t;
    };
    return {uniform(d, hidden), Tensor(Shape{hidden}, 0.0, true), uniform(hidden, 1), Tensor(Shape{1}, 0.0, true)};
  }

  /// Pre-sigmoid scores for rows of x: [N, d] -> [N, 1].
  Tensor logits(const Tensor& x) const {
    return add(matmul(relu(add(matmul(x, hidden_weight), hidden_bias)), output_weight), output_bias);
  }

  /// f_D(x) in (0, 1).
  Tensor probability(const Tensor& x) const { return sigmoid(logits(x)); }

  ParameterList parameters() const {
    return {{"discriminator.hidden.weight", hidden_weight},
            {"discriminator.hidden.bias", hidden_bias},
            {"discriminator.output.weight", output_weight},
            {"discriminator.output.bias", output_bias}};
  }
};

/// Mean of token embeddings over real positions: [B, T, d] -> [B, d].
inline Tensor sentence_embedding(const Tensor& token_embeddings, const std::vector<std::size_t>& lengths) {
  const std::size_t b = token_embeddings.dim(0), t = token_embeddings.dim(1), d = token_embeddings.dim(2);
  std::vector<double> w(b * t, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < lengths[r]; ++c) w[r * t + c] = 1.0 / static_cast<double>(lengths[r]);
  return reshape(matmul(Tensor(Shape{b, 1, t}, std::move(w)), token_embeddings), Shape{b, d});
}

/// Batch mean of ||e(x) W - e(y)||_2 over sentence embeddings [B, d].
inline Tensor align_loss(const Tensor& source_sentence, const Tensor& target_sentence,
                         const MappingGenerator& generator) {
  if (source_sentence.shape() != target_sentence.shape())
    throw ShapeError("align_loss: sentence embedding shapes differ");
  return mean(l2_norm(sub(map_embeddings(source_sentence, generator), target_sentence)));
}

/// Word-level value: mean log f_D(target) + mean log(1 - f_D(mapped)).
/// The discriminator ascends it, the mapping descends it.
inline Tensor adversarial_value(const Tensor& mapped_words, const Tensor& target_words,
                                const Discriminator& discriminator) {
  return add(mean(log_sigmoid(discriminator.logits(target_words))),
             mean(log_sigmoid(scale(discriminator.logits(mapped_words), -1.0))));
}

/// Rows of a [B, T, d] tensor at real positions, stacked into [N, d].
inline Tensor real_token_rows(const Tensor& x, const std::vector<std::size_t>& lengths) {
  const std::size_t t = x.dim(1), d = x.dim(2);
  std::vector<int> idx;
  for (std::size_t r = 0; r < lengths.size(); ++r)
    for (std::size_t c = 0; c < lengths[r]; ++c) idx.push_back(static_cast<int>(r * t + c));
  return gather_rows(reshape(x, Shape{x.dim(0) * t, d}), idx);
}

// ---------------------------------------------------------------------------
// Decoder input construction
// ---------------------------------------------------------------------------

enum class DecoderInputMethod { kCopy, kPhrase, kWord, kEmbed };

inline std::string to_string(DecoderInputMethod m) {
  switch (m) {
    case DecoderInputMethod::kCopy: return "copy";
    case DecoderInputMethod::kPhrase: return "phrase";
    case DecoderInputMethod::kWord: return "word";
    case DecoderInputMethod::kEmbed: return "embed";
  }
  return "?";
}

inline DecoderInputMethod parse_decoder_input_method(const std::string& s) {
  if (s == "copy") return DecoderInputMethod::kCopy;
  if (s == "phrase") return DecoderInputMethod::kPhrase;
  if (s == "word") return DecoderInputMethod::kWord;
  if (s == "embed") return DecoderInputMethod::kEmbed;
  throw std::invalid_argument("unknown decoder input method '" + s + "' (copy, phrase, word, embed)");
}

/// Raised when the resources for a decoder-input method are missing.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a decoder-input method may need besides the model.
struct DecoderInputResources {
  const Vocabulary* vocab = nullptr;
  const PhraseTable* lookup_table = nullptr;  // phrase table, or word table as L = 1 table
  const MappingGenerator* generator = nullptr;
  double tau = 0.3;
  bool raw_kernel = false;
};

/// Token ids of the lookup translation of one source sentence; unknown
/// source tokens and untranslatable spans are skipped.
inline TokenIds lookup_candidate(const TokenIds& source, const PhraseTable& table, const Vocabulary& vocab) {
  Tokens words;
  words.reserve(source.size());
  for (int id : source) words.push_back(vocab.token(id));
  TokenIds out;
  for (const auto& t : greedy_lookup(words, table)) out.push_back(vocab.id(t));
  return out;
}

struct DecoderInput {
  Tensor embeddings;                          // [B, T_y width, d]
  std::vector<std::size_t> candidate_lengths; // T_z~ per row
  Tensor source_tokens;                       // e(x) for the batch [B, Tx, d]
  bool empty_candidate = false;
};

inline std::size_t max_length(const std::vector<std::size_t>& v) {
  std::size_t m = 0;
  for (std::size_t x : v) m = std::max(m, x);
  return m;
}

/// Builds z for each row of `source` with the chosen method.
///
/// `candidates` optionally supplies precomputed lookup tokens (one per row)
/// for the lookup methods.
inline DecoderInput build_decoder_input(const Transformer& model, const PaddedIds& source, DecoderInputMethod method,
                                        const std::vector<std::size_t>& target_lengths,
                                        const DecoderInputResources& res,
                                        const std::vector<TokenIds>* candidates = nullptr) {
  if (target_lengths.size() != source.rows) throw ShapeError("build_decoder_input: one target length per row");
  DecoderInput out;
  out.source_tokens = model.embed_tokens(source);
  const std::size_t target_width = max_length(target_lengths);
  Tensor candidate;
  switch (method) {
    case DecoderInputMethod::kCopy:
      candidate = out.source_tokens;
      out.candidate_lengths = source.lengths;
      break;
    case DecoderInputMethod::kEmbed:
      if (!res.generator) throw ConfigurationError("decoder input 'embed' needs a mapping generator");
      candidate = map_embeddings(out.source_tokens, *res.generator);
      out.candidate_lengths = source.lengths;
      break;
    case DecoderInputMethod::kPhrase:
    case DecoderInputMethod::kWord: {
      if (!res.lookup_table || !res.vocab)
        throw ConfigurationError("decoder input '" + to_string(method) + "' needs a lookup table and vocabulary");
      std::vector<TokenIds> looked;
      if (candidates) {
        if (candidates->size() != source.rows) throw ShapeError("build_decoder_input: candidate count mismatch");
        looked = *candidates;
      } else {
        for (std::size_t r = 0; r < source.rows; ++r)
          looked.push_back(lookup_candidate(source.row(r), *res.lookup_table, *res.vocab));
      }
      const auto padded = PaddedIds::from(looked, 1);
      candidate = model.embed_tokens(padded);
      out.candidate_lengths = padded.lengths;
      break;
    }
  }
  auto mapped = soft_length_map(candidate, out.candidate_lengths, target_lengths, target_width, res.tau,
                                !res.raw_kernel);
  out.embeddings = mapped.embeddings;
  out.empty_candidate = mapped.empty_candidate;
  return out;
}

}  // namespace enat
