#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "enat/corpus.hpp"
#include "enat/ops.hpp"
#include "enat/optim.hpp"
#include "enat/tensor.hpp"

namespace enat {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t num_layers = 2;
  std::size_t d_model = 64;
  std::size_t num_heads = 2;
  std::size_t d_ff = 128;
  double dropout = 0.0;
  std::size_t max_positions = 256;

  void validate() const {
    if (vocab_size < Vocabulary::kReserved) throw ContractError("model config: vocab_size too small");
    if (num_layers == 0 || d_model == 0 || num_heads == 0 || d_ff == 0 || max_positions == 0)
      throw ContractError("model config: sizes must be positive");
    if (d_model % num_heads != 0) throw ContractError("model config: d_model not divisible by num_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("model config: dropout outside [0,1)");
  }
};

enum class DecoderKind { kAutoregressive, kNonAutoregressive };

/// Top-layer encoder output plus the source padding information.
struct EncoderState {
  Tensor hidden;  // [B, Tx, d]
  std::vector<std::size_t> lengths;

  std::size_t batch() const { return hidden.dim(0); }
  std::size_t width() const { return hidden.dim(1); }

  /// Row `r` repeated `n` times (values only, no gradient history).
  EncoderState repeat_row(std::size_t r, std::size_t n) const {
    const std::size_t t = width(), d = hidden.dim(2);
    std::vector<double> vals;
    vals.reserve(n * t * d);
    const auto src = hidden.values().subspan(r * t * d, t * d);
    for (std::size_t i = 0; i < n; ++i) vals.insert(vals.end(), src.begin(), src.end());
    return {Tensor(Shape{n, t, d}, std::move(vals)), std::vector<std::size_t>(n, lengths[r])};
  }
};

/// Receives attention weights ([B, H, Tq, Tk]) with the name of the site.
using AttentionObserver = std::function<void(std::string_view site, const Tensor& weights)>;

class Transformer {
 public:
  struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
    Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  };
  struct Norm {
    Tensor gain, bias;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5); }
  };
  struct Attention {
    Linear query, key, value, output;
  };
  struct FeedForward {
    Linear hidden, output;
  };
  struct EncoderLayer {
    Norm self_norm, ffn_norm;
    Attention self_attention;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Norm self_norm, positional_norm, cross_norm, ffn_norm;
    Attention self_attention, positional_attention, cross_attention;
    FeedForward ffn;
  };

  Transformer(ModelConfig config, DecoderKind kind, std::uint64_t seed)
      : config_(config), kind_(kind), rng_(seed ^ 0x5DEECE66DULL) {
    config_.validate();
    std::mt19937_64 init(seed);
    const std::size_t d = config_.d_model;
    std::normal_distribution<double> emb(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    embedding_ = Tensor(Shape{config_.vocab_size, d}, 0.0, true);
    for (double& v : embedding_.mutable_values()) v = emb(init);
    for (std::size_t i = 0; i < d; ++i) embedding_.mutable_values()[i] = 0.0;  // <pad>

    positions_ = Tensor(Shape{config_.max_positions, d}, 0.0, true);
    auto pos = positions_.mutable_values();
    for (std::size_t p = 0; p < config_.max_positions; ++p)
      for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        pos[p * d + i] = std::sin(static_cast<double>(p) * freq);
        if (i + 1 < d) pos[p * d + i + 1] = std::cos(static_cast<double>(p) * freq);
      }

    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      EncoderLayer e;
      e.self_norm = make_norm();
      e.ffn_norm = make_norm();
      e.self_attention = make_attention(init);
      e.ffn = {make_linear(d, config_.d_ff, init), make_linear(config_.d_ff, d, init)};
      encoder_.push_back(std::move(e));

      DecoderLayer dl;
      dl.self_norm = make_norm();
      dl.cross_norm = make_norm();
      dl.ffn_norm = make_norm();
      dl.self_attention = make_attention(init);
      dl.cross_attention = make_attention(init);
      if (kind_ == DecoderKind::kNonAutoregressive) {
        dl.positional_norm = make_norm();
        dl.positional_attention = make_attention(init);
      }
      dl.ffn = {make_linear(d, config_.d_ff, init), make_linear(config_.d_ff, d, init)};
      decoder_.push_back(std::move(dl));
    }
    encoder_final_ = make_norm();
    decoder_final_ = make_norm();
  }

  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  const ModelConfig& config() const { return config_; }
  DecoderKind kind() const { return kind_; }
  const Tensor& embedding_table() const { return embedding_; }
  const Tensor& position_table() const { return positions_; }

  /// All trainable tensors with stable checkpoint names.
  ParameterList parameters() const {
    ParameterList out;
    out.push_back({"embedding", embedding_});
    out.push_back({"positions", positions_});
    auto add_linear = [&](const std::string& n, const Linear& l) {
      out.push_back({n + ".weight", l.weight});
      out.push_back({n + ".bias", l.bias});
    };
    auto add_norm = [&](const std::string& n, const Norm& l) {
      out.push_back({n + ".gain", l.gain});
      out.push_back({n + ".bias", l.bias});
    };
    auto add_attention = [&](const std::string& n, const Attention& a) {
      add_linear(n + ".query", a.query);
      add_linear(n + ".key", a.key);
      add_linear(n + ".value", a.value);
      add_linear(n + ".output", a.output);
    };
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      add_norm(p + ".self_norm", encoder_[l].self_norm);
      add_attention(p + ".self_attention", encoder_[l].self_attention);
      add_norm(p + ".ffn_norm", encoder_[l].ffn_norm);
      add_linear(p + ".ffn.hidden", encoder_[l].ffn.hidden);
      add_linear(p + ".ffn.output", encoder_[l].ffn.output);
    }
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      add_norm(p + ".self_norm", decoder_[l].self_norm);
      add_attention(p + ".self_attention", decoder_[l].self_attention);
      if (kind_ == DecoderKind::kNonAutoregressive) {
        add_norm(p + ".positional_norm", decoder_[l].positional_norm);
        add_attention(p + ".positional_attention", decoder_[l].positional_attention);
      }
      add_norm(p + ".cross_norm", decoder_[l].cross_norm);
      add_attention(p + ".cross_attention", decoder_[l].cross_attention);
      add_norm(p + ".ffn_norm", decoder_[l].ffn_norm);
      add_linear(p + ".ffn.hidden", decoder_[l].ffn.hidden);
      add_linear(p + ".ffn.output", decoder_[l].ffn.output);
    }
    add_norm("encoder.final_norm", encoder_final_);
    add_norm("decoder.final_norm", decoder_final_);
    return out;
  }

  void set_attention_observer(AttentionObserver observer) { observer_ = std::move(observer); }

  /// Decoder forward passes executed so far (AT and NAT alike).
  std::size_t decoder_passes() const { return decoder_passes_; }
  void reset_decoder_passes() { decoder_passes_ = 0; }

  /// e(token) for a padded batch: embedding row scaled by sqrt(d). [B, T, d]
  Tensor embed_tokens(const PaddedIds& ids) const {
    check_ids(ids);
    return scale(embedding(embedding_, ids.ids, Shape{ids.rows, ids.width}),
                 std::sqrt(static_cast<double>(config_.d_model)));
  }

  /// Scale applied to embedding rows to form token inputs.
  double embedding_scale() const { return std::sqrt(static_cast<double>(config_.d_model)); }

  EncoderState encode(const PaddedIds& source) const {
    check_width(source.width);
    Tensor x = add(embed_tokens(source), positions_for(source.width));
    x = dropout(x, config_.dropout, rng_);
    const auto keep = key_mask(source.rows, source.width, source.width, source.lengths, false);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      const auto& layer = encoder_[l];
      Tensor h = layer.self_norm(x);
      x = add(x, dropout(attend(layer.self_attention, h, h, h, keep, "encoder.self"), config_.dropout, rng_));
      x = add(x, dropout(feed_forward(layer.ffn, layer.ffn_norm(x)), config_.dropout, rng_));
    }
    return {encoder_final_(x), source.lengths};
  }

  /// Teacher-forced autoregressive decoder. `inputs` holds BOS-shifted
  /// targets; position t only sees inputs[0..t]. Returns logits [B, T, V].
  Tensor at_forward(const PaddedIds& inputs, const EncoderState& enc) const {
    if (kind_ != DecoderKind::kAutoregressive)
      throw ContractError("at_forward: model has a non-autoregressive decoder");
    check_width(inputs.width);
    ++decoder_passes_;
    Tensor x = add(embed_tokens(inputs), positions_for(inputs.width));
    const auto self_keep = key_mask(inputs.rows, inputs.width, inputs.width, inputs.lengths, true);
    return decode(dropout(x, config_.dropout, rng_), self_keep, inputs.width, inputs.lengths, enc);
  }

  /// Non-autoregressive decoder over given input embeddings [B, T, d];
  /// every position is produced in this single pass. Returns logits [B, T, V].
  Tensor nat_forward(const Tensor& decoder_input, const std::vector<std::size_t>& lengths,
                     const EncoderState& enc) const {
    if (kind_ != DecoderKind::kNonAutoregressive)
      throw ContractError("nat_forward: model has an autoregressive decoder");
    if (decoder_input.rank() != 3 || decoder_input.dim(2) != config_.d_model ||
        decoder_input.dim(0) != lengths.size() || decoder_input.dim(0) != enc.batch())
      throw ShapeError("nat_forward: decoder input must be [B, T, d], got " + to_string(decoder_input.shape()));
    const std::size_t width = decoder_input.dim(1);
    check_width(width);
    ++decoder_passes_;
    Tensor x = add(decoder_input, positions_for(width));
    const auto self_keep = key_mask(lengths.size(), width, width, lengths, false);
    return decode(dropout(x, config_.dropout, rng_), self_keep, width, lengths, enc);
  }

 private:
  static Norm make_norm_static(std::size_t d) {
    return {Tensor(Shape{d}, 1.0, true), Tensor(Shape{d}, 0.0, true)};
  }
  Norm make_norm() const { return make_norm_static(config_.d_model); }

  static Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Linear l{Tensor(Shape{in, out}, 0.0, true), Tensor(Shape{out}, 0.0, true)};
    for (double& v : l.weight.mutable_values()) v = u(rng);
    return l;
  }

  Attention make_attention(std::mt19937_64& rng) const {
    const std::size_t d = config_.d_model;
    return {make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng)};
  }

  void check_ids(const PaddedIds& ids) const {
    for (int id : ids.ids)
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config_.vocab_size));
  }

  void check_width(std::size_t width) const {
    if (width > config_.max_positions)
      throw ContractError("sequence of " + std::to_string(width) + " positions exceeds max_positions " +
                          std::to_string(config_.max_positions));
  }

  /// Positional rows 0..width-1 as [width, d]; broadcast over the batch by `add`.
  Tensor positions_for(std::size_t width) const {
    std::vector<int> idx(width);
    for (std::size_t i = 0; i < width; ++i) idx[i] = static_cast<int>(i);
    return gather_rows(positions_, idx);
  }

  /// keep[b, q, k] = key k is a real token (and k <= q when causal).
  static std::vector<std::uint8_t> key_mask(std::size_t batch, std::size_t tq, std::size_t tk,
                                            const std::vector<std::size_t>& key_lengths, bool causal) {
    std::vector<std::uint8_t> keep(batch * tq * tk, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < tq; ++q)
        for (std::size_t k = 0; k < tk; ++k)
          keep[(b * tq + q) * tk + k] = (k < key_lengths[b] && (!causal || k <= q)) ? 1 : 0;
    return keep;
  }

  Tensor split_heads(const Tensor& x) const {
    const std::size_t b = x.dim(0), t = x.dim(1), h = config_.num_heads;
    return swap_axes_12(reshape(x, Shape{b, t, h, config_.d_model / h}));
  }

  Tensor merge_heads(const Tensor& x) const {
    const std::size_t b = x.dim(0), t = x.dim(2);
    return reshape(swap_axes_12(x), Shape{b, t, config_.d_model});
  }

  Tensor attend(const Attention& a, const Tensor& query_in, const Tensor& key_in, const Tensor& value_in,
                const std::vector<std::uint8_t>& keep, std::string_view site) const {
    const double inv = 1.0 / std::sqrt(static_cast<double>(config_.d_model / config_.num_heads));
    Tensor q = split_heads(a.query(query_in));
    Tensor k = split_heads(a.key(key_in));
    Tensor v = split_heads(a.value(value_in));
    Tensor weights = masked_softmax(scale(matmul_nt(q, k), inv), keep);
    if (observer_) observer_(site, weights);
    weights = dropout(weights, config_.dropout, rng_);
    return a.output(merge_heads(matmul(weights, v)));
  }

  Tensor feed_forward(const FeedForward& f, const Tensor& x) const {
    return f.output(dropout(relu(f.hidden(x)), config_.dropout, rng_));
  }

  Tensor decode(Tensor x, const std::vector<std::uint8_t>& self_keep, std::size_t width,
                const std::vector<std::size_t>& lengths, const EncoderState& enc) const {
    const std::size_t batch = lengths.size();
    const auto cross_keep = key_mask(batch, width, enc.width(), enc.lengths, false);
    Tensor pos;
    if (kind_ == DecoderKind::kNonAutoregressive) {
      std::vector<int> idx(batch * width);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < width; ++i) idx[b * width + i] = static_cast<int>(i);
      pos = embedding(positions_, idx, Shape{batch, width});
    }
    for (const auto& layer : decoder_) {
      Tensor h = layer.self_norm(x);
      x = add(x, dropout(attend(layer.self_attention, h, h, h, self_keep, "decoder.self"), config_.dropout, rng_));
      if (kind_ == DecoderKind::kNonAutoregressive) {
        // Queries and keys are positions; values are the current hidden states.
        h = layer.positional_norm(x);
        x = add(x, dropout(attend(layer.positional_attention, pos, pos, h, self_keep, "decoder.positional"),
                           config_.dropout, rng_));
      }
      h = layer.cross_norm(x);
      x = add(x, dropout(attend(layer.cross_attention, h, enc.hidden, enc.hidden, cross_keep, "decoder.cross"),
                         config_.dropout, rng_));
      x = add(x, dropout(feed_forward(layer.ffn, layer.ffn_norm(x)), config_.dropout, rng_));
    }
    return matmul_nt(decoder_final_(x), embedding_);
  }

  ModelConfig config_;
  DecoderKind kind_;
  Tensor embedding_;
  Tensor positions_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Norm encoder_final_;
  Norm decoder_final_;
  AttentionObserver observer_;
  mutable std::size_t decoder_passes_ = 0;
  mutable std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Losses and sequence helpers
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under `logits` [B, T, V],
/// counting only real (non-PAD) target positions.
inline Tensor masked_nll(const Tensor& logits, const PaddedIds& targets) {
  if (logits.rank() != 3 || logits.dim(0) != targets.rows || logits.dim(1) != targets.width)
    throw ShapeError("masked_nll: logits " + to_string(logits.shape()) + " vs targets " +
                     std::to_string(targets.rows) + "x" + std::to_string(targets.width));
  const std::size_t n = targets.rows * targets.width;
  Tensor logp = pick(log_softmax(reshape(logits, Shape{n, logits.dim(2)})), targets.ids);
  std::vector<double> weights(n, 0.0);
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.rows; ++r) count += targets.lengths[r];
  if (count == 0) throw ContractError("masked_nll: no target tokens");
  for (std::size_t r = 0; r < targets.rows; ++r)
    for (std::size_t c = 0; c < targets.lengths[r]; ++c)
      weights[r * targets.width + c] = -1.0 / static_cast<double>(count);
  return weighted_sum(logp, weights);
}

/// Teacher-forcing pair: inputs are BOS + y, outputs are y + EOS.
struct ShiftedTargets {
  PaddedIds inputs;
  PaddedIds outputs;
};

inline ShiftedTargets shift_targets(const std::vector<TokenIds>& targets) {
  std::vector<TokenIds> in, out;
  for (const auto& t : targets) {
    TokenIds i{Vocabulary::kBos};
    i.insert(i.end(), t.begin(), t.end());
    TokenIds o(t.begin(), t.end());
    o.push_back(Vocabulary::kEos);
    in.push_back(std::move(i));
    out.push_back(std::move(o));
  }
  return {PaddedIds::from(in), PaddedIds::from(out)};
}

/// Tokens the decoders may emit: EOS and every non-reserved id.
inline bool is_generatable(int id) { return id == Vocabulary::kEos || id >= Vocabulary::kReserved; }

/// Average per-token log-probability of each candidate (followed by EOS)
/// under the autoregressive model, all candidates in one teacher-forced pass.
inline std::vector<double> teacher_scores(const Transformer& teacher, const EncoderState& single_source,
                                          const std::vector<TokenIds>& candidates) {
  NoGradGuard no_grad;
  const auto shifted = shift_targets(candidates);
  const auto enc = single_source.repeat_row(0, candidates.size());
  const Tensor logits = teacher.at_forward(shifted.inputs, enc);
  const Tensor logp = log_softmax(logits);
  const std::size_t v = logits.dim(2), w = shifted.outputs.width;
  std::vector<double> scores(candidates.size(), 0.0);
  for (std::size_t r = 0; r < candidates.size(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < shifted.outputs.lengths[r]; ++c)
      total += logp[(r * w + c) * v + static_cast<std::size_t>(shifted.outputs.at(r, c))];
    scores[r] = total / static_cast<double>(shifted.outputs.lengths[r]);
  }
  return scores;
}

struct DecodeResult {
  TokenIds tokens;          // without BOS/EOS
  double score = 0.0;       // average log-probability over tokens + EOS
  bool truncated = false;   // EOS was forced at max_len
  std::size_t decoder_passes = 0;
};

/// Stepwise argmax decoding with the autoregressive model.
inline DecodeResult greedy_decode(const Transformer& teacher, const TokenIds& source, std::size_t max_len) {
  NoGradGuard no_grad;
  const std::size_t passes_before = teacher.decoder_passes();
  const auto enc = teacher.encode(PaddedIds::from({source}));
  DecodeResult r;
  double total = 0.0;
  while (true) {
    TokenIds in{Vocabulary::kBos};
    in.insert(in.end(), r.tokens.begin(), r.tokens.end());
    const Tensor logits = teacher.at_forward(PaddedIds::from({in}), enc);
    const Tensor logp = log_softmax(logits);
    const std::size_t v = logits.dim(2);
    const auto last = logp.values().subspan((in.size() - 1) * v, v);
    if (r.tokens.size() >= max_len) {
      total += last[Vocabulary::kEos];
      r.truncated = true;
      break;
    }
    int best = -1;
    for (std::size_t i = 0; i < v; ++i)
      if (is_generatable(static_cast<int>(i)) && (best < 0 || last[i] > last[static_cast<std::size_t>(best)]))
        best = static_cast<int>(i);
    total += last[static_cast<std::size_t>(best)];
    if (best == Vocabulary::kEos) break;
    r.tokens.push_back(best);
  }
  r.score = total / static_cast<double>(r.tokens.size() + 1);
  r.decoder_passes = teacher.decoder_passes() - passes_before;
  return r;
}

/// Length-normalized beam search. Each step keeps the `beam_size` best
/// expansions by cumulative log-probability; expansions ending in EOS
/// retire to the finished set. Search stops when no live hypothesis can
/// still beat the best finished one: log-probabilities are non-positive, so
/// a live hypothesis with cumulative log-probability L can reach at most
/// L / (max_len + 1). At `max_len` tokens EOS is forced. The result is the
/// finished hypothesis with the best average log-probability (ties: shorter,
/// then lexicographically smaller).
inline DecodeResult beam_search(const Transformer& teacher, const TokenIds& source, std::size_t beam_size,
                                std::size_t max_len) {
  if (beam_size == 0) throw ContractError("beam_search: beam_size must be >= 1");
  NoGradGuard no_grad;
  const std::size_t passes_before = teacher.decoder_passes();
  const auto enc1 = teacher.encode(PaddedIds::from({source}));

  struct Hyp {
    TokenIds tokens;
    double logp = 0.0;
  };
  struct Finished {
    TokenIds tokens;
    double logp;
    bool truncated;
    double normalized() const { return logp / static_cast<double>(tokens.size() + 1); }
  };
  std::vector<Hyp> live{Hyp{}};
  std::vector<Finished> finished;

  for (std::size_t step = 0;; ++step) {
    std::vector<TokenIds> inputs;
    for (const auto& h : live) {
      TokenIds in{Vocabulary::kBos};
      in.insert(in.end(), h.tokens.begin(), h.tokens.end());
      inputs.push_back(std::move(in));
    }
    const auto enc = enc1.repeat_row(0, live.size());
    const Tensor logp = log_softmax(teacher.at_forward(PaddedIds::from(inputs), enc));
    const std::size_t v = logp.dim(2), w = logp.dim(1);
    auto row = [&](std::size_t h) { return logp.values().subspan((h * w + step) * v, v); };

    if (step == max_len) {
      for (std::size_t h = 0; h < live.size(); ++h)
        finished.push_back({live[h].tokens, live[h].logp + row(h)[Vocabulary::kEos], true});
      break;
    }
    struct Expansion {
      double score;
      std::size_t hyp;
      int token;
    };
    std::vector<Expansion> expansions;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = row(h);
      for (std::size_t t = 0; t < v; ++t)
        if (is_generatable(static_cast<int>(t)))
          expansions.push_back({live[h].logp + lp[t], h, static_cast<int>(t)});
    }
    const std::size_t keep = std::min(beam_size, expansions.size());
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<long>(keep), expansions.end(),
                      [](const Expansion& a, const Expansion& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& e = expansions[i];
      if (e.token == Vocabulary::kEos) {
        finished.push_back({live[e.hyp].tokens, e.score, false});
      } else {
        Hyp h{live[e.hyp].tokens, e.score};
        h.tokens.push_back(e.token);
        next.push_back(std::move(h));
      }
    }
    if (next.empty()) break;
    if (!finished.empty()) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.normalized());
      double reachable = -std::numeric_limits<double>::infinity();
      for (const auto& h : next) reachable = std::max(reachable, h.logp / static_cast<double>(max_len + 1));
      if (best_finished >= reachable) break;
    }
    live = std::move(next);
  }

  const Finished* best = nullptr;
  for (const auto& f : finished) {
    if (!best || f.normalized() > best->normalized() ||
        (f.normalized() == best->normalized() &&
         (f.tokens.size() < best->tokens.size() ||
          (f.tokens.size() == best->tokens.size() && f.tokens < best->tokens))))
      best = &f;
  }
  DecodeResult r{best->tokens, best->normalized(), best->truncated, teacher.decoder_passes() - passes_before};
  return r;
}

/// Copies parameter values (for best-model snapshots).
inline std::vector<std::vector<double>> snapshot_values(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

inline void restore_values(ParameterList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(values[i].begin(), values[i].end(), params[i].tensor.mutable_values().begin());
}

}  // namespace enat
