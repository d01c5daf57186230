#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "enat/bleu.hpp"
#include "enat/corpus.hpp"
#include "enat/decoder_input.hpp"
#include "enat/inference.hpp"
#include "enat/ops.hpp"
#include "enat/optim.hpp"
#include "enat/transformer.hpp"

namespace enat {

struct TrainConfig {
  double mu = 0.1;       // sentence alignment weight
  double lambda = 1.0;   // word-level adversarial weight
  std::size_t epochs = 10;
  std::size_t max_tokens = 400;
  std::uint64_t seed = 1;
  LearningRateSchedule schedule{1e-3, 200};
  double discriminator_rate = 1e-3;
  std::size_t discriminator_steps = 1;
  DecoderInputMethod method = DecoderInputMethod::kCopy;
  double tau = 0.3;
  bool raw_kernel = false;
  double clip_norm = 5.0;
  std::size_t patience = 5;  // epochs without validation improvement before stopping

  void validate() const {
    if (mu < 0.0 || lambda < 0.0) throw ContractError("train config: mu and lambda must be >= 0");
    if (epochs == 0 || max_tokens == 0) throw ContractError("train config: epochs and max_tokens must be >= 1");
    if (!(tau > 0.0)) throw ContractError("train config: tau must be positive");
    if (!(clip_norm > 0.0)) throw ContractError("train config: clip_norm must be positive");
  }
};

using Logger = std::function<void(const std::string&)>;

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_metric = 0.0;  // token accuracy (teacher) or BLEU (student)
};

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

struct TeacherEvaluation {
  double loss = 0.0;
  double token_accuracy = 0.0;
};

/// Teacher-forced loss and next-token accuracy (including EOS) on `pairs`.
inline TeacherEvaluation evaluate_teacher(const Transformer& teacher, const std::vector<SentencePair>& pairs,
                                          std::size_t max_tokens = 2000) {
  NoGradGuard no_grad;
  TeacherEvaluation ev;
  std::size_t tokens = 0, correct = 0;
  double loss_sum = 0.0;
  for (const auto& batch : make_batches(pairs, max_tokens, 0)) {
    std::vector<TokenIds> tgt;
    for (std::size_t r = 0; r < batch.target.rows; ++r) tgt.push_back(batch.target.row(r));
    const auto shifted = shift_targets(tgt);
    const Tensor logits = teacher.at_forward(shifted.inputs, teacher.encode(batch.source));
    std::size_t n = 0;
    for (auto l : shifted.outputs.lengths) n += l;
    loss_sum += masked_nll(logits, shifted.outputs).item() * static_cast<double>(n);
    tokens += n;
    const std::size_t v = logits.dim(2), w = shifted.outputs.width;
    for (std::size_t r = 0; r < shifted.outputs.rows; ++r)
      for (std::size_t c = 0; c < shifted.outputs.lengths[r]; ++c) {
        const double* row = logits.values().data() + (r * w + c) * v;
        const auto best = static_cast<int>(std::max_element(row, row + v) - row);
        if (best == shifted.outputs.at(r, c)) ++correct;
      }
  }
  ev.loss = loss_sum / static_cast<double>(tokens);
  ev.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  return ev;
}

struct TeacherResult {
  Transformer model;
  std::vector<EpochStats> history;
  std::vector<double> step_losses;
};

/// Teacher-forced cross-entropy training; the parameters with the best
/// validation loss are kept.
inline TeacherResult train_teacher(const Vocabulary& vocab, const std::vector<SentencePair>& train,
                                   const std::vector<SentencePair>& valid, ModelConfig model_config,
                                   const TrainConfig& cfg, const Logger& log = {}) {
  if (train.empty()) throw IngestionError("train_teacher: empty corpus");
  cfg.validate();
  model_config.vocab_size = vocab.size();
  TeacherResult result{Transformer(model_config, DecoderKind::kAutoregressive, cfg.seed), {}, {}};
  auto params = result.model.parameters();
  OptimizerState opt;
  opt.schedule = cfg.schedule;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_values;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = make_batches(train, cfg.max_tokens, cfg.seed * 7919 + epoch);
    for (const auto& batch : batches) {
      std::vector<TokenIds> tgt;
      for (std::size_t r = 0; r < batch.target.rows; ++r) tgt.push_back(batch.target.row(r));
      const auto shifted = shift_targets(tgt);
      const Tensor loss = masked_nll(result.model.at_forward(shifted.inputs, result.model.encode(batch.source)),
                                     shifted.outputs);
      if (!std::isfinite(loss.item()))
        throw TrainingError("teacher loss diverged at step " + std::to_string(opt.step + 1));
      backward(loss);
      clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, opt);
      zero_grads(params);
      epoch_loss += loss.item();
      result.step_losses.push_back(loss.item());
    }
    const auto ev = evaluate_teacher(result.model, valid.empty() ? train : valid);
    result.history.push_back({epoch + 1, epoch_loss / static_cast<double>(batches.size()), ev.loss, ev.token_accuracy});
    if (log)
      log("teacher epoch " + std::to_string(epoch + 1) + " train_loss=" + std::to_string(result.history.back().train_loss) +
          " valid_loss=" + std::to_string(ev.loss) + " valid_acc=" + std::to_string(ev.token_accuracy));
    if (ev.loss < best) {
      best = ev.loss;
      best_values = snapshot_values(params);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  restore_values(params, best_values);
  return result;
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

struct DistilledCorpus {
  std::vector<SentencePair> pairs;     // source with teacher translation as target
  std::vector<TokenIds> originals;     // original references, same order
  std::size_t truncated = 0;           // decodes that hit the length limit
  std::size_t empty_fallbacks = 0;     // empty decodes replaced by the original reference
};

inline std::size_t distill_max_length(std::size_t source_length) { return 2 * source_length + 10; }

/// Replaces every target by the teacher's beam-search translation.
inline DistilledCorpus distill(const Transformer& teacher, const std::vector<SentencePair>& corpus,
                               std::size_t beam = 4) {
  DistilledCorpus out;
  out.pairs.reserve(corpus.size());
  for (const auto& p : corpus) {
    auto r = beam_search(teacher, p.source, beam, distill_max_length(p.source.size()));
    if (r.truncated) ++out.truncated;
    if (r.tokens.empty()) {
      ++out.empty_fallbacks;
      r.tokens = p.target;
    }
    out.pairs.push_back({p.source, std::move(r.tokens)});
    out.originals.push_back(p.target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

/// Per-step loss record. `total` is l_neg + mu * l_align + lambda * l_adv.
struct LossReport {
  std::size_t step = 0;
  double l_neg = 0.0;
  double l_align = 0.0;
  double l_adv = 0.0;   // word-level value seen by the mapping (generator) update
  double v_word = 0.0;  // word-level value seen by the discriminator update
  double total = 0.0;
};

inline Student make_student(const Vocabulary& vocab, ModelConfig model_config, DecoderInputMethod method,
                            std::optional<PhraseTable> lookup_table, double alpha, double tau, bool raw_kernel,
                            std::uint64_t seed) {
  model_config.vocab_size = vocab.size();
  Student s{Transformer(model_config, DecoderKind::kNonAutoregressive, seed),
            vocab,
            method,
            MappingGenerator::identity(model_config.d_model),
            Discriminator::create(model_config.d_model, model_config.d_model, seed + 17),
            std::move(lookup_table),
            tau,
            raw_kernel,
            alpha};
  if ((method == DecoderInputMethod::kPhrase || method == DecoderInputMethod::kWord) && !s.lookup_table)
    throw ConfigurationError("student: method '" + to_string(method) + "' needs a lookup table");
  return s;
}

/// Optimizer states for Theta (encoder, decoder, W) and for the discriminator.
struct NatOptimizers {
  OptimizerState main;
  OptimizerState discriminator;
};

namespace detail {

/// Turns requires_grad off for a parameter list for the guard's lifetime.
class FreezeGuard {
 public:
  explicit FreezeGuard(ParameterList params) : params_(std::move(params)) {
    for (auto& p : params_) {
      previous_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.set_requires_grad(previous_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParameterList params_;
  std::vector<bool> previous_;
};

inline void require_finite(double v, const char* component, std::size_t step) {
  if (!std::isfinite(v))
    throw TrainingError(std::string("non-finite ") + component + " at step " + std::to_string(step));
}

}  // namespace detail

/// One training step: `discriminator_steps` ascent updates of the
/// discriminator on V_word (everything else frozen), then one descent update
/// of Theta on L_neg + mu * L_align + lambda * L_adv with the discriminator
/// frozen. The alignment and adversarial terms reach the model only through
/// W; token embeddings enter them as constants.
inline LossReport gan_alternation_step(Student& student, const Batch& batch, const std::vector<TokenIds>* candidates,
                                       const TrainConfig& cfg, NatOptimizers& opt) {
  const bool embed = student.method == DecoderInputMethod::kEmbed;
  const bool adversarial = embed && cfg.lambda > 0.0;
  LossReport report;
  report.step = opt.main.step + 1;

  Tensor source_tokens, target_tokens;  // constants for the regularizers
  if (embed) {
    NoGradGuard no_grad;
    source_tokens = student.model.embed_tokens(batch.source);
    target_tokens = student.model.embed_tokens(batch.target);
  }

  if (adversarial) {
    auto d_params = student.discriminator.parameters();
    detail::FreezeGuard freeze_w(student.generator.parameters());
    const Tensor target_words = real_token_rows(target_tokens, batch.target.lengths);
    for (std::size_t k = 0; k < cfg.discriminator_steps; ++k) {
      const Tensor mapped_words = real_token_rows(map_embeddings(source_tokens, student.generator), batch.source.lengths);
      const Tensor value = adversarial_value(mapped_words, target_words, student.discriminator);
      report.v_word = value.item();
      detail::require_finite(report.v_word, "V_word", report.step);
      backward(scale(value, -1.0));
      clip_grad_norm(d_params, cfg.clip_norm);
      adam_step(d_params, opt.discriminator);
      zero_grads(d_params);
    }
  }

  auto params = student.main_parameters();
  detail::FreezeGuard freeze_d(student.discriminator.parameters());
  const auto res = student.resources();
  const EncoderState enc = student.model.encode(batch.source);
  const auto input = build_decoder_input(student.model, batch.source, student.method, batch.target.lengths, res, candidates);
  const Tensor logits = student.model.nat_forward(input.embeddings, batch.target.lengths, enc);
  Tensor total = masked_nll(logits, batch.target);
  report.l_neg = total.item();
  detail::require_finite(report.l_neg, "L_neg", report.step);
  if (embed) {
    const Tensor align = align_loss(sentence_embedding(source_tokens, batch.source.lengths),
                                    sentence_embedding(target_tokens, batch.target.lengths), student.generator);
    report.l_align = align.item();
    detail::require_finite(report.l_align, "L_align", report.step);
    if (cfg.mu > 0.0) total = add(total, scale(align, cfg.mu));
    if (adversarial) {
      const Tensor adv = adversarial_value(real_token_rows(map_embeddings(source_tokens, student.generator), batch.source.lengths),
                                           real_token_rows(target_tokens, batch.target.lengths), student.discriminator);
      report.l_adv = adv.item();
      detail::require_finite(report.l_adv, "L_adv", report.step);
      total = add(total, scale(adv, cfg.lambda));
    }
  }
  report.total = report.l_neg + cfg.mu * report.l_align + cfg.lambda * report.l_adv;
  backward(total);
  clip_grad_norm(params, cfg.clip_norm);
  adam_step(params, opt.main);
  zero_grads(params);
  return report;
}

struct NatTrainResult {
  std::vector<LossReport> losses;
  std::vector<EpochStats> history;
  double best_valid_bleu = 0.0;
};

using LossSink = std::function<void(const LossReport&)>;

/// Trains `student` on (distilled) pairs. Training-time target lengths are
/// the reference lengths. After each epoch the student is scored by B = 0
/// BLEU on `valid`; the best parameters are kept and training stops after
/// `cfg.patience` epochs without improvement.
inline NatTrainResult train_nat(Student& student, const std::vector<SentencePair>& train,
                                const std::vector<SentencePair>& valid, const TrainConfig& cfg,
                                const LossSink& sink = {}, const Logger& log = {}) {
  if (train.empty()) throw IngestionError("train_nat: empty corpus");
  cfg.validate();
  if (student.method != cfg.method) throw ConfigurationError("train_nat: student and config disagree on the method");
  NatTrainResult result;
  NatOptimizers opt;
  opt.main.schedule = cfg.schedule;
  opt.discriminator.schedule = {cfg.discriminator_rate, 0};

  std::vector<TokenIds> candidates;
  const bool lookup = student.method == DecoderInputMethod::kPhrase || student.method == DecoderInputMethod::kWord;
  if (lookup)
    for (const auto& p : train) candidates.push_back(student.candidate_tokens(p.source));

  const auto& eval_pairs = valid.empty() ? train : valid;
  std::vector<TokenIds> valid_sources;
  std::vector<Tokens> valid_refs;
  for (const auto& p : eval_pairs) {
    valid_sources.push_back(p.source);
    valid_refs.push_back(student.vocab.decode(p.target));
  }
  auto snapshot_params = [&] {
    auto p = student.model.parameters();
    p.push_back(student.generator.parameters().front());
    return p;
  };

  double best = -1.0;
  std::vector<std::vector<double>> best_values;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = make_batches(train, cfg.max_tokens, cfg.seed * 7919 + epoch);
    for (const auto& batch : batches) {
      std::vector<TokenIds> batch_cands;
      if (lookup)
        for (std::size_t i : batch.indices) batch_cands.push_back(candidates[i]);
      const auto report = gan_alternation_step(student, batch, lookup ? &batch_cands : nullptr, cfg, opt);
      epoch_loss += report.total;
      result.losses.push_back(report);
      if (sink) sink(report);
    }
    std::vector<Tokens> hyps;
    for (const auto& h : nat_decode_greedy(student, valid_sources)) hyps.push_back(student.vocab.decode(h));
    const double score = bleu(hyps, valid_refs);
    result.history.push_back({epoch + 1, epoch_loss / static_cast<double>(batches.size()), 0.0, score});
    if (log)
      log("student[" + to_string(student.method) + "] epoch " + std::to_string(epoch + 1) +
          " loss=" + std::to_string(result.history.back().train_loss) + " valid_bleu=" + std::to_string(score));
    if (score > best) {
      best = score;
      best_values = snapshot_values(snapshot_params());
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  auto params = snapshot_params();
  restore_values(params, best_values);
  result.best_valid_bleu = best;
  return result;
}

}  // namespace enat
