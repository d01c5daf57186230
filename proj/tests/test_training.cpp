#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "enat/phrase_table.hpp"
#include "enat/toy_corpus.hpp"
#include "enat/training.hpp"

using namespace enat;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 1;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_ff = 32;
  c.max_positions = 64;
  return c;
}

struct Data {
  ToySplits splits;
  Vocabulary vocab;
  std::vector<SentencePair> train, valid, test;
};

Data make_data(std::size_t pairs, std::size_t max_len, std::uint64_t seed) {
  Data d;
  d.splits = generate_toy_splits({pairs, 3, max_len, true, seed, 1}, 100, 100);
  d.vocab = build_vocab(d.splits.train);
  d.train = encode_corpus(d.splits.train, d.vocab);
  d.valid = encode_corpus(d.splits.valid, d.vocab);
  d.test = encode_corpus(d.splits.test, d.vocab);
  return d;
}

Batch single_batch(const std::vector<SentencePair>& pairs) {
  auto batches = make_batches(pairs, 100000, 1);
  return batches.front();
}

bool all_finite_equal(const ParameterList& a, const ParameterList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].tensor.size(); ++k)
      if (a[i].tensor[k] != b[i].tensor[k]) return false;
  return true;
}

std::vector<std::vector<double>> values_of(const ParameterList& p) { return snapshot_values(p); }

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.mu, 0.1);
  EXPECT_DOUBLE_EQ(c.lambda, 1.0);
  EXPECT_EQ(c.discriminator_steps, 1u);
  EXPECT_NO_THROW(c.validate());
  c.mu = -0.1;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ContractError);
}

// ---------------------------------------------------------------------------
// Student steps
// ---------------------------------------------------------------------------

class StudentStep : public ::testing::Test {
 protected:
  void SetUp() override {
    data = make_data(120, 6, 3);
    batch = single_batch({data.train.begin(), data.train.begin() + 12});
  }
  Student embed_student(std::uint64_t seed = 5) {
    return make_student(data.vocab, small_model(), DecoderInputMethod::kEmbed, std::nullopt, 1.0, 0.3, false, seed);
  }
  TrainConfig embed_config() {
    TrainConfig c;
    c.method = DecoderInputMethod::kEmbed;
    c.schedule = {1e-3, 0};
    return c;
  }
  Data data;
  Batch batch;
};

TEST_F(StudentStep, ReportMatchesIndependentRecomputation) {
  Student s = embed_student();
  const auto cfg = embed_config();
  NatOptimizers opt;
  opt.main.schedule = cfg.schedule;
  opt.discriminator.schedule = {cfg.discriminator_rate, 0};
  double v_word = 0.0, l_neg = 0.0, l_align = 0.0;
  {
    NoGradGuard g;
    const Tensor src = s.model.embed_tokens(batch.source), tgt = s.model.embed_tokens(batch.target);
    v_word = adversarial_value(real_token_rows(map_embeddings(src, s.generator), batch.source.lengths),
                               real_token_rows(tgt, batch.target.lengths), s.discriminator)
                 .item();
    const auto in = build_decoder_input(s.model, batch.source, s.method, batch.target.lengths, s.resources());
    l_neg = masked_nll(s.model.nat_forward(in.embeddings, batch.target.lengths, s.model.encode(batch.source)),
                       batch.target)
                .item();
    l_align = align_loss(sentence_embedding(src, batch.source.lengths), sentence_embedding(tgt, batch.target.lengths),
                         s.generator)
                  .item();
  }
  const auto r = gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(r.step, 1u);
  EXPECT_NEAR(r.v_word, v_word, 1e-12);
  EXPECT_NEAR(r.l_neg, l_neg, 1e-12);
  EXPECT_NEAR(r.l_align, l_align, 1e-12);
  EXPECT_NEAR(r.total, r.l_neg + cfg.mu * r.l_align + cfg.lambda * r.l_adv, 1e-9);
  EXPECT_LE(r.l_adv, 0.0);
}

TEST_F(StudentStep, DiscriminatorAscendsAndLeavesThetaUntouched) {
  Student s = embed_student();
  auto cfg = embed_config();
  cfg.schedule = {0.0, 0};
  // expected first Adam move is +rate * sign(dV/dtheta_D)
  std::vector<std::vector<double>> grads;
  {
    const Tensor src = s.model.embed_tokens(batch.source).detach(), tgt = s.model.embed_tokens(batch.target).detach();
    MappingGenerator w{s.generator.weight.detach()};
    auto dp = s.discriminator.parameters();
    backward(adversarial_value(real_token_rows(map_embeddings(src, w), batch.source.lengths),
                               real_token_rows(tgt, batch.target.lengths), s.discriminator));
    for (auto& p : dp) grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    zero_grads(dp);
  }
  const auto d_before = values_of(s.discriminator.parameters());
  const auto theta_before = values_of(s.main_parameters());
  NatOptimizers opt;
  opt.main.schedule = cfg.schedule;
  opt.discriminator.schedule = {cfg.discriminator_rate, 0};
  gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(values_of(s.main_parameters()), theta_before);
  const auto d_after = values_of(s.discriminator.parameters());
  std::size_t checked = 0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      if (std::abs(grads[i][k]) < 1e-6) continue;
      const double expected = cfg.discriminator_rate * (grads[i][k] > 0 ? 1.0 : -1.0);
      EXPECT_NEAR(d_after[i][k] - d_before[i][k], expected, 1e-6);
      ++checked;
    }
  EXPECT_GT(checked, 10u);
}

TEST_F(StudentStep, MainUpdateDescendsAndLeavesDiscriminatorUntouched) {
  Student s = embed_student();
  auto cfg = embed_config();
  cfg.discriminator_rate = 0.0;
  std::vector<double> w_grad;
  {
    auto theta = s.main_parameters();
    const Tensor src = s.model.embed_tokens(batch.source).detach(), tgt = s.model.embed_tokens(batch.target).detach();
    const auto in = build_decoder_input(s.model, batch.source, s.method, batch.target.lengths, s.resources());
    Tensor total = masked_nll(s.model.nat_forward(in.embeddings, batch.target.lengths, s.model.encode(batch.source)),
                              batch.target);
    total = add(total, scale(align_loss(sentence_embedding(src, batch.source.lengths),
                                        sentence_embedding(tgt, batch.target.lengths), s.generator),
                             cfg.mu));
    const Discriminator frozen{s.discriminator.hidden_weight.detach(), s.discriminator.hidden_bias.detach(),
                               s.discriminator.output_weight.detach(), s.discriminator.output_bias.detach()};
    total = add(total, adversarial_value(real_token_rows(map_embeddings(src, s.generator), batch.source.lengths),
                                         real_token_rows(tgt, batch.target.lengths), frozen));
    backward(total);
    w_grad.assign(s.generator.weight.grad().begin(), s.generator.weight.grad().end());
    zero_grads(theta);
  }
  double norm = 0.0;
  for (double g : w_grad) norm += g * g;
  EXPECT_GT(norm, 0.0);  // the total loss reaches W

  const auto d_before = values_of(s.discriminator.parameters());
  const auto w_before = values_of(s.generator.parameters());
  NatOptimizers opt;
  opt.main.schedule = cfg.schedule;
  opt.discriminator.schedule = {cfg.discriminator_rate, 0};
  gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(values_of(s.discriminator.parameters()), d_before);
  const auto w_after = values_of(s.generator.parameters());
  for (std::size_t k = 0; k < w_grad.size(); ++k) {
    if (std::abs(w_grad[k]) < 1e-6) continue;
    EXPECT_NEAR(w_after[0][k] - w_before[0][k], -cfg.schedule.base_rate * (w_grad[k] > 0 ? 1.0 : -1.0), 1e-6);
  }
}

TEST_F(StudentStep, ZeroLambdaSkipsDiscriminator) {
  Student s = embed_student();
  auto cfg = embed_config();
  cfg.lambda = 0.0;
  const auto d_before = values_of(s.discriminator.parameters());
  NatOptimizers opt;
  const auto r = gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(values_of(s.discriminator.parameters()), d_before);
  EXPECT_EQ(opt.discriminator.step, 0u);
  EXPECT_EQ(r.l_adv, 0.0);
  EXPECT_EQ(r.v_word, 0.0);
}

TEST_F(StudentStep, DiscriminatorStepCount) {
  Student s = embed_student();
  auto cfg = embed_config();
  cfg.discriminator_steps = 3;
  NatOptimizers opt;
  gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(opt.discriminator.step, 3u);
  EXPECT_EQ(opt.main.step, 1u);
}

TEST_F(StudentStep, CopyWithoutRegularizersIsPlainCrossEntropy) {
  Student s = make_student(data.vocab, small_model(), DecoderInputMethod::kCopy, std::nullopt, 1.0, 0.3, false, 5);
  TrainConfig cfg;
  NatOptimizers opt;
  const auto r = gan_alternation_step(s, batch, nullptr, cfg, opt);
  EXPECT_EQ(r.l_align, 0.0);
  EXPECT_EQ(r.l_adv, 0.0);
  EXPECT_EQ(r.total, r.l_neg);
}

TEST_F(StudentStep, NonFiniteLossesNameComponentAndStep) {
  Student copy = make_student(data.vocab, small_model(), DecoderInputMethod::kCopy, std::nullopt, 1.0, 0.3, false, 5);
  Tensor emb = copy.model.embedding_table();
  for (double& v : emb.mutable_values()) v = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  NatOptimizers opt;
  try {
    gan_alternation_step(copy, batch, nullptr, cfg, opt);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("L_neg at step 1"), std::string::npos) << e.what();
  }
  Student embed = embed_student();
  embed.generator.weight.mutable_values()[0] = std::numeric_limits<double>::infinity();
  try {
    gan_alternation_step(embed, batch, nullptr, embed_config(), opt);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("V_word"), std::string::npos) << e.what();
  }
}

TEST_F(StudentStep, MissingLookupTableIsConfigurationError) {
  EXPECT_THROW(make_student(data.vocab, small_model(), DecoderInputMethod::kPhrase, std::nullopt, 1.0, 0.3, false, 1),
               ConfigurationError);
  Student s = make_student(data.vocab, small_model(), DecoderInputMethod::kCopy, std::nullopt, 1.0, 0.3, false, 1);
  TrainConfig cfg;
  cfg.method = DecoderInputMethod::kEmbed;
  EXPECT_THROW(train_nat(s, data.train, data.valid, cfg), ConfigurationError);
}

TEST_F(StudentStep, TrainNatIsDeterministicAndStreamsLosses) {
  auto run = [&] {
    Student s = embed_student(9);
    auto cfg = embed_config();
    cfg.epochs = 2;
    std::size_t streamed = 0;
    const auto r = train_nat(s, data.train, data.valid, cfg, [&](const LossReport&) { ++streamed; });
    EXPECT_EQ(streamed, r.losses.size());
    EXPECT_EQ(r.history.size(), 2u);
    return std::make_pair(values_of(s.main_parameters()), r.losses.back().total);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

// ---------------------------------------------------------------------------
// Adversarial objective on separable 2-D clusters
// ---------------------------------------------------------------------------

TEST(AdversarialClusters, GeneratorConfusesDiscriminator) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0.0, 0.3);
  const std::size_t n = 200;
  std::vector<double> src, tgt;
  for (std::size_t i = 0; i < n; ++i) {
    src.insert(src.end(), {3.0 + noise(rng), noise(rng)});
    tgt.insert(tgt.end(), {noise(rng), 3.0 + noise(rng)});
  }
  const Tensor x({n, 2}, src), y({n, 2}, tgt);
  auto g = MappingGenerator::identity(2);
  auto d = Discriminator::create(2, 8, 3);
  OptimizerState opt_d, opt_g;
  opt_d.schedule = {1e-3, 0};
  opt_g.schedule = {1e-2, 0};
  auto accuracy = [&] {
    NoGradGuard ng;
    const Tensor pm = d.probability(map_embeddings(x, g)), pt = d.probability(y);
    std::size_t right = 0;
    for (std::size_t i = 0; i < n; ++i) right += (pm[i] < 0.5) + (pt[i] >= 0.5);
    return static_cast<double>(right) / static_cast<double>(2 * n);
  };
  auto d_step = [&] {
    auto dp = d.parameters();
    MappingGenerator frozen{g.weight.detach()};
    backward(scale(adversarial_value(map_embeddings(x, frozen), y, d), -1.0));
    adam_step(dp, opt_d);
    zero_grads(dp);
  };
  for (int k = 0; k < 200; ++k) d_step();
  EXPECT_GE(accuracy(), 0.95);
  double late_accuracy = 0.0;
  const int steps = 4000, window = 500;
  for (int k = 0; k < steps; ++k) {
    d_step();
    auto gp = g.parameters();
    const Discriminator fd{d.hidden_weight.detach(), d.hidden_bias.detach(), d.output_weight.detach(),
                           d.output_bias.detach()};
    backward(adversarial_value(map_embeddings(x, g), y, fd));
    adam_step(gp, opt_g);
    zero_grads(gp);
    if (k >= steps - window) late_accuracy += accuracy() / window;
  }
  EXPECT_NEAR(late_accuracy, 0.5, 0.15);
  // the source centre (3, 0) lands near the target centre (0, 3)
  const Tensor centre = map_embeddings(Tensor({1, 2}, {3.0, 0.0}), g);
  EXPECT_LT(std::hypot(centre[0], centre[1] - 3.0), 1.0);
}

// ---------------------------------------------------------------------------
// Teacher, distillation and a short student comparison
// ---------------------------------------------------------------------------

class TrainedTeacher : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new Data(make_data(3000, 8, 21));
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.max_tokens = 200;
    ModelConfig mc;
    mc.d_model = 32;
    mc.d_ff = 64;
    mc.max_positions = 64;
    result_ = new TeacherResult(train_teacher(data_->vocab, data_->train, data_->valid, mc, cfg));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete data_;
  }
  static Data* data_;
  static TeacherResult* result_;
};

Data* TrainedTeacher::data_ = nullptr;
TeacherResult* TrainedTeacher::result_ = nullptr;

TEST_F(TrainedTeacher, ReachesHighValidationAccuracy) {
  const auto ev = evaluate_teacher(result_->model, data_->valid);
  EXPECT_GE(ev.token_accuracy, 0.99);
  EXPECT_TRUE(std::isfinite(ev.loss));
  EXPECT_FALSE(result_->history.empty());
}

TEST_F(TrainedTeacher, DistillationMatchesReferences) {
  const auto d = distill(result_->model, data_->test);
  ASSERT_EQ(d.pairs.size(), data_->test.size());
  ASSERT_EQ(d.originals.size(), data_->test.size());
  std::size_t same = 0;
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    EXPECT_EQ(d.pairs[i].source, data_->test[i].source);
    EXPECT_EQ(d.originals[i], data_->test[i].target);
    same += d.pairs[i].target == data_->test[i].target;
  }
  EXPECT_GE(static_cast<double>(same) / static_cast<double>(d.pairs.size()), 0.99);
  const auto again = distill(result_->model, data_->test);
  EXPECT_EQ(again.pairs, d.pairs);
}

TEST_F(TrainedTeacher, BeamScoreAtLeastGreedyScore) {
  for (const auto& p : data_->test) {
    const auto g = greedy_decode(result_->model, p.source, distill_max_length(p.source.size()));
    const auto b = beam_search(result_->model, p.source, 4, distill_max_length(p.source.size()));
    EXPECT_GE(b.score, g.score - 1e-12);
  }
}

TEST_F(TrainedTeacher, PhraseStudentBeatsCopyAfterEqualBriefTraining) {
  const auto distilled = distill(result_->model, data_->train);
  const auto table = build_phrase_table(data_->splits.train, 3, 10);
  auto score = [&](DecoderInputMethod m) {
    Student s = make_student(data_->vocab, small_model(), m,
                             m == DecoderInputMethod::kPhrase ? std::optional<PhraseTable>(table) : std::nullopt, 1.0,
                             0.3, false, 2);
    TrainConfig cfg;
    cfg.method = m;
    cfg.epochs = 1;
    return train_nat(s, distilled.pairs, data_->valid, cfg).best_valid_bleu;
  };
  EXPECT_GT(score(DecoderInputMethod::kPhrase), score(DecoderInputMethod::kCopy));
}

TEST(TeacherTraining, RepeatedBatchLossFallsAndRunsAreDeterministic) {
  const Data d = make_data(40, 5, 8);
  const std::vector<SentencePair> one(d.train.begin(), d.train.begin() + 8);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.patience = 10;
  cfg.max_tokens = 100000;
  cfg.schedule = {3e-4, 0};
  const auto a = train_teacher(d.vocab, one, one, small_model(), cfg);
  ASSERT_EQ(a.step_losses.size(), 10u);
  for (std::size_t i = 1; i < a.step_losses.size(); ++i) EXPECT_LT(a.step_losses[i], a.step_losses[i - 1]);
  const auto b = train_teacher(d.vocab, one, one, small_model(), cfg);
  EXPECT_TRUE(all_finite_equal(a.model.parameters(), b.model.parameters()));
  EXPECT_THROW(train_teacher(d.vocab, {}, one, small_model(), cfg), IngestionError);
}
