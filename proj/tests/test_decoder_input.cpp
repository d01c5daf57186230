#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "enat/decoder_input.hpp"
#include "enat/gradcheck.hpp"
#include "enat/toy_corpus.hpp"

using namespace enat;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool rg = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), rg);
}

Tensor probe(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.37 * static_cast<double>(i) + 0.1);
  return weighted_sum(y, w);
}

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.num_layers = 1;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 8;
  c.max_positions = 40;
  return c;
}

}  // namespace

TEST(LengthKernel, WorkedExample) {
  const auto w = length_kernel(3, 3, 0.3);
  // direct evaluation of exp(-(j - i)^2 / tau) for row 1
  const double a = 1.0, b = std::exp(-1.0 / 0.3), c = std::exp(-4.0 / 0.3);
  EXPECT_NEAR(b, 0.03567, 1e-5);
  EXPECT_NEAR(w[0], a / (a + b + c), 1e-12);
  EXPECT_NEAR(w[0], 0.9656, 1e-4);
  EXPECT_NEAR(w[1], 0.0344, 1e-4);
  EXPECT_NEAR(w[2], 1.6e-6, 1e-7);
  const auto raw = length_kernel(3, 3, 0.3, false);
  EXPECT_DOUBLE_EQ(raw[0], 1.0);
  EXPECT_NEAR(raw[1], b, 1e-15);
}

TEST(LengthKernel, RowsNormalizedPositiveAndMonotone) {
  for (std::size_t tz = 1; tz <= 20; ++tz)
    for (std::size_t ty = 1; ty <= 20; ++ty) {
      const auto w = length_kernel(tz, ty, 0.3);
      std::size_t previous_arg = 0;
      for (std::size_t j = 0; j < ty; ++j) {
        double total = 0.0;
        std::size_t arg = 0;
        for (std::size_t i = 0; i < tz; ++i) {
          total += w[j * tz + i];
          if (w[j * tz + i] > w[j * tz + arg]) arg = i;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
        EXPECT_GE(arg, previous_arg);
        previous_arg = arg;
      }
    }
}

TEST(LengthKernel, DiagonalDominatesForEqualLengths) {
  for (std::size_t t = 1; t <= 50; ++t) {
    const auto w = length_kernel(t, t, 0.3);
    for (std::size_t j = 0; j < t; ++j) EXPECT_GE(w[j * t + j], 0.9);
  }
  EXPECT_THROW(length_kernel(0, 3, 0.3), ContractError);
  EXPECT_THROW(length_kernel(3, 3, 0.0), ContractError);
}

TEST(SoftLengthMap, TinyTauCopiesAndScalingIsLinear) {
  const Tensor cand = random_tensor({5, 4}, 1, false);
  const Tensor copy = soft_length_map(cand, 5, 1e-6);
  for (std::size_t i = 0; i < cand.size(); ++i) EXPECT_NEAR(copy[i], cand[i], 1e-6);
  const Tensor base = soft_length_map(cand, 7, 0.3);
  const Tensor scaled = soft_length_map(scale(cand, 2.5), 7, 0.3);
  EXPECT_EQ(base.shape(), (Shape{7, 4}));
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], 2.5 * base[i], 1e-12);
}

TEST(SoftLengthMap, BatchedRowsPadAndFlagEmptyCandidates) {
  const Tensor cands = random_tensor({2, 3, 4}, 2, false);
  const auto out = soft_length_map(cands, {3, 0}, {2, 4}, 5, 0.3);
  EXPECT_TRUE(out.empty_candidate);
  EXPECT_EQ(out.embeddings.shape(), (Shape{2, 5, 4}));
  for (std::size_t i = 2 * 4; i < 5 * 4; ++i) EXPECT_EQ(out.embeddings[i], 0.0);  // row 0 beyond T_y
  for (std::size_t i = 5 * 4; i < 10 * 4; ++i) EXPECT_EQ(out.embeddings[i], 0.0);  // empty row
  // agrees with the single-sequence form
  Tensor first_row({3, 4}, std::vector<double>(cands.values().begin(), cands.values().begin() + 12));
  const Tensor expected = soft_length_map(first_row, 2, 0.3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out.embeddings[i], expected[i], 1e-12);
}

TEST(MapEmbeddings, IdentityAndRowDefinition) {
  const Tensor x = random_tensor({2, 3, 4}, 3, false);
  const auto id = MappingGenerator::identity(4);
  const Tensor same = map_embeddings(x, id);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(same[i], x[i]);
  MappingGenerator g{random_tensor({4, 4}, 4)};
  const Tensor mapped = map_embeddings(x, g);
  for (std::size_t row = 0; row < 6; ++row)
    for (std::size_t c = 0; c < 4; ++c) {
      double v = 0.0;
      for (std::size_t k = 0; k < 4; ++k) v += x[row * 4 + k] * g.weight[k * 4 + c];
      EXPECT_NEAR(mapped[row * 4 + c], v, 1e-12);
    }
  EXPECT_THROW(map_embeddings(Tensor({2, 5}), g), ShapeError);
}

TEST(AlignLoss, Examples) {
  const auto id = MappingGenerator::identity(2);
  EXPECT_NEAR(align_loss(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1}), id).item(), std::sqrt(2.0), 1e-12);
  EXPECT_EQ(align_loss(Tensor({1, 2}, {0.3, 0.4}), Tensor({1, 2}, {0.3, 0.4}), id).item(), 0.0);
  // batch mean of per-sentence norms
  EXPECT_NEAR(align_loss(Tensor({2, 2}, {3, 4, 0, 0}), Tensor({2, 2}, {0, 0, 0, 1}), id).item(), 3.0, 1e-12);
}

TEST(AlignLoss, TokenOrderInvariant) {
  const Tensor tokens = random_tensor({1, 4, 3}, 5, false);
  std::vector<double> reversed;
  for (std::size_t t = 4; t-- > 0;)
    reversed.insert(reversed.end(), tokens.values().begin() + static_cast<long>(t * 3),
                    tokens.values().begin() + static_cast<long>(t * 3 + 3));
  const Tensor target = random_tensor({1, 3}, 6, false);
  MappingGenerator g{random_tensor({3, 3}, 7)};
  const double a = align_loss(sentence_embedding(tokens, {4}), target, g).item();
  const double b = align_loss(sentence_embedding(Tensor({1, 4, 3}, reversed), {4}), target, g).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(SentenceEmbedding, IgnoresPadding) {
  Tensor x({1, 3, 2}, {1, 2, 3, 4, 100, 100});
  const Tensor s = sentence_embedding(x, {2});
  EXPECT_DOUBLE_EQ(s[0], 2.0);
  EXPECT_DOUBLE_EQ(s[1], 3.0);
}

TEST(AdversarialValue, ConstantHalfDiscriminator) {
  auto d = Discriminator::create(3, 3, 1);
  for (auto* t : {&d.hidden_weight, &d.hidden_bias, &d.output_weight, &d.output_bias})
    for (double& v : t->mutable_values()) v = 0.0;
  const double v = adversarial_value(random_tensor({4, 3}, 1, false), random_tensor({5, 3}, 2, false), d).item();
  EXPECT_NEAR(v, 2.0 * std::log(0.5), 1e-12);
  EXPECT_NEAR(v, -1.38629, 1e-5);
}

TEST(AdversarialValue, PerfectDiscriminatorReachesZero) {
  auto d = Discriminator::create(1, 1, 1);
  d.hidden_weight.mutable_values()[0] = 1.0;
  d.hidden_bias.mutable_values()[0] = 0.0;
  d.output_weight.mutable_values()[0] = 1000.0;
  d.output_bias.mutable_values()[0] = -500.0;
  const double v = adversarial_value(Tensor({2, 1}, {0.0, 0.1}), Tensor({2, 1}, {5.0, 6.0}), d).item();
  EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_LE(v, 0.0);
  const Tensor p = d.probability(Tensor({3, 1}, {-50, 0.5, 50}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GE(p[i], 0.0);
    EXPECT_LE(p[i], 1.0);
  }
}

TEST(GradientCheck, DecoderInputOperations) {
  for (std::uint64_t point = 0; point < 10; ++point) {
    Tensor cand = random_tensor({2, 4, 3}, 10 + point);
    Tensor single = random_tensor({3, 3}, 20 + point);
    MappingGenerator g{random_tensor({3, 3}, 30 + point)};
    Tensor src = random_tensor({2, 3}, 40 + point), tgt = random_tensor({2, 3}, 50 + point);
    Tensor mapped = random_tensor({5, 3}, 60 + point), target = random_tensor({4, 3}, 70 + point);
    const auto d = Discriminator::create(3, 3, point);
    auto check = [](const GradCheckResult& r) { EXPECT_LT(r.max_relative_error, 1e-3) << r.worst; };
    check(check_gradients([&] { return probe(soft_length_map(cand, {4, 2}, {5, 3}, 5, 0.3).embeddings); }, {cand}));
    check(check_gradients([&] { return probe(soft_length_map(cand, {4, 3}, {2, 6}, 6, 0.3, false).embeddings); }, {cand}));
    check(check_gradients([&] { return probe(soft_length_map(single, 7, 0.3)); }, {single}));
    check(check_gradients([&] { return probe(map_embeddings(cand, g)); }, {cand, g.weight}));
    check(check_gradients([&] { return align_loss(src, tgt, g); }, {src, tgt, g.weight}));
    std::vector<Tensor> adv_inputs{mapped, target};
    for (const auto& p : d.parameters()) adv_inputs.push_back(p.tensor);
    check(check_gradients([&] { return adversarial_value(mapped, target, d); }, adv_inputs));
    check(check_gradients([&] { return adversarial_value(map_embeddings(mapped, g), target, d); }, {g.weight}));
  }
}

TEST(BuildDecoderInput, ShapesAndEmbedIdentityEqualsCopy) {
  const Transformer m(tiny(10), DecoderKind::kNonAutoregressive, 1);
  const auto id = MappingGenerator::identity(8);
  DecoderInputResources res;
  res.generator = &id;
  const PaddedIds src = PaddedIds::from({{4, 5, 6}, {7, 8}});
  const std::vector<std::size_t> ty{4, 2};
  const auto copy = build_decoder_input(m, src, DecoderInputMethod::kCopy, ty, res);
  const auto embed = build_decoder_input(m, src, DecoderInputMethod::kEmbed, ty, res);
  EXPECT_EQ(copy.embeddings.shape(), (Shape{2, 4, 8}));
  for (std::size_t i = 0; i < copy.embeddings.size(); ++i) EXPECT_EQ(copy.embeddings[i], embed.embeddings[i]);
  EXPECT_EQ(copy.candidate_lengths, (std::vector<std::size_t>{3, 2}));
}

TEST(BuildDecoderInput, MissingResourcesAreConfigurationErrors) {
  const Transformer m(tiny(10), DecoderKind::kNonAutoregressive, 1);
  const PaddedIds src = PaddedIds::from({{4, 5}});
  EXPECT_THROW(build_decoder_input(m, src, DecoderInputMethod::kEmbed, {2}, {}), ConfigurationError);
  EXPECT_THROW(build_decoder_input(m, src, DecoderInputMethod::kPhrase, {2}, {}), ConfigurationError);
  EXPECT_THROW(build_decoder_input(m, src, DecoderInputMethod::kWord, {2}, {}), ConfigurationError);
  EXPECT_THROW(parse_decoder_input_method("fertility"), std::invalid_argument);
  EXPECT_EQ(parse_decoder_input_method("embed"), DecoderInputMethod::kEmbed);
}

TEST(BuildDecoderInput, PerfectTableNearestNeighboursGiveReference) {
  const auto corpus = generate_toy_corpus({300, 3, 12, true, 17, 1});
  const Vocabulary vocab = build_vocab(corpus);
  const auto lex = toy_lexicon(1);
  PhraseTable perfect;
  for (const auto& [s, t] : lex) perfect.add({s}, {t}, 1.0);
  for (const auto& [a, ta] : lex)
    for (const auto& [n, tn] : lex)
      if (a[0] == 'a' && n[0] == 'n') perfect.add({a, n}, {tn, ta}, 1.0);
  const Transformer m(tiny(vocab.size()), DecoderKind::kNonAutoregressive, 3);
  DecoderInputResources res;
  res.vocab = &vocab;
  res.lookup_table = &perfect;
  const Tensor& table = m.embedding_table();
  const std::size_t d = 8;
  for (std::size_t k = 0; k < 40; ++k) {
    const auto ids = vocab.encode(corpus[k].source);
    const std::size_t ty = corpus[k].target.size();
    const auto z = build_decoder_input(m, PaddedIds::from({ids}), DecoderInputMethod::kPhrase, {ty}, res);
    TokenIds nearest;
    for (std::size_t j = 0; j < ty; ++j) {
      int best = -1;
      double best_dist = 1e300;
      for (std::size_t v = Vocabulary::kReserved; v < vocab.size(); ++v) {
        double dist = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = z.embeddings[j * d + c] - m.embedding_scale() * table[v * d + c];
          dist += diff * diff;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best = static_cast<int>(v);
        }
      }
      nearest.push_back(best);
    }
    EXPECT_EQ(vocab.decode(nearest), corpus[k].target);
  }
}

TEST(LookupCandidate, UnknownTokensAreSkipped) {
  const Vocabulary vocab = build_vocab({{{"a", "b"}, {"X", "Y"}}});
  PhraseTable t;
  t.add({"a"}, {"X"}, 1.0);
  EXPECT_EQ(lookup_candidate({vocab.id("a"), Vocabulary::kUnk, vocab.id("b")}, t, vocab), (TokenIds{vocab.id("X")}));
}
