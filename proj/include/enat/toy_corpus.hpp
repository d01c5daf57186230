#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "enat/corpus.hpp"

namespace enat {

/// Settings for the synthetic "lexical cipher" language pair.
///
/// Source sentences come from a small class-based Markov chain
/// (determiner, adjective, noun, verb, conjunction). Each source word has
/// one fixed target word. With `local_swap`, an adjective directly
/// followed by a noun is emitted as noun-then-adjective on the target side.
struct ToyCorpusConfig {
  std::size_t pairs = 5000;
  std::size_t min_length = 3;
  std::size_t max_length = 12;
  bool local_swap = true;
  std::uint64_t seed = 7;
  std::uint64_t key_seed = 1;  // fixes the cipher itself, independent of sampling
};

namespace detail {

enum class WordClass : int { kDet = 0, kAdj = 1, kNoun = 2, kVerb = 3, kConj = 4 };

struct ToyLexicon {
  std::array<std::vector<std::string>, 5> source_words;
  std::map<std::string, std::string> cipher;
  std::map<std::string, WordClass> word_class;
};

inline ToyLexicon make_toy_lexicon(std::uint64_t key_seed) {
  static constexpr std::array<std::pair<char, std::size_t>, 5> kClasses = {
      {{'d', 3}, {'a', 6}, {'n', 8}, {'v', 6}, {'c', 2}}};
  ToyLexicon lex;
  std::vector<std::string> all;
  for (std::size_t c = 0; c < kClasses.size(); ++c)
    for (std::size_t i = 0; i < kClasses[c].second; ++i) {
      std::string w = std::string(1, kClasses[c].first) + std::to_string(i);
      lex.source_words[c].push_back(w);
      lex.word_class[w] = static_cast<WordClass>(c);
      all.push_back(w);
    }
  std::vector<std::size_t> perm(all.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(key_seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const std::size_t k = perm[i];
    lex.cipher[all[i]] = std::string("T") + (k < 10 ? "0" : "") + std::to_string(k);
  }
  return lex;
}

inline WordClass next_class(WordClass current, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  switch (current) {
    case WordClass::kDet: return r < 0.5 ? WordClass::kAdj : WordClass::kNoun;
    case WordClass::kAdj: return r < 0.25 ? WordClass::kAdj : WordClass::kNoun;
    case WordClass::kNoun:
      return r < 0.6 ? WordClass::kVerb : (r < 0.8 ? WordClass::kConj : WordClass::kDet);
    case WordClass::kVerb:
      return r < 0.5 ? WordClass::kDet : (r < 0.8 ? WordClass::kNoun : WordClass::kAdj);
    case WordClass::kConj: return r < 0.6 ? WordClass::kDet : WordClass::kNoun;
  }
  return WordClass::kNoun;
}

}  // namespace detail

/// The ground-truth word translation used by the generator.
inline std::map<std::string, std::string> toy_lexicon(std::uint64_t key_seed = 1) {
  return detail::make_toy_lexicon(key_seed).cipher;
}

/// Target side of the cipher for one source sentence.
inline Tokens toy_translate(const Tokens& source, bool local_swap, std::uint64_t key_seed = 1) {
  const auto lex = detail::make_toy_lexicon(key_seed);
  Tokens out;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto is = [&](std::size_t k, detail::WordClass c) {
      auto it = lex.word_class.find(source[k]);
      return it != lex.word_class.end() && it->second == c;
    };
    if (local_swap && i + 1 < source.size() && is(i, detail::WordClass::kAdj) &&
        is(i + 1, detail::WordClass::kNoun)) {
      out.push_back(lex.cipher.at(source[i + 1]));
      out.push_back(lex.cipher.at(source[i]));
      ++i;
    } else {
      out.push_back(lex.cipher.at(source[i]));
    }
  }
  return out;
}

/// Deterministic cipher corpus: identical config yields identical pairs.
inline TextCorpus generate_toy_corpus(const ToyCorpusConfig& cfg) {
  if (cfg.min_length == 0 || cfg.min_length > cfg.max_length)
    throw IngestionError("toy corpus: invalid length range");
  const auto lex = detail::make_toy_lexicon(cfg.key_seed);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_length, cfg.max_length);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TextCorpus corpus;
  corpus.reserve(cfg.pairs);
  for (std::size_t p = 0; p < cfg.pairs; ++p) {
    const std::size_t len = len_dist(rng);
    const double r = u(rng);
    auto cls = r < 0.5 ? detail::WordClass::kDet : (r < 0.7 ? detail::WordClass::kAdj : detail::WordClass::kNoun);
    Tokens src;
    for (std::size_t i = 0; i < len; ++i) {
      const auto& words = lex.source_words[static_cast<std::size_t>(cls)];
      std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
      src.push_back(words[pick(rng)]);
      cls = detail::next_class(cls, rng);
    }
    corpus.push_back({src, toy_translate(src, cfg.local_swap, cfg.key_seed)});
  }
  return corpus;
}

/// Train/valid/test splits where valid and test sources never occur in train.
struct ToySplits {
  TextCorpus train;
  TextCorpus valid;
  TextCorpus test;
};

inline ToySplits generate_toy_splits(ToyCorpusConfig cfg, std::size_t valid_pairs, std::size_t test_pairs) {
  ToySplits s;
  s.train = generate_toy_corpus(cfg);
  std::set<Tokens> seen;
  for (const auto& p : s.train) seen.insert(p.source);
  ToyCorpusConfig held = cfg;
  held.pairs = 1;
  std::uint64_t salt = 0;
  auto fill = [&](TextCorpus& out, std::size_t wanted) {
    while (out.size() < wanted) {
      held.seed = cfg.seed * 1000003ULL + 0x9e3779b97f4a7c15ULL + salt++;
      auto one = generate_toy_corpus(held);
      if (seen.insert(one.front().source).second) out.push_back(std::move(one.front()));
      if (salt > 100 * (wanted + 10)) throw IngestionError("toy corpus: cannot find enough unseen sentences");
    }
  };
  fill(s.valid, valid_pairs);
  fill(s.test, test_pairs);
  return s;
}

}  // namespace enat
