// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"
#include "paracnn/decode.hpp"

#include "doctest.h"

#include <cmath>
#include <limits>
#include <set>

using namespace paracnn;
using namespace fixtures;

namespace {

/// Output layer replaced by a constant: every step scores `q` highest.
void make_constant(ParaCnn &model, std::int64_t q) {
  std::fill(model.output.weight.data().begin(), model.output.weight.data().end(), 0.0);
  auto bias = model.output.bias.data();
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[static_cast<std::size_t>(q)] = 5.0;
}

DecodeConfig plain(std::size_t words) {
  DecodeConfig d;
  d.max_words = words;
  d.rep_penalty = 0.0;
  d.block_trigrams = false;
  return d;
}

} // namespace

TEST_CASE("repetition penalty") {
  SUBCASE("counts scale the penalty") {
    std::vector<double> logits{0, 0, 0, 0, 1.0, 2.0, 3.0};
    std::vector<std::int64_t> history{5, 4, 5, 6, 5};
    apply_repetition_penalty(logits, history, 1.5, false);
    CHECK(logits[5] == doctest::Approx(2.0 - 4.5));
    CHECK(logits[4] == doctest::Approx(1.0 - 1.5));
    CHECK(logits[6] == doctest::Approx(3.0 - 1.5));
    CHECK(logits[0] == 0.0);
  }
  SUBCASE("zero strength leaves logits untouched") {
    std::vector<double> logits{0.5, -1.0, 2.0, 0.1, 0.7};
    const auto copy = logits;
    std::vector<std::int64_t> history{4, 4, 4};
    apply_repetition_penalty(logits, history, 0.0, false);
    CHECK(logits == copy);
  }
  SUBCASE("trigram blocking against brute force") {
    Rng rng(8);
    const double inf = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t vocab = 4 + 1 + rng.below(3);
      std::vector<std::int64_t> history(rng.below(12));
      for (auto &t : history)
        t = static_cast<std::int64_t>(4 + rng.below(vocab - 4));
      std::vector<double> logits(vocab, 0.0);
      apply_repetition_penalty(logits, history, 0.0, true);
      std::set<std::vector<std::int64_t>> seen;
      for (std::size_t i = 0; i + 2 < history.size(); ++i)
        seen.insert({history[i], history[i + 1], history[i + 2]});
      for (std::size_t x = 0; x < vocab; ++x) {
        bool blocked = false;
        if (history.size() >= 2)
          blocked = seen.count({history[history.size() - 2], history.back(),
                                static_cast<std::int64_t>(x)}) > 0;
        CHECK((logits[x] == -inf) == blocked);
        if (!blocked)
          CHECK(logits[x] == 0.0);
      }
    }
  }
}

TEST_CASE("greedy decoding") {
  Rng rng(9);
  ModelConfig c = tiny_config(12, 3, 5);
  ParaCnn model(c, rng);
  auto feats = random_features(3, c.visual_dim, rng);

  SUBCASE("a constant model repeats its token up to the cap") {
    make_constant(model, 7);
    auto out = greedy_decode(model, feats, 3, plain(5));
    REQUIRE(out.sentences.size() == 3);
    for (const auto &s : out.sentences)
      CHECK(s == std::vector<std::int64_t>(5, 7));
  }
  SUBCASE("eos ends a sentence") {
    make_constant(model, token::eos);
    auto out = greedy_decode(model, feats, 2, plain(5));
    CHECK(out.sentences == std::vector<std::vector<std::int64_t>>{{}, {}});
  }
  SUBCASE("penalty drives the decoder off a repeated token") {
    make_constant(model, 7);
    model.output.bias.data()[8] = 4.0;
    DecodeConfig d = plain(4);
    d.rep_penalty = 2.0;
    DecodeOptions opts;
    opts.record_logits = true;
    auto out = greedy_decode(model, feats, 1, d, opts);
    CHECK(out.sentences[0] == std::vector<std::int64_t>{7, 8, 7, 8});
    CHECK(out.adjusted[0] == std::vector<bool>{false, true, true, true});
  }
  SUBCASE("fully blocked steps emit eos") {
    DecodeConfig tight = plain(8);
    tight.block_trigrams = true;
    std::fill(model.output.bias.data().begin(), model.output.bias.data().end(),
              -std::numeric_limits<double>::infinity());
    model.output.bias.data()[7] = 1.0;
    auto stuck = greedy_decode(model, feats, 1, tight);
    CHECK(stuck.sentences[0] == std::vector<std::int64_t>{7, 7, 7});
  }
  SUBCASE("deterministic") {
    DecodeConfig d;
    d.max_words = 6;
    auto a = greedy_decode(model, feats, 3, d), b = greedy_decode(model, feats, 3, d);
    CHECK(a.sentences == b.sentences);
  }
  SUBCASE("any requested sentence count") {
    for (std::size_t k : {1u, 3u, 5u}) {
      auto out = greedy_decode(model, feats, k, plain(4));
      CHECK(out.sentences.size() == k);
    }
    CHECK_THROWS(greedy_decode(model, feats, 0, plain(4)));
  }
  SUBCASE("teacher-forced inference logits equal the training pass") {
    for (int trial = 0; trial < 5; ++trial) {
      auto p = random_paragraph(c, rng);
      DecodeOptions opts;
      opts.forced = &p;
      opts.record_logits = true;
      auto out = greedy_decode(model, feats, 0, plain(c.max_words), opts);
      auto batch = ParagraphBatch::from({&p});
      auto full = model.paragraph_forward(batch, FeatureBatch::single(feats));
      double worst = 0.0;
      for (std::size_t j = 0; j < out.logits.size(); ++j)
        for (std::size_t t = 0; t < out.logits[j].size(); ++t)
          for (std::size_t v = 0; v < c.vocab_size; ++v)
            worst = std::max(
                worst, std::abs(out.logits[j][t][v] -
                                full.logits.data()[batch.index(0, j, t) * c.vocab_size + v]));
      CHECK(worst <= 1e-10);
    }
  }
}

TEST_CASE("re-scoring a decoded paragraph") {
  Rng rng(17);
  ModelConfig c = tiny_config(12, 3, 6);
  for (int trial = 0; trial < 5; ++trial) {
    ParaCnn model(c, rng);
    auto feats = random_features(2, c.visual_dim, rng);
    DecodeConfig d;
    d.max_words = c.max_words - 1;
    DecodeOptions opts;
    opts.record_logits = true;
    auto out = greedy_decode(model, feats, c.max_sentences, d, opts);
    EncodedParagraph p;
    p.max_sentences = c.max_sentences;
    p.max_words = c.max_words;
    p.tokens.assign(c.max_sentences * c.max_words, token::pad);
    p.mask.assign(c.max_sentences * c.max_words, 0);
    p.sentence_count = out.sentences.size();
    for (std::size_t j = 0; j < out.sentences.size(); ++j) {
      const auto &s = out.sentences[j];
      for (std::size_t i = 0; i < s.size(); ++i) {
        p.tokens[j * c.max_words + i] = s[i];
        p.mask[j * c.max_words + i] = 1;
      }
      p.tokens[j * c.max_words + s.size()] = token::eos;
      p.mask[j * c.max_words + s.size()] = 1;
    }
    auto batch = ParagraphBatch::from({&p});
    auto logits = model.paragraph_forward(batch, FeatureBatch::single(feats)).logits;
    for (std::size_t j = 0; j < out.sentences.size(); ++j)
      for (std::size_t t = 0; t < out.adjusted[j].size(); ++t) {
        if (out.adjusted[j][t])
          continue;
        auto row = logits.data().subspan(batch.index(0, j, t) * c.vocab_size, c.vocab_size);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        CHECK(best == p.tokens[j * c.max_words + t]);
      }
  }
}

TEST_CASE("adaptive sentence count") {
  Rng rng(10);
  ModelConfig c = tiny_config(12, 6, 4);
  ParaCnn model(c, rng);
  SentenceCountPredictor predictor(c.projection_dim, 8, 8, 6, rng);
  auto feats = random_features(2, c.visual_dim, rng);
  std::fill(predictor.layer3.weight.data().begin(), predictor.layer3.weight.data().end(),
            0.0);
  auto bias = predictor.layer3.bias.data();
  DecodeConfig d = plain(4);
  d.adaptive = true;
  for (std::size_t cls = 0; cls < 6; ++cls) {
    std::fill(bias.begin(), bias.end(), 0.0);
    bias[cls] = 1.0;
    d.min_sentences = 2;
    d.max_sentences = 4;
    const std::size_t expect = std::clamp<std::size_t>(cls + 1, 2, 4);
    CHECK(adaptive_sentence_count(model, predictor, feats, d) == expect);
    CHECK(decode_adaptive(model, predictor, feats, d).sentences.size() == expect);
  }
  d.min_sentences = 3;
  d.max_sentences = 3;
  CHECK(decode_adaptive(model, predictor, feats, d).sentences ==
        greedy_decode(model, feats, 3, plain(4)).sentences);
  d.min_sentences = 5;
  d.max_sentences = 3;
  CHECK_THROWS(d.validate());
}

TEST_CASE("paragraph text") {
  auto vocab = Vocab::from_tokens({"<pad>", "<start>", "<eos>", "<unk>", "a", "red", "cube"});
  DecodedParagraph p;
  p.sentences = {{4, 5, 6}, {}, {6}};
  CHECK(format_paragraph(p, vocab) == "a red cube.\n.\ncube.\n");
  CHECK(paragraph_text(p, vocab) == "a red cube. . cube.");
  CHECK(parse_paragraphs("a b.\nc d.\n\n\ne f.\r\n") ==
        std::vector<std::string>{"a b. c d.", "e f."});
  CHECK(parse_paragraphs("").empty());
}
