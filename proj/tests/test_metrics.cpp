// SPDX-License-Identifier: Apache-2.0
#include "paracnn/metrics.hpp"
#include "oracles.hpp"

#include "doctest.h"

#include <cmath>
#include <map>
#include <set>

using namespace paracnn;
using namespace oracles;


TEST_CASE("BLEU") {
  SUBCASE("repeated unigram is clipped") {
    std::vector<EvalPair> ps{pair("the the the the", {"the cat"})};
    CHECK(bleu(ps, 1) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(bleu(ps, 1) == doctest::Approx(bleu_oracle(ps, 1)).epsilon(1e-15));
  }
  SUBCASE("perfect match and disjoint vocabularies") {
    std::vector<EvalPair> same{pair("a red cube is in the top.", {"A red cube is in the top"})};
    for (int n = 1; n <= 4; ++n)
      CHECK(bleu(same, n) == doctest::Approx(1.0).epsilon(1e-15));
    std::vector<EvalPair> disjoint{pair("x y z", {"a b c"})};
    CHECK(bleu(disjoint, 1) == 0.0);
  }
  SUBCASE("brevity penalty") {
    std::vector<EvalPair> ps{pair("a b", {"a b c d"})};
    CHECK(bleu(ps, 1) == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-14));
  }
  SUBCASE("empty hypothesis warns") {
    std::vector<EvalPair> ps{{Tokens{}, {words("a b")}}};
    Warnings w;
    CHECK(bleu(ps, 1, &w) == 0.0);
    CHECK(w.size() == 1);
  }
  SUBCASE("random corpora against the oracle") {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<EvalPair> ps(1 + rng.below(4));
      for (auto &p : ps) {
        p.hypothesis = random_tokens(rng, 10, 4);
        for (std::size_t r = 0; r < 1 + rng.below(3); ++r)
          p.references.push_back(random_tokens(rng, 10, 4));
      }
      for (int n = 1; n <= 4; ++n)
        CHECK(std::abs(bleu(ps, n) - bleu_oracle(ps, n)) < 1e-12);
    }
  }
  CHECK_THROWS(bleu({pair("a", {"a"})}, 5));
  CHECK_THROWS(bleu({}, 1));
}

TEST_CASE("ROUGE-L") {
  SUBCASE("hand-sized") {
    std::vector<EvalPair> ps{pair("a b c", {"a x c"})};
    const double p = 2.0 / 3.0, r = 2.0 / 3.0, b2 = 1.44;
    CHECK(rouge_l(ps) == doctest::Approx((1 + b2) * p * r / (r + b2 * p)).epsilon(1e-15));
    CHECK(rouge_l(ps) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("unequal precision and recall use beta squared 1.44") {
    std::vector<EvalPair> ps{pair("a b", {"a b c d"})};
    const double p = 1.0, r = 0.5, b2 = 1.44;
    CHECK(rouge_l(ps) == doctest::Approx((1 + b2) * p * r / (r + b2 * p)).epsilon(1e-15));
  }
  CHECK(rouge_l({pair("a b c", {"a b c"})}) == doctest::Approx(1.0));
  CHECK(rouge_l({pair("a b c", {"x y"})}) == 0.0);
  SUBCASE("LCS against subsequence enumeration") {
    Rng rng(14);
    for (int trial = 0; trial < 300; ++trial) {
      auto a = random_tokens(rng, 9, 3), b = random_tokens(rng, 9, 3);
      CHECK(lcs_length(a, b) == lcs_brute(a, b));
    }
  }
}

TEST_CASE("CIDEr-D") {
  std::vector<EvalPair> corpus{
      pair("the red cube is in the top", {"the red cube is in the top"}),
      pair("the blue ball is in the left", {"the blue ball is on the left"}),
      pair("a green cone", {"the green cone is in the center"}),
  };
  SUBCASE("three documents against a dense oracle") {
    CHECK(std::abs(cider_d(corpus) - cider_oracle(corpus)) <= 1e-10);
    auto multi = corpus;
    multi[1].references.push_back(words("a blue ball sits on the left"));
    CHECK(std::abs(cider_d(multi) - cider_oracle(multi)) <= 1e-10);
  }
  SUBCASE("self-match scores highest") {
    // a hypothesis sharing nothing with the references contributes 0, and
    // the document frequencies depend on references only
    // hypothesis 0 equals its reference; hypotheses 1 and 2 do not
    auto score_of = [&](std::size_t i) {
      double total = cider_d(corpus) * 3;
      auto without = corpus;
      without[i].hypothesis = words("zzz");
      return total - cider_d(without) * 3;
    };
    CHECK(score_of(0) > score_of(1));
    CHECK(score_of(0) > score_of(2));
  }
  SUBCASE("zero overlap") {
    std::vector<EvalPair> ps{pair("x y z", {"a b c"}), pair("q", {"d e f"})};
    CHECK(cider_d(ps) == 0.0);
  }
  SUBCASE("single document warns") {
    Warnings w;
    CHECK(cider_d({corpus[0]}, &w) == 0.0);
    CHECK(w.size() == 1);
  }
  SUBCASE("pair order does not matter") {
    std::vector<EvalPair> rev(corpus.rbegin(), corpus.rend());
    CHECK(std::abs(cider_d(rev) - cider_d(corpus)) < 1e-12);
  }
  SUBCASE("random corpora against the oracle") {
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<EvalPair> ps(2 + rng.below(3));
      for (auto &p : ps) {
        p.hypothesis = random_tokens(rng, 12, 5);
        for (std::size_t r = 0; r < 1 + rng.below(3); ++r)
          p.references.push_back(random_tokens(rng, 12, 5));
      }
      CHECK(std::abs(cider_d(ps) - cider_oracle(ps)) <= 1e-10);
    }
  }
}

TEST_CASE("report") {
  std::vector<EvalPair> ps{pair("a b c d.", {"a b c d"}), pair("e f g h", {"e f g h"})};
  auto r = evaluate(ps);
  for (double b : r.bleu)
    CHECK(b == doctest::Approx(1.0));
  CHECK(r.rouge_l == doctest::Approx(1.0));
  CHECK(r.cider > 0.0);
  CHECK(metric_tokens("The Cat. sat!") == Tokens{"the", "cat", "sat"});
}

TEST_CASE("boundary behaviour") {
  SUBCASE("a stray token lowers every BLEU order") {
    std::vector<EvalPair> perfect{pair("a b c d e f", {"a b c d e f"})};
    std::vector<EvalPair> longer{pair("a b c d e f zz", {"a b c d e f"})};
    for (int n = 1; n <= 4; ++n)
      CHECK(bleu(longer, n) < bleu(perfect, n));
  }
  SUBCASE("ROUGE-L is 1 exactly for identical sequences") {
    Rng rng(16);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<EvalPair> ps{{random_tokens(rng, 6, 3), {random_tokens(rng, 6, 3)}}};
      CHECK((rouge_l(ps) == 1.0) == (ps[0].hypothesis == ps[0].references[0]));
    }
  }
}
