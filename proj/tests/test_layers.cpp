// SPDX-License-Identifier: Apache-2.0
#include "paracnn/layers.hpp"

#include "doctest.h"

#include <cmath>

using namespace paracnn;

namespace {

Tensor randn(Shape shape, Rng &rng, double s = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto &x : v)
    x = s * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor t, std::vector<double> values) {
  REQUIRE(values.size() == t.numel());
  std::copy(values.begin(), values.end(), t.data().begin());
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

TEST_CASE("causal conv with a pass-through kernel reproduces its input") {
  Rng rng(1);
  CausalConvBlock block(2, 2, 2, false, rng);
  // tap 1 (current frame) maps A to the input, gate pre-activation is huge
  std::vector<double> w(2 * 2 * 4, 0.0);
  w[(1 * 2 + 0) * 4 + 0] = 1.0;
  w[(1 * 2 + 1) * 4 + 1] = 1.0;
  fill(block.weight, w);
  fill(block.bias, {0, 0, 50, 50});
  auto x = Tensor::from({1, 3, 2}, {0.5, -1, 2, 3, -0.25, 0.75});
  auto y = block.forward(x).values();
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("causal conv summing previous and current frame") {
  Rng rng(2);
  CausalConvBlock block(1, 1, 2, false, rng);
  fill(block.weight, {1, 0, 1, 0}); // both taps feed A with weight 1, B with 0
  fill(block.bias, {0, 100});
  auto y = block.forward(Tensor::from({1, 3, 1}, {1, 2, 3})).values();
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(y[2] == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("causal conv never looks ahead") {
  Rng rng(3);
  CausalConvBlock block(3, 3, 4, true, rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randn({2, 6, 3}, rng);
    auto base = block.forward(x).values();
    const std::size_t t = rng.below(6), g = rng.below(2);
    auto x2 = Tensor::from(x.shape(), x.values());
    x2.data()[(g * 6 + t) * 3 + rng.below(3)] += 1.0;
    auto y = block.forward(x2).values();
    for (std::size_t s = 0; s < 6; ++s)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = (g * 6 + s) * 3 + c;
        if (s < t)
          CHECK(y[i] == base[i]);
      }
    CHECK(y != base);
  }
  CHECK_THROWS_AS(block.forward(Tensor::zeros({1, 2, 4})), ShapeError);
}

TEST_CASE("residual connection only when channel counts agree") {
  Rng rng(4);
  CHECK(CausalConvBlock(4, 4, 3, true, rng).residual());
  CHECK_FALSE(CausalConvBlock(4, 6, 3, true, rng).residual());
  CausalConvBlock plain(2, 2, 1, false, rng), res(2, 2, 1, true, rng);
  res.weight = plain.weight;
  res.bias = plain.bias;
  auto x = randn({1, 2, 2}, rng);
  auto a = plain.forward(x).values(), b = res.forward(x).values();
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(b[i] == doctest::Approx(a[i] + x.data()[i]).epsilon(1e-15));
}

TEST_CASE("embedding is a lookup followed by a linear map") {
  Rng rng(5);
  Embedding emb(6, 3, rng);
  std::vector<std::int64_t> ids{4};
  auto y = emb.forward(ids).values();
  for (std::size_t o = 0; o < 3; ++o) {
    double expect = emb.projection.bias.data()[o];
    for (std::size_t i = 0; i < 3; ++i)
      expect += emb.table.data()[4 * 3 + i] * emb.projection.weight.data()[i * 3 + o];
    CHECK(y[o] == doctest::Approx(expect).epsilon(1e-14));
  }
  std::vector<std::int64_t> bad{6};
  CHECK_THROWS_AS(emb.forward(bad), ShapeError);
}

TEST_CASE("visual attention") {
  Rng rng(6);
  VisualAttention att(4, 3, 5, rng);
  SUBCASE("a single region takes all the weight") {
    auto v = randn({1, 1, 3}, rng);
    auto out = att.forward(randn({1, 2, 4}, rng), v, Mask{1});
    CHECK(out.weights.values() == std::vector<double>{1.0, 1.0});
    auto c = out.context.values();
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(c[i] == v.data()[i]);
      CHECK(c[3 + i] == v.data()[i]);
    }
  }
  SUBCASE("identical regions return that region for any query") {
    std::vector<double> same;
    for (int r = 0; r < 4; ++r)
      same.insert(same.end(), {0.3, -1.2, 2.0});
    auto v = Tensor::from({1, 4, 3}, same);
    auto c = att.forward(randn({1, 3, 4}, rng), v, Mask(4, 1)).context.values();
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(c[l * 3 + 0] == doctest::Approx(0.3).epsilon(1e-14));
      CHECK(c[l * 3 + 1] == doctest::Approx(-1.2).epsilon(1e-14));
      CHECK(c[l * 3 + 2] == doctest::Approx(2.0).epsilon(1e-14));
    }
  }
  SUBCASE("direct formula with three regions") {
    auto h = randn({1, 1, 4}, rng), v = randn({1, 3, 3}, rng);
    auto out = att.forward(h, v, Mask(3, 1));
    const auto &wh = att.query.weight.data(), &wv = att.key.weight.data();
    const auto &s = att.scorer.data();
    double e[3], z = 0.0;
    for (int r = 0; r < 3; ++r) {
      e[r] = 0.0;
      for (int k = 0; k < 5; ++k) {
        double pre = 0.0;
        for (int i = 0; i < 4; ++i)
          pre += h.data()[i] * wh[i * 5 + k];
        for (int i = 0; i < 3; ++i)
          pre += v.data()[r * 3 + i] * wv[i * 5 + k];
        e[r] += s[k] * std::tanh(pre);
      }
    }
    const double mx = std::max({e[0], e[1], e[2]});
    for (double x : e)
      z += std::exp(x - mx);
    for (int i = 0; i < 3; ++i) {
      double ctx = 0.0;
      for (int r = 0; r < 3; ++r)
        ctx += std::exp(e[r] - mx) / z * v.data()[r * 3 + i];
      CHECK(std::abs(out.context.data()[i] - ctx) < 1e-12);
    }
    for (int r = 0; r < 3; ++r)
      CHECK(std::abs(out.weights.data()[r] - std::exp(e[r] - mx) / z) < 1e-12);
  }
  SUBCASE("weights are a simplex and ignore masked regions") {
    for (int trial = 0; trial < 10; ++trial) {
      auto out = att.forward(randn({2, 3, 4}, rng, 3.0), randn({2, 4, 3}, rng, 3.0),
                             Mask{1, 1, 1, 1, 1, 0, 1, 0});
      auto w = out.weights.values();
      for (std::size_t row = 0; row < 6; ++row) {
        double total = 0.0;
        for (std::size_t r = 0; r < 4; ++r) {
          CHECK(w[row * 4 + r] >= 0.0);
          total += w[row * 4 + r];
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
      for (std::size_t l = 3; l < 6; ++l) {
        CHECK(w[l * 4 + 1] == 0.0);
        CHECK(w[l * 4 + 3] == 0.0);
      }
    }
  }
}

TEST_CASE("multi-head self-attention") {
  Rng rng(7);
  SUBCASE("one position attends to itself") {
    MultiHeadSelfAttention m(4, 2, rng);
    auto x = randn({1, 1, 4}, rng);
    Tensor w;
    auto y = m.forward(x, Mask{1}, &w);
    CHECK(w.values() == std::vector<double>{1.0, 1.0});
    auto expect = m.o.forward(m.v.forward(x)).values();
    auto got = y.values();
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  }
  SUBCASE("rows sum to one and the output keeps its shape") {
    MultiHeadSelfAttention m(6, 3, rng);
    Tensor w;
    auto y = m.forward(randn({2, 5, 6}, rng), Mask{1, 1, 1, 1, 1, 1, 1, 0, 0, 0}, &w);
    CHECK(y.shape() == Shape{2, 5, 6});
    auto a = w.values();
    for (std::size_t row = 0; row < 2 * 3 * 5; ++row) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j)
        total += a[row * 5 + j];
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
  SUBCASE("direct formula, one head, d=2, T=3") {
    MultiHeadSelfAttention m(2, 1, rng);
    auto x = randn({1, 3, 2}, rng);
    auto y = m.forward(x, Mask(3, 1)).values();
    auto proj = [&](const Linear &l, int t, int o) {
      double acc = l.bias.defined() ? l.bias.data()[o] : 0.0;
      for (int i = 0; i < 2; ++i)
        acc += x.data()[t * 2 + i] * l.weight.data()[i * 2 + o];
      return acc;
    };
    for (int t = 0; t < 3; ++t) {
      double s[3], mx = -1e300, z = 0.0;
      for (int u = 0; u < 3; ++u) {
        s[u] = (proj(m.q, t, 0) * proj(m.k, u, 0) + proj(m.q, t, 1) * proj(m.k, u, 1)) /
               std::sqrt(2.0);
        mx = std::max(mx, s[u]);
      }
      for (double v : s)
        z += std::exp(v - mx);
      double mixed[2] = {0, 0};
      for (int u = 0; u < 3; ++u)
        for (int c = 0; c < 2; ++c)
          mixed[c] += std::exp(s[u] - mx) / z * proj(m.v, u, c);
      for (int o = 0; o < 2; ++o) {
        double out = m.o.bias.data()[o];
        for (int c = 0; c < 2; ++c)
          out += mixed[c] * m.o.weight.data()[c * 2 + o];
        CHECK(std::abs(y[t * 2 + o] - out) < 1e-12);
      }
    }
  }
  SUBCASE("heads must divide the width") {
    CHECK_THROWS_AS(MultiHeadSelfAttention(6, 4, rng), ShapeError);
  }
}

TEST_CASE("bi-GRU") {
  Rng rng(8);
  SUBCASE("zero input and zero biases keep the state at zero") {
    BiGru gru(3, 4, rng);
    ParameterList ps;
    gru.collect("", ps);
    for (auto &p : ps)
      if (p.name.ends_with("bias"))
        std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    auto out = gru.forward(Tensor::zeros({2, 5, 3}), Mask(10, 1));
    for (double v : out.outputs.values())
      CHECK(v == 0.0);
  }
  SUBCASE("single step: each direction sees the same input") {
    BiGru gru(2, 3, rng);
    gru.bwd = gru.fwd;
    auto out = gru.forward(randn({1, 1, 2}, rng), Mask{1}).final.values();
    for (int i = 0; i < 3; ++i)
      CHECK(out[i] == out[3 + i]);
  }
  SUBCASE("two steps, h=1, against the gate equations") {
    BiGru gru(1, 1, rng);
    auto x = Tensor::from({1, 2, 1}, {0.8, -1.3});
    auto out = gru.forward(x, Mask{1, 1});
    auto run = [&](const GruDirection &d, double xt, double h) {
      const auto &wi = d.input.weight.data(), &bi = d.input.bias.data();
      const auto &wh = d.hidden.weight.data(), &bh = d.hidden.bias.data();
      const double r = sig(xt * wi[0] + bi[0] + h * wh[0] + bh[0]);
      const double z = sig(xt * wi[1] + bi[1] + h * wh[1] + bh[1]);
      const double n = std::tanh(xt * wi[2] + bi[2] + r * (h * wh[2] + bh[2]));
      return (1 - z) * n + z * h;
    };
    const double f1 = run(gru.fwd, 0.8, 0.0), f2 = run(gru.fwd, -1.3, f1);
    const double b2 = run(gru.bwd, -1.3, 0.0), b1 = run(gru.bwd, 0.8, b2);
    auto o = out.outputs.values();
    CHECK(std::abs(o[0] - f1) < 1e-12);
    CHECK(std::abs(o[1] - b1) < 1e-12);
    CHECK(std::abs(o[2] - f2) < 1e-12);
    CHECK(std::abs(o[3] - b2) < 1e-12);
    auto fin = out.final.values();
    CHECK(std::abs(fin[0] - f2) < 1e-12);
    CHECK(std::abs(fin[1] - b1) < 1e-12);
  }
  SUBCASE("reversed input with swapped directions mirrors the outputs") {
    BiGru gru(3, 2, rng);
    BiGru swapped = gru;
    std::swap(swapped.fwd, swapped.bwd);
    auto x = randn({1, 4, 3}, rng);
    std::vector<double> rev;
    for (int t = 3; t >= 0; --t)
      for (int c = 0; c < 3; ++c)
        rev.push_back(x.data()[t * 3 + c]);
    auto a = gru.forward(x, Mask(4, 1)).outputs.values();
    auto b = swapped.forward(Tensor::from({1, 4, 3}, rev), Mask(4, 1)).outputs.values();
    for (int t = 0; t < 4; ++t)
      for (int c = 0; c < 2; ++c) {
        CHECK(a[t * 4 + c] == b[(3 - t) * 4 + 2 + c]);     // forward vs swapped backward
        CHECK(a[t * 4 + 2 + c] == b[(3 - t) * 4 + c]);
      }
  }
  SUBCASE("padding holds the forward state and zeroes the backward one") {
    BiGru gru(2, 2, rng);
    auto x = randn({1, 3, 2}, rng);
    auto full = gru.forward(slice(x, 1, 0, 2), Mask{1, 1});
    auto padded = gru.forward(x, Mask{1, 1, 0});
    CHECK(padded.final.values() == full.final.values());
    auto o = padded.outputs.values();
    CHECK(o[2 * 4 + 0] == o[1 * 4 + 0]);
    CHECK(o[2 * 4 + 2] == 0.0);
  }
}
