// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"
#include "paracnn/training.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace paracnn;
using namespace fixtures;

namespace {

ParagraphBatch batch_of(const std::vector<EncodedParagraph> &ps) {
  std::vector<const EncodedParagraph *> ptrs;
  for (const auto &p : ps)
    ptrs.push_back(&p);
  return ParagraphBatch::from(ptrs);
}

std::vector<Example> random_examples(const ModelConfig &c, std::size_t n, Rng &rng) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.id = "ex" + std::to_string(i);
    e.features = random_features(1 + rng.below(3), c.visual_dim, rng);
    e.encoded = random_paragraph(c, rng);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::vector<double>> snapshot_values(const ParameterList &ps) {
  std::vector<std::vector<double>> out;
  for (const auto &p : ps)
    out.push_back(p.tensor.values());
  return out;
}

} // namespace

TEST_CASE("RMSprop") {
  SUBCASE("hand-evaluated first step") {
    auto p = Tensor::from({1}, {0.0}, true);
    RmsProp opt({{"p", p}}, 0.1, 0.9, 1e-8);
    p.grad()[0] = 1.0;
    opt.step();
    CHECK(opt.averages()[0][0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(p.data()[0] == doctest::Approx(-0.1 / (std::sqrt(0.1) + 1e-8)).epsilon(1e-15));
    CHECK(std::abs(p.data()[0] + 0.31623) < 1e-5);
  }
  SUBCASE("zero gradient leaves parameters and decays the average") {
    auto p = Tensor::from({2}, {1.5, -2.0}, true);
    RmsProp opt({{"p", p}}, 0.1, 0.9, 1e-8);
    opt.averages()[0] = {0.4, 0.2};
    p.grad()[0] = 0.0;
    p.grad()[1] = 0.0;
    opt.step();
    CHECK(p.values() == std::vector<double>{1.5, -2.0});
    CHECK(opt.averages()[0][0] == doctest::Approx(0.36));
    CHECK(opt.averages()[0][1] == doctest::Approx(0.18));
  }
  SUBCASE("a parameter without a gradient behaves as g = 0") {
    auto p = Tensor::from({1}, {3.0}, true);
    RmsProp opt({{"p", p}}, 0.1);
    opt.averages()[0] = {1.0};
    opt.step();
    CHECK(p.data()[0] == 3.0);
    CHECK(opt.averages()[0][0] == doctest::Approx(0.9));
  }
  SUBCASE("non-finite gradients are rejected untouched") {
    auto p = Tensor::from({2}, {1.0, 2.0}, true);
    RmsProp opt({{"p", p}}, 0.1);
    p.grad()[0] = 1.0;
    p.grad()[1] = std::nan("");
    CHECK_THROWS_AS(opt.step(), NonFiniteGradient);
    CHECK(p.values() == std::vector<double>{1.0, 2.0});
    CHECK(opt.averages()[0] == std::vector<double>{0.0, 0.0});
    CHECK(opt.steps() == 0);
  }
  SUBCASE("identical runs are bit-identical") {
    auto run = [] {
      auto p = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
      RmsProp opt({{"p", p}}, 0.01);
      for (int s = 0; s < 20; ++s) {
        opt.zero_grad();
        sum(mul(tanh(p), p)).backward();
        opt.step();
      }
      return p.values();
    };
    CHECK(run() == run());
  }
}

TEST_CASE("target reversal") {
  ModelConfig c = tiny_config(12, 3, 4);
  SUBCASE("valid tokens are reversed in place") {
    EncodedParagraph p;
    p.max_sentences = 1;
    p.max_words = 4;
    p.tokens = {5, 6, 7, token::pad};
    p.mask = {1, 1, 1, 0};
    p.sentence_count = 1;
    auto r = reverse_targets(batch_of({p}));
    CHECK(r.tokens == std::vector<std::int64_t>{7, 6, 5, token::pad});
    CHECK(r.mask == p.mask);
  }
  SUBCASE("mixed padding against a position-list oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<EncodedParagraph> ps{random_paragraph(c, rng), random_paragraph(c, rng)};
      auto batch = batch_of(ps);
      for (auto scope : {ReverseScope::paragraph, ReverseScope::sentence}) {
        auto r = reverse_targets(batch, scope);
        CHECK(r.mask == batch.mask);
        auto expect = batch.tokens;
        for (std::size_t b = 0; b < 2; ++b) {
          std::vector<std::vector<std::size_t>> runs(1);
          for (std::size_t j = 0; j < 3; ++j) {
            for (std::size_t i = 0; i < 4; ++i)
              if (batch.mask[batch.index(b, j, i)])
                runs.back().push_back(batch.index(b, j, i));
            if (scope == ReverseScope::sentence)
              runs.emplace_back();
          }
          for (const auto &run : runs)
            for (std::size_t k = 0; k < run.size(); ++k)
              expect[run[k]] = batch.tokens[run[run.size() - 1 - k]];
        }
        CHECK(r.tokens == expect);
        CHECK(reverse_targets(r, scope).tokens == batch.tokens);
        auto a = batch.tokens, z = r.tokens;
        std::sort(a.begin(), a.end());
        std::sort(z.begin(), z.end());
        CHECK(a == z);
        for (std::size_t i = 0; i < batch.positions(); ++i)
          if (!batch.mask[i])
            CHECK(r.tokens[i] == token::pad);
      }
    }
  }
  SUBCASE("the permutation is an involution") {
    Rng rng(2);
    auto batch = batch_of({random_paragraph(c, rng), random_paragraph(c, rng)});
    for (auto scope : {ReverseScope::paragraph, ReverseScope::sentence}) {
      auto perm = reversal_permutation(batch, scope);
      for (std::size_t i = 0; i < perm.size(); ++i)
        CHECK(perm[perm[i]] == i);
    }
  }
  SUBCASE("aligned rows predict the same token") {
    Rng rng(3);
    auto batch = batch_of({random_paragraph(c, rng), random_paragraph(c, rng, 3)});
    for (auto scope : {ReverseScope::paragraph, ReverseScope::sentence}) {
      auto rev = reverse_targets(batch, scope);
      auto layout = sequence_layout(batch, scope);
      CHECK(layout.valid() ==
            static_cast<std::size_t>(std::count(batch.mask.begin(), batch.mask.end(), 1)));
      for (std::size_t k = 0; k < layout.forward_rows.size(); ++k) {
        if (!layout.mask[k]) {
          CHECK(layout.forward_rows[k] == -1);
          continue;
        }
        CHECK(rev.tokens[static_cast<std::size_t>(layout.backward_rows[k])] ==
              batch.tokens[static_cast<std::size_t>(layout.forward_rows[k])]);
      }
    }
  }
}

TEST_CASE("twin L2 loss") {
  Rng rng(4);
  auto f = random_features(6, 5, rng);
  auto f3 = reshape(f, {2, 3, 5});
  Mask m{1, 1, 0, 1, 0, 0};
  CHECK(twin_l2_loss(f3, f3, m).item() == 0.0);
  CHECK(twin_l2_loss(f3, add_scalar(f3, 0.3), m).item() ==
        doctest::Approx(0.09).epsilon(1e-14));
  auto g3 = reshape(random_features(6, 5, rng), {2, 3, 5});
  double total = 0.0;
  for (std::size_t p = 0; p < 6; ++p)
    if (m[p])
      for (std::size_t ch = 0; ch < 5; ++ch) {
        const double d = f3.data()[p * 5 + ch] - g3.data()[p * 5 + ch];
        total += d * d;
      }
  CHECK(std::abs(twin_l2_loss(f3, g3, m).item() - total / 15.0) < 1e-12);
  CHECK_THROWS_AS(twin_l2_loss(f3, reshape(f, {3, 2, 5}), m), ShapeError);
  CHECK_THROWS_AS(twin_l2_loss(f3, g3, Mask(6, 0)), EmptyLossError);
}

TEST_CASE("Wasserstein critic") {
  Rng rng(5);
  Critic critic(4, 3, rng);
  auto f = reshape(random_features(6, 4, rng), {2, 3, 4});
  auto b = reshape(random_features(6, 4, rng), {2, 3, 4});
  Mask m{1, 1, 1, 1, 1, 0};

  SUBCASE("loss is the difference of mean scores") {
    auto sf = critic.score(f, m).values(), sb = critic.score(b, m).values();
    const double direct = (sf[0] + sf[1]) / 2 - (sb[0] + sb[1]) / 2;
    CHECK(critic_loss(critic, f, b, m).item() == doctest::Approx(direct).epsilon(1e-15));
    CHECK(adversarial_generator_loss(critic, f, m).item() ==
          doctest::Approx(-(sf[0] + sf[1]) / 2).epsilon(1e-15));
  }
  SUBCASE("a constant critic gives zero loss and no generator gradient") {
    std::fill(critic.head.weight.data().begin(), critic.head.weight.data().end(), 0.0);
    CHECK(critic_loss(critic, f, b, m).item() == 0.0);
    critic.head.bias.data()[0] = 0.0;
    auto h = Tensor::from(f.shape(), f.values(), true);
    Tensor loss = adversarial_generator_loss(critic, h, m);
    CHECK(loss.item() == 0.0);
    loss.backward();
    for (double g : h.grad())
      CHECK(g == 0.0);
  }
  SUBCASE("raising the forward score lowers the generator loss") {
    const double before = adversarial_generator_loss(critic, f, m).item();
    critic.head.bias.data()[0] += 0.5;
    CHECK(adversarial_generator_loss(critic, f, m).item() == doctest::Approx(before - 0.5));
  }
  SUBCASE("generator gradient matches finite differences through the critic") {
    auto h = Tensor::from(f.shape(), f.values(), true);
    CHECK(grad_check([&] { return adversarial_generator_loss(critic, h, m); }, {h}) < 1e-4);
  }
  SUBCASE("every critic step ends inside the clip box") {
    RmsProp opt(critic.parameters(), 0.05);
    for (int s = 0; s < 10; ++s) {
      critic_step(critic, f, b, m, opt, 0.01);
      CHECK(critic.max_abs_weight() <= 0.01);
    }
  }
}

TEST_CASE("maximum likelihood steps") {
  Rng rng(6);
  ModelConfig c = tiny_config(20, 2, 5);
  ParaCnn model(c, rng);
  auto p = random_paragraph(c, rng, 2);
  auto batch = batch_of({p});
  auto f = FeatureBatch::single(random_features(2, c.visual_dim, rng));
  const double initial = model.loss(model.paragraph_forward(batch, f), batch).item();
  CHECK(std::abs(initial - std::log(20.0)) < 0.1 * std::log(20.0));
  RmsProp opt(model.parameters(), 4e-4);
  double last = initial;
  for (int s = 0; s < 50; ++s)
    last = mle_step(model, batch, f, opt);
  CHECK(last < initial);
  CHECK(model.loss(model.paragraph_forward(batch, f), batch).item() < initial);
}

TEST_CASE("twin trainer") {
  Rng rng(7);
  ModelConfig c = tiny_config(12, 2, 4);
  auto data = random_examples(c, 10, rng);
  TrainConfig tc;
  tc.batch_size = 4;

  SUBCASE("mode none is plain maximum likelihood") {
    TwinTrainer trainer(c, TwinConfig{}, tc, 11);
    Rng init(Rng::derive(11, stream::forward_init));
    ParaCnn manual(c, init);
    RmsProp opt(manual.parameters(), tc.lr, tc.rms_alpha, tc.rms_eps);
    const auto bwd_before = snapshot_values(trainer.bwd.parameters());
    for (std::size_t epoch = 0; epoch < 2; ++epoch) {
      trainer.train_epoch(data);
      std::vector<std::size_t> order(data.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle(Rng::derive(11, stream::shuffle + epoch));
      shuffle.shuffle(order);
      for (std::size_t at = 0; at < order.size(); at += 4) {
        const std::size_t end = std::min(order.size(), at + 4);
        auto [batch, feats] =
            make_batch(data, std::span<const std::size_t>(order.data() + at, end - at));
        mle_step(manual, batch, feats, opt);
      }
    }
    CHECK(snapshot_values(trainer.fwd.parameters()) == snapshot_values(manual.parameters()));
    CHECK(snapshot_values(trainer.bwd.parameters()) == bwd_before);
  }
  SUBCASE("l2 with a zero coefficient follows the same forward trajectory") {
    TwinConfig l2;
    l2.mode = TwinMode::l2;
    l2.lambda_l2 = 0.0;
    TwinTrainer a(c, TwinConfig{}, tc, 3), b(c, l2, tc, 3);
    for (int e = 0; e < 2; ++e) {
      auto sa = a.train_epoch(data), sb = b.train_epoch(data);
      CHECK(sa.ce_fwd == sb.ce_fwd);
      CHECK(sb.twin_l2.has_value());
    }
    CHECK(snapshot_values(a.fwd.parameters()) == snapshot_values(b.fwd.parameters()));
  }
  SUBCASE("adversarial schedule and clipping") {
    TwinConfig tw;
    tw.mode = TwinMode::l2_plus_adversarial;
    tw.critic_hidden = 6;
    TwinTrainer trainer(c, tw, tc, 5);
    CHECK(trainer.critic.max_abs_weight() <= tw.clip);
    std::size_t steps = 0;
    bool within = true;
    trainer.on_critic_step = [&](double w) {
      ++steps;
      within = within && w <= tw.clip;
    };
    auto stats = trainer.train_epoch(data);
    CHECK(within);
    CHECK(stats.generator_updates == 3);
    CHECK(stats.critic_updates == 15);
    CHECK(steps == 15);
    CHECK(stats.max_critic_weight <= tw.clip);
    CHECK(stats.critic_loss.has_value());
    CHECK(stats.ce_bwd.has_value());
  }
  SUBCASE("every twin mode trains") {
    for (auto mode : {TwinMode::l2, TwinMode::adversarial, TwinMode::l2_plus_adversarial}) {
      TwinConfig tw;
      tw.mode = mode;
      tw.critic_hidden = 4;
      TwinTrainer trainer(c, tw, tc, 9);
      const auto before = snapshot_values(trainer.bwd.parameters());
      auto s = trainer.train_epoch(data);
      CHECK(std::isfinite(s.ce_fwd));
      CHECK(snapshot_values(trainer.bwd.parameters()) != before);
      CHECK(s.critic_updates == (mode == TwinMode::l2 ? 0u : 15u));
    }
  }
  SUBCASE("parameter registry names every component") {
    TwinTrainer trainer(c, TwinConfig{}, tc, 1);
    std::set<std::string> prefixes;
    for (const auto &p : trainer.parameters())
      prefixes.insert(p.name.substr(0, p.name.find('.')));
    CHECK(prefixes == std::set<std::string>{"fwd", "bwd", "critic", "count"});
  }
  SUBCASE("bad configurations") {
    TwinConfig tw;
    tw.critic_steps = 0;
    CHECK_THROWS(TwinTrainer(c, tw, tc, 1));
    CHECK_THROWS(parse_twin_mode("gan"));
    CHECK(parse_twin_mode("l2_plus_adversarial") == TwinMode::l2_plus_adversarial);
  }
}
