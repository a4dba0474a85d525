// SPDX-License-Identifier: Apache-2.0
#include "paracnn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace paracnn {

std::string to_string(TwinMode mode) {
  switch (mode) {
  case TwinMode::none:
    return "none";
  case TwinMode::l2:
    return "l2";
  case TwinMode::adversarial:
    return "adversarial";
  case TwinMode::l2_plus_adversarial:
    return "l2_plus_adversarial";
  }
  return "none";
}

TwinMode parse_twin_mode(std::string_view text) {
  for (auto m : {TwinMode::none, TwinMode::l2, TwinMode::adversarial,
                 TwinMode::l2_plus_adversarial})
    if (text == to_string(m))
      return m;
  throw std::invalid_argument("unknown twin mode '" + std::string(text) +
                              "' (none, l2, adversarial, l2_plus_adversarial)");
}

std::string to_string(ReverseScope scope) {
  return scope == ReverseScope::paragraph ? "paragraph" : "sentence";
}

ReverseScope parse_reverse_scope(std::string_view text) {
  if (text == "paragraph")
    return ReverseScope::paragraph;
  if (text == "sentence")
    return ReverseScope::sentence;
  throw std::invalid_argument("unknown reversal scope '" + std::string(text) +
                              "' (paragraph, sentence)");
}

void TwinConfig::validate() const {
  if (lambda_l2 < 0.0 || lambda_adv < 0.0)
    throw std::invalid_argument("twin coefficients must be non-negative");
  if (critic_steps < 1)
    throw std::invalid_argument("critic_steps must be at least 1");
  if (!(clip > 0.0))
    throw std::invalid_argument("critic clip must be positive");
  if (critic_lr <= 0.0 || critic_hidden == 0)
    throw std::invalid_argument("critic lr and hidden size must be positive");
}

void TrainConfig::validate() const {
  if (batch_size == 0)
    throw std::invalid_argument("batch_size must be positive");
  if (!(lr > 0.0) || !(rms_alpha >= 0.0 && rms_alpha < 1.0) || !(rms_eps > 0.0))
    throw std::invalid_argument("RMSprop needs lr > 0, 0 <= alpha < 1, eps > 0");
}

// ---------------------------------------------------------------------------

RmsProp::RmsProp(ParameterList params, double lr, double alpha, double eps)
    : params_(std::move(params)), lr_(lr), alpha_(alpha), eps_(eps) {
  for (const auto &p : params_)
    avg_.emplace_back(p.tensor.numel(), 0.0);
}

void RmsProp::step() {
  for (const auto &p : params_) {
    if (!p.tensor.has_grad())
      continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g))
        throw NonFiniteGradient("non-finite gradient in " + p.name);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    auto &v = avg_[i];
    auto data = t.data();
    if (!t.has_grad()) {
      for (auto &x : v)
        x = alpha_ * x;
      continue;
    }
    auto grad = std::as_const(t).grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double g = grad[j];
      v[j] = alpha_ * v[j] + (1.0 - alpha_) * g * g;
      data[j] -= lr_ * g / (std::sqrt(v[j]) + eps_);
    }
  }
  ++steps_;
}

void RmsProp::zero_grad() {
  for (const auto &p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> reversal_permutation(const ParagraphBatch &batch,
                                              ReverseScope scope) {
  std::vector<std::size_t> perm(batch.positions());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto reverse_run = [&](const std::vector<std::size_t> &valid) {
    for (std::size_t t = 0; t < valid.size(); ++t)
      perm[valid[t]] = valid[valid.size() - 1 - t];
  };
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::vector<std::size_t> valid;
    for (std::size_t j = 0; j < batch.max_sentences; ++j) {
      for (std::size_t i = 0; i < batch.max_words; ++i) {
        const auto at = batch.index(b, j, i);
        if (batch.mask[at])
          valid.push_back(at);
      }
      if (scope == ReverseScope::sentence) {
        reverse_run(valid);
        valid.clear();
      }
    }
    reverse_run(valid);
  }
  return perm;
}

ParagraphBatch reverse_targets(const ParagraphBatch &batch, ReverseScope scope) {
  const auto perm = reversal_permutation(batch, scope);
  ParagraphBatch out = batch;
  for (std::size_t p = 0; p < perm.size(); ++p)
    out.tokens[perm[p]] = batch.tokens[p];
  return out;
}

std::size_t SequenceLayout::valid() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

SequenceLayout sequence_layout(const ParagraphBatch &batch, ReverseScope scope) {
  const auto perm = reversal_permutation(batch, scope);
  SequenceLayout out;
  out.batch = batch.batch;
  std::vector<std::vector<std::size_t>> valid(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t j = 0; j < batch.max_sentences; ++j)
      for (std::size_t i = 0; i < batch.max_words; ++i)
        if (batch.mask[batch.index(b, j, i)])
          valid[b].push_back(batch.index(b, j, i));
    out.length = std::max(out.length, valid[b].size());
  }
  if (out.length == 0)
    throw EmptyLossError("batch has no valid positions");
  const std::size_t l = out.length;
  out.forward_rows.assign(batch.batch * l, -1);
  out.backward_rows.assign(batch.batch * l, -1);
  out.mask.assign(batch.batch * l, 0);
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t t = 0; t < valid[b].size(); ++t) {
      out.forward_rows[b * l + t] = static_cast<std::int64_t>(valid[b][t]);
      out.backward_rows[b * l + t] = static_cast<std::int64_t>(perm[valid[b][t]]);
      out.mask[b * l + t] = 1;
    }
  return out;
}

Tensor gather_sequence(const Tensor &hidden, std::span<const std::int64_t> rows,
                       std::size_t batch, std::size_t length) {
  const std::size_t channels = hidden.shape().back();
  Tensor flat = reshape(hidden, {hidden.numel() / channels, channels});
  return reshape(gather_rows(flat, rows), {batch, length, channels});
}

Tensor twin_l2_loss(const Tensor &fwd, const Tensor &bwd, const Mask &mask) {
  if (fwd.shape() != bwd.shape() || fwd.rank() != 3)
    throw ShapeError("twin_l2_loss: sequences " + to_string(fwd.shape()) +
                     " and " + to_string(bwd.shape()) + " are not aligned");
  const std::size_t g = fwd.dim(0), t = fwd.dim(1), c = fwd.dim(2);
  if (mask.size() != g * t)
    throw ShapeError("twin_l2_loss: mask has " + std::to_string(mask.size()) +
                     " entries for " + std::to_string(g * t) + " positions");
  std::vector<double> weights(g * t * c, 0.0);
  std::size_t valid = 0;
  for (std::size_t p = 0; p < g * t; ++p)
    if (mask[p]) {
      ++valid;
      std::fill_n(weights.begin() + static_cast<std::ptrdiff_t>(p * c), c, 1.0);
    }
  if (valid == 0)
    throw EmptyLossError("twin_l2_loss: every position is masked");
  Tensor w = Tensor::from({g, t, c}, std::move(weights));
  Tensor sq = mul(square(sub(fwd, bwd)), w);
  return scale(sum(sq), 1.0 / static_cast<double>(valid * c));
}

// ---------------------------------------------------------------------------

Critic::Critic(std::size_t input_dim, std::size_t hidden_dim, Rng &rng)
    : gru(input_dim, hidden_dim, rng), head(2 * hidden_dim, 1, rng) {}

Tensor Critic::score(const Tensor &seq, const Mask &mask) const {
  auto out = gru.forward(seq, mask);
  return reshape(head.forward(out.final), {seq.dim(0)});
}

void Critic::clip(double c) {
  for (auto &p : parameters()) {
    Tensor t = p.tensor;
    for (auto &v : t.data())
      v = std::clamp(v, -c, c);
  }
}

double Critic::max_abs_weight() const {
  double m = 0.0;
  for (const auto &p : parameters())
    for (double v : p.tensor.data())
      m = std::max(m, std::abs(v));
  return m;
}

ParameterList Critic::parameters() const {
  ParameterList out;
  gru.collect("gru", out);
  head.collect("head", out);
  return out;
}

Tensor critic_loss(const Critic &critic, const Tensor &fwd, const Tensor &bwd,
                   const Mask &mask) {
  return sub(mean(critic.score(fwd, mask)), mean(critic.score(bwd, mask)));
}

Tensor adversarial_generator_loss(const Critic &critic, const Tensor &fwd,
                                  const Mask &mask) {
  return scale(mean(critic.score(fwd, mask)), -1.0);
}

double critic_step(Critic &critic, const Tensor &fwd, const Tensor &bwd,
                   const Mask &mask, RmsProp &opt, double clip) {
  opt.zero_grad();
  Tensor loss = critic_loss(critic, fwd.detach(), bwd.detach(), mask);
  const double value = loss.item();
  loss.backward();
  opt.step();
  critic.clip(clip);
  return value;
}

double mle_step(const ParaCnn &model, const ParagraphBatch &batch,
                const FeatureBatch &features, RmsProp &opt) {
  opt.zero_grad();
  Tensor loss = model.loss(model.paragraph_forward(batch, features), batch);
  const double value = loss.item();
  if (!std::isfinite(value))
    throw TrainingDiverged("cross-entropy is " + std::to_string(value));
  loss.backward();
  opt.step();
  return value;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Build> auto seeded(std::uint64_t seed, std::uint64_t salt, Build build) {
  Rng rng(Rng::derive(seed, salt));
  return build(rng);
}

std::size_t valid_count(const ParagraphBatch &batch) {
  return static_cast<std::size_t>(
      std::count(batch.mask.begin(), batch.mask.end(), 1));
}

} // namespace

TwinTrainer::TwinTrainer(const ModelConfig &model, const TwinConfig &twin,
                         const TrainConfig &train, std::uint64_t seed)
    : fwd(seeded(seed, stream::forward_init,
                 [&](Rng &r) { return ParaCnn(model, r); })),
      bwd(seeded(seed, stream::backward_init,
                 [&](Rng &r) { return ParaCnn(model, r); })),
      critic(seeded(seed, stream::critic_init,
                    [&](Rng &r) {
                      return Critic(model.conv_channels, twin.critic_hidden, r);
                    })),
      count(seeded(seed, stream::count_init,
                   [&](Rng &r) {
                     return SentenceCountPredictor(
                         model.projection_dim, model.count_hidden1,
                         model.count_hidden2, model.max_sentences, r);
                   })),
      model_config_(model), twin_(twin), train_(train), seed_(seed) {
  twin_.validate();
  train_.validate();
  opt_fwd = RmsProp(fwd.parameters(), train.lr, train.rms_alpha, train.rms_eps);
  opt_bwd = RmsProp(bwd.parameters(), train.lr, train.rms_alpha, train.rms_eps);
  opt_critic = RmsProp(critic.parameters(), twin.critic_lr, train.rms_alpha,
                       train.rms_eps);
  opt_count = RmsProp(count.parameters(), train.lr, train.rms_alpha,
                      train.rms_eps);
  critic.clip(twin_.clip);
}

ParameterList TwinTrainer::parameters() const {
  ParameterList out;
  auto add = [&](const std::string &prefix, const ParameterList &list) {
    for (const auto &p : list)
      out.push_back({prefix + p.name, p.tensor});
  };
  add("fwd.", fwd.parameters());
  add("bwd.", bwd.parameters());
  add("critic.", critic.parameters());
  add("count.", count.parameters());
  return out;
}

std::vector<std::pair<std::string, RmsProp *>> TwinTrainer::optimizers() {
  return {{"fwd", &opt_fwd},
          {"bwd", &opt_bwd},
          {"critic", &opt_critic},
          {"count", &opt_count}};
}

EpochStats TwinTrainer::train_batch(const ParagraphBatch &batch,
                                    const FeatureBatch &features) {
  EpochStats stats;
  opt_fwd.zero_grad();
  opt_bwd.zero_grad();
  opt_count.zero_grad();

  auto out_f = fwd.paragraph_forward(batch, features);
  Tensor ce_f = fwd.loss(out_f, batch);
  stats.ce_fwd = ce_f.item();
  Tensor total = ce_f;

  const bool twin = twin_.mode != TwinMode::none;
  if (twin) {
    const auto reversed = reverse_targets(batch, twin_.reverse);
    auto out_b = bwd.paragraph_forward(reversed, features);
    Tensor ce_b = bwd.loss(out_b, reversed);
    stats.ce_bwd = ce_b.item();

    const auto layout = sequence_layout(batch, twin_.reverse);
    Tensor hf = gather_sequence(out_f.hidden, layout.forward_rows, layout.batch,
                                layout.length);
    Tensor hb = gather_sequence(out_b.hidden.detach(), layout.backward_rows,
                                layout.batch, layout.length);

    if (twin_.uses_critic()) {
      Tensor hf_fixed = hf.detach();
      double acc = 0.0;
      for (std::size_t s = 0; s < twin_.critic_steps; ++s) {
        acc += critic_step(critic, hf_fixed, hb, layout.mask, opt_critic,
                           twin_.clip);
        ++stats.critic_updates;
        const double w = critic.max_abs_weight();
        stats.max_critic_weight = std::max(stats.max_critic_weight, w);
        if (on_critic_step)
          on_critic_step(w);
      }
      stats.critic_loss = acc / static_cast<double>(twin_.critic_steps);
      opt_critic.zero_grad();
    }

    if (twin_.uses_l2()) {
      Tensor l2 = twin_l2_loss(hf, hb, layout.mask);
      stats.twin_l2 = l2.item();
      total = add(total, scale(l2, twin_.lambda_l2));
    } else {
      NoGradGuard guard;
      stats.twin_l2 = twin_l2_loss(hf.detach(), hb, layout.mask).item();
    }
    if (twin_.uses_critic())
      total = add(total,
                  scale(adversarial_generator_loss(critic, hf, layout.mask),
                        twin_.lambda_adv));
    total = add(total, ce_b);
  }

  if (train_.train_count_predictor) {
    std::vector<std::int64_t> targets;
    for (auto c : batch.sentence_counts)
      targets.push_back(static_cast<std::int64_t>(c) - 1);
    Mask all(targets.size(), 1);
    Tensor cl = cross_entropy(count.forward(out_f.global.detach()), targets, all);
    stats.count_loss = cl.item();
    total = add(total, cl);
  }

  if (!std::isfinite(total.item()))
    throw TrainingDiverged("loss became " + std::to_string(total.item()) +
                           " (ce_fwd " + std::to_string(stats.ce_fwd) + ")");
  total.backward();
  opt_fwd.step();
  if (twin)
    opt_bwd.step();
  if (train_.train_count_predictor)
    opt_count.step();
  if (twin_.uses_critic())
    opt_critic.zero_grad();
  stats.generator_updates = 1;
  return stats;
}

EpochStats TwinTrainer::train_epoch(const std::vector<Example> &data) {
  if (data.empty())
    throw std::invalid_argument("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed_, stream::shuffle + epoch_));
  rng.shuffle(order);

  EpochStats epoch;
  double ce_f = 0.0, ce_b = 0.0, l2 = 0.0, critic_acc = 0.0, count_acc = 0.0;
  std::size_t tokens = 0, batches = 0;
  for (std::size_t at = 0; at < order.size(); at += train_.batch_size) {
    const std::size_t end = std::min(order.size(), at + train_.batch_size);
    auto [batch, features] = make_batch(
        data, std::span<const std::size_t>(order.data() + at, end - at));
    const auto s = train_batch(batch, features);
    const auto n = valid_count(batch);
    tokens += n;
    ++batches;
    ce_f += s.ce_fwd * static_cast<double>(n);
    if (s.ce_bwd)
      ce_b += *s.ce_bwd * static_cast<double>(n);
    if (s.twin_l2)
      l2 += *s.twin_l2;
    if (s.critic_loss)
      critic_acc += *s.critic_loss;
    if (s.count_loss)
      count_acc += *s.count_loss;
    epoch.critic_updates += s.critic_updates;
    epoch.generator_updates += s.generator_updates;
    epoch.max_critic_weight = std::max(epoch.max_critic_weight, s.max_critic_weight);
  }
  ++epoch_;
  epoch.epoch = epoch_;
  const double nb = static_cast<double>(batches);
  epoch.ce_fwd = ce_f / static_cast<double>(tokens);
  if (twin_.mode != TwinMode::none) {
    epoch.ce_bwd = ce_b / static_cast<double>(tokens);
    epoch.twin_l2 = l2 / nb;
  }
  if (twin_.uses_critic())
    epoch.critic_loss = critic_acc / nb;
  if (train_.train_count_predictor)
    epoch.count_loss = count_acc / nb;
  epoch.wallclock = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - start)
                        .count();
  return epoch;
}

double TwinTrainer::evaluate_ce(const std::vector<Example> &data) const {
  if (data.empty())
    throw std::invalid_argument("evaluation set is empty");
  NoGradGuard guard;
  double acc = 0.0;
  std::size_t tokens = 0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t at = 0; at < order.size(); at += train_.batch_size) {
    const std::size_t end = std::min(order.size(), at + train_.batch_size);
    auto [batch, features] = make_batch(
        data, std::span<const std::size_t>(order.data() + at, end - at));
    const auto n = valid_count(batch);
    acc += fwd.loss(fwd.paragraph_forward(batch, features), batch).item() *
           static_cast<double>(n);
    tokens += n;
  }
  return acc / static_cast<double>(tokens);
}

} // namespace paracnn
