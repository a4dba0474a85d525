// SPDX-License-Identifier: Apache-2.0
#include "paracnn/cli.hpp"

#include "paracnn/training.hpp"

#include <cmath>
#include <limits>

namespace paracnn {

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto &x : v)
    x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<Tensor> tensors_of(const ParameterList &params) {
  std::vector<Tensor> out;
  for (const auto &p : params)
    out.push_back(p.tensor);
  return out;
}

std::size_t count_of(const std::vector<Tensor> &ts) {
  std::size_t n = 0;
  for (const auto &t : ts)
    n += t.numel();
  return n;
}

/// Finite-difference step; see grad_check_refined.
constexpr double kEps = 1e-4;

double min_abs(const Tensor &t) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.data())
    m = std::min(m, std::abs(v));
  return m;
}

/// A random paragraph batch for the tiny model.
std::pair<ParagraphBatch, FeatureBatch> tiny_batch(const ModelConfig &c, Rng &rng) {
  const std::size_t b = 2, regions = 3;
  std::vector<EncodedParagraph> paras(b);
  std::vector<Tensor> feats;
  for (std::size_t i = 0; i < b; ++i) {
    auto &p = paras[i];
    p.max_sentences = c.max_sentences;
    p.max_words = c.max_words;
    p.tokens.assign(c.max_sentences * c.max_words, token::pad);
    p.mask.assign(c.max_sentences * c.max_words, 0);
    p.sentence_count = c.max_sentences;
    for (std::size_t j = 0; j < p.sentence_count; ++j) {
      const std::size_t words = 2 + rng.below(c.max_words - 2);
      for (std::size_t w = 0; w < words; ++w) {
        p.tokens[j * c.max_words + w] = static_cast<std::int64_t>(
            token::special_count + rng.below(c.vocab_size - token::special_count));
        p.mask[j * c.max_words + w] = 1;
      }
      p.tokens[j * c.max_words + words] = token::eos;
      p.mask[j * c.max_words + words] = 1;
    }
    feats.push_back(random_tensor({regions - i, c.visual_dim}, rng));
  }
  std::vector<const EncodedParagraph *> pp;
  std::vector<const Tensor *> fp;
  for (std::size_t i = 0; i < b; ++i) {
    pp.push_back(&paras[i]);
    fp.push_back(&feats[i]);
  }
  return {ParagraphBatch::from(pp), FeatureBatch::from(fp)};
}

} // namespace

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.max_sentences = 2;
  c.max_words = 4;
  c.visual_dim = 8;
  c.projection_dim = 8;
  c.topic_dim = 8;
  c.embed_dim = 8;
  c.context_dim = 8;
  c.conv_channels = 8;
  c.topic_kernel = 5;
  c.word_kernel = 5;
  c.topic_depth = 2;
  c.word_depth = 3;
  c.attention_layers = {1, 2};
  c.attention_heads = 2;
  c.count_hidden1 = 8;
  c.count_hidden2 = 8;
  return c;
}

std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradcheckEntry> out;
  auto record = [&](std::string name, const std::function<Tensor()> &f,
                    const std::vector<Tensor> &inputs) {
    out.push_back({std::move(name), grad_check_refined(f, inputs, kEps), count_of(inputs)});
  };

  {
    Linear layer(5, 4, rng);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3, 4}, rng).detach();
    record("layer.linear", [&] { return sum(mul(layer.forward(x), w)); },
           {x, layer.weight, layer.bias});
  }
  {
    CausalConvBlock block(4, 4, 3, true, rng);
    Tensor x = random_tensor({2, 5, 4}, rng);
    Rng p(seed + 1);
    Tensor w = random_tensor({2, 5, 4}, p).detach();
    record("layer.causal_conv", [&] { return sum(mul(block.forward(x), w)); },
           {x, block.weight, block.bias});
  }
  {
    Embedding emb(7, 4, rng);
    std::vector<std::int64_t> ids{1, 5, 5, 0, 6};
    Tensor w = random_tensor({5, 4}, rng).detach();
    std::vector<Tensor> params{emb.table, emb.projection.weight, emb.projection.bias};
    record("layer.embedding", [&] { return sum(mul(emb.forward(ids), w)); }, params);
  }
  {
    VisualAttention att(4, 3, 5, rng);
    Tensor q = random_tensor({2, 3, 4}, rng);
    Tensor v = random_tensor({2, 4, 3}, rng);
    Mask mask{1, 1, 1, 1, 1, 1, 0, 0};
    Tensor w = random_tensor({2, 3, 3}, rng).detach();
    record("layer.visual_attention",
           [&] { return sum(mul(att.forward(q, v, mask).context, w)); },
           {q, v, att.query.weight, att.key.weight, att.scorer});
  }
  {
    MultiHeadSelfAttention mhsa(4, 2, rng);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Mask mask{1, 1, 1, 1, 1, 0};
    Tensor w = random_tensor({2, 3, 4}, rng).detach();
    ParameterList params;
    mhsa.collect("", params);
    auto inputs = tensors_of(params);
    inputs.push_back(x);
    record("layer.self_attention",
           [&] { return sum(mul(mhsa.forward(x, mask), w)); }, inputs);
  }
  {
    BiGru gru(3, 4, rng);
    Tensor x = random_tensor({2, 4, 3}, rng);
    Mask mask{1, 1, 1, 1, 1, 1, 0, 0};
    Tensor w = random_tensor({2, 4, 8}, rng).detach();
    Tensor wf = random_tensor({2, 8}, rng).detach();
    ParameterList params;
    gru.collect("", params);
    auto inputs = tensors_of(params);
    inputs.push_back(x);
    record("layer.bigru",
           [&] {
             auto o = gru.forward(x, mask);
             return add(sum(mul(o.outputs, w)), sum(mul(o.final, wf)));
           },
           inputs);
  }
  {
    SentenceCountPredictor count(6, 8, 8, 4, rng);
    // resample until every ReLU input sits clear of its kink
    Tensor g;
    for (double margin = 0.0; margin < 0.05;) {
      g = random_tensor({3, 6}, rng);
      NoGradGuard guard;
      Tensor h1 = count.layer1.forward(g);
      Tensor h2 = count.layer2.forward(relu(h1));
      margin = std::min(min_abs(h1), min_abs(h2));
    }
    std::vector<std::int64_t> targets{0, 3, 1};
    Mask all(3, 1);
    auto inputs = tensors_of(count.parameters());
    inputs.push_back(g);
    record("layer.count_predictor",
           [&] { return cross_entropy(count.forward(g), targets, all); }, inputs);
  }
  {
    Critic critic(4, 3, rng);
    Tensor f = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 3, 4}, rng);
    Mask mask{1, 1, 1, 1, 1, 0};
    auto inputs = tensors_of(critic.parameters());
    inputs.push_back(f);
    inputs.push_back(b);
    record("loss.critic", [&] { return critic_loss(critic, f, b, mask); }, inputs);
    record("loss.adversarial",
           [&] { return adversarial_generator_loss(critic, f, mask); },
           {f, critic.head.weight});
    record("loss.twin_l2", [&] { return twin_l2_loss(f, b, mask); }, {f, b});
  }

  for (auto pooling : {PoolingMode::self_attention, PoolingMode::mean}) {
    ModelConfig c = gradcheck_model_config();
    c.pooling = pooling;
    Rng init(Rng::derive(seed, pooling == PoolingMode::mean ? 11 : 12));
    ParaCnn model(c, init);
    auto [batch, features] = tiny_batch(c, init);
    const std::string prefix =
        pooling == PoolingMode::mean ? "model[mean]." : "model.";
    auto loss = [&] {
      return model.loss(model.paragraph_forward(batch, features), batch);
    };
    GradcheckEntry whole{prefix + "ce_loss", 0.0, 0};
    for (const auto &p : model.parameters()) {
      const double err = grad_check_refined(loss, {p.tensor}, kEps);
      whole.max_rel_error = std::max(whole.max_rel_error, err);
      whole.checked += p.tensor.numel();
      if (pooling == PoolingMode::self_attention ||
          p.name.starts_with("embedding") || p.name.starts_with("topic_input"))
        out.push_back({prefix + p.name, err, p.tensor.numel()});
    }
    out.push_back(whole);
  }
  {
    // twin objective through both tiny networks
    ModelConfig c = gradcheck_model_config();
    Rng init(Rng::derive(seed, 13));
    ParaCnn fwd(c, init), bwd(c, init);
    Critic critic(c.conv_channels, 4, init);
    auto [batch, features] = tiny_batch(c, init);
    const auto reversed = reverse_targets(batch);
    const auto layout = sequence_layout(batch, ReverseScope::paragraph);
    auto loss = [&] {
      auto of = fwd.paragraph_forward(batch, features);
      auto ob = bwd.paragraph_forward(reversed, features);
      Tensor hf = gather_sequence(of.hidden, layout.forward_rows, layout.batch,
                                  layout.length);
      Tensor hb = gather_sequence(ob.hidden.detach(), layout.backward_rows,
                                  layout.batch, layout.length);
      Tensor total = add(fwd.loss(of, batch),
                         twin_l2_loss(hf, hb, layout.mask));
      total = add(total, adversarial_generator_loss(critic, hf, layout.mask));
      return add(total, bwd.loss(ob, reversed));
    };
    record("twin.generator_loss", loss, tensors_of(fwd.parameters()));
    record("twin.backward_ce",
           [&] { return bwd.loss(bwd.paragraph_forward(reversed, features), reversed); },
           tensors_of(bwd.parameters()));
  }
  return out;
}

} // namespace paracnn
