// SPDX-License-Identifier: Apache-2.0
#include "paracnn/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace paracnn {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char *name) {
    if (v == 0)
      throw std::invalid_argument(std::string("model config: ") + name +
                                  " must be positive");
  };
  positive(max_sentences, "max_sentences");
  positive(max_words, "max_words");
  positive(vocab_size, "vocab_size");
  positive(visual_dim, "visual_dim");
  positive(projection_dim, "projection_dim");
  positive(topic_dim, "topic_dim");
  positive(embed_dim, "embed_dim");
  positive(context_dim, "context_dim");
  positive(conv_channels, "conv_channels");
  positive(topic_kernel, "topic_kernel");
  positive(word_kernel, "word_kernel");
  positive(topic_depth, "topic_depth");
  positive(word_depth, "word_depth");
  positive(attention_heads, "attention_heads");
  positive(count_hidden1, "count_hidden1");
  positive(count_hidden2, "count_hidden2");
  if (vocab_size <= static_cast<std::size_t>(token::special_count))
    throw std::invalid_argument("model config: vocab_size must exceed the "
                                "special tokens");
  if (context_dim != embed_dim)
    throw std::invalid_argument(
        "model config: context_dim must equal embed_dim (contexts are pooled "
        "word embeddings)");
  for (auto layer : attention_layers)
    if (layer == 0 || layer >= word_depth)
      throw std::invalid_argument(
          "model config: attention layer " + std::to_string(layer) +
          " must lie in [1, word_depth)");
  if (pooling == PoolingMode::self_attention && embed_dim % attention_heads)
    throw std::invalid_argument(
        "model config: embed_dim must be divisible by attention_heads");
}

ParaCnn::ParaCnn(const ModelConfig &config, Rng &rng) : config_(config) {
  config_.validate();
  const auto &c = config_;
  feature_projection = Linear(c.visual_dim, c.projection_dim, rng);
  embedding = Embedding(c.vocab_size, c.embed_dim, rng);
  if (c.pooling == PoolingMode::self_attention)
    context_attention.emplace(c.embed_dim, c.attention_heads, rng);
  topic_start = init_uniform({c.topic_dim}, c.topic_dim, rng);
  topic_feed = Linear(c.topic_dim, c.topic_dim, rng);
  topic_input = Linear(c.topic_dim + c.projection_dim + c.context_dim,
                       c.topic_dim, rng);
  for (std::size_t l = 0; l < c.topic_depth; ++l)
    topic_stack.emplace_back(c.topic_dim, c.topic_dim, c.topic_kernel, true, rng);
  word_input = Linear(c.embed_dim + c.topic_dim, c.conv_channels, rng);
  for (std::size_t l = 0; l < c.word_depth; ++l)
    word_stack.emplace_back(c.conv_channels, c.conv_channels, c.word_kernel,
                            true, rng);
  for (std::size_t i = 0; i < c.attention_layers.size(); ++i) {
    attention.emplace_back(c.conv_channels, c.projection_dim, c.conv_channels,
                           rng);
    attention_projection.emplace_back(c.projection_dim, c.conv_channels, rng);
  }
  output = Linear(c.conv_channels, c.vocab_size, rng);
}

ImageEncoding ParaCnn::project_features(const FeatureBatch &features) const {
  if (features.max_regions == 0)
    throw std::invalid_argument("image needs at least one region");
  if (features.dim != config_.visual_dim)
    throw ShapeError("features have dimension " + std::to_string(features.dim) +
                     ", model expects " + std::to_string(config_.visual_dim));
  for (std::size_t b = 0; b < features.batch; ++b)
    if (!features.mask[b * features.max_regions])
      throw std::invalid_argument("image " + std::to_string(b) +
                                  " has no regions");
  Tensor raw = Tensor::from({features.batch, features.max_regions, features.dim},
                            features.values);
  Tensor regions = feature_projection.forward(raw);
  return {masked_max(regions, features.mask), regions, features.mask};
}

Tensor ParaCnn::pool_context(const Tensor &embeds, const Mask &mask) const {
  if (config_.pooling == PoolingMode::mean)
    return masked_mean(embeds, mask);
  return masked_mean(context_attention->forward(embeds, mask), mask);
}

Tensor ParaCnn::topic_forward(TopicState &state, const Tensor &global,
                              const Tensor &context,
                              std::size_t max_slots) const {
  const std::size_t slot = state.slots() + 1;
  if (slot > max_slots)
    throw std::out_of_range("topic slot " + std::to_string(slot) +
                            " exceeds the limit of " + std::to_string(max_slots));
  const std::size_t batch = global.dim(0), dim = config_.topic_dim;
  Tensor feed = state.topics.empty()
                    ? reshape(expand(reshape(topic_start, {1, dim}), batch),
                              {batch, dim})
                    : topic_feed.forward(state.topics.back());
  state.frames.push_back(topic_input.forward(concat({feed, global, context}, 1)));
  state.contexts.push_back(context);

  std::vector<Tensor> seq;
  for (const auto &f : state.frames)
    seq.push_back(reshape(f, {batch, 1, dim}));
  Tensor x = concat(seq, 1);
  for (const auto &block : topic_stack)
    x = block.forward(x);
  Tensor topic = reshape(slice(x, 1, slot - 1, 1), {batch, dim});
  state.topics.push_back(topic);
  return topic;
}

ParaCnn::SentenceOutput
ParaCnn::sentence_forward(const Tensor &topics,
                          std::span<const std::int64_t> inputs,
                          std::size_t steps, const ImageEncoding &image) const {
  const std::size_t groups = topics.dim(0), images = image.batch();
  const std::size_t channels = config_.conv_channels;
  if (steps == 0 || inputs.size() != groups * steps)
    throw ShapeError("sentence_forward: " + std::to_string(inputs.size()) +
                     " inputs for " + std::to_string(groups) + "×" +
                     std::to_string(steps));
  if (groups % images != 0)
    throw ShapeError("sentence_forward: sentences do not split evenly over images");
  const std::size_t per_image = groups / images;

  Tensor words = reshape(embed(inputs), {groups, steps, config_.embed_dim});
  Tensor x = word_input.forward(concat({words, expand(topics, steps)}, 2));
  for (std::size_t l = 0; l < word_stack.size(); ++l) {
    x = word_stack[l].forward(x);
    const auto &layers = config_.attention_layers;
    auto it = std::find(layers.begin(), layers.end(), l + 1);
    if (it == layers.end())
      continue;
    const auto a = static_cast<std::size_t>(it - layers.begin());
    Tensor queries = reshape(x, {images, per_image * steps, channels});
    auto att = attention[a].forward(queries, image.regions, image.region_mask);
    Tensor injected = attention_projection[a].forward(att.context);
    x = add(x, reshape(injected, {groups, steps, channels}));
  }
  Tensor hidden = reshape(x, {groups * steps, channels});
  return {output.forward(hidden), hidden};
}

std::vector<std::int64_t> shift_right(const ParagraphBatch &batch) {
  std::vector<std::int64_t> inputs(batch.positions());
  const std::size_t n = batch.max_words;
  for (std::size_t s = 0; s < batch.batch * batch.max_sentences; ++s) {
    inputs[s * n] = token::start;
    for (std::size_t i = 1; i < n; ++i)
      inputs[s * n + i] = batch.tokens[s * n + i - 1];
  }
  return inputs;
}

ParaCnn::ParagraphOutput
ParaCnn::paragraph_forward(const ParagraphBatch &batch,
                           const FeatureBatch &features) const {
  if (features.batch != batch.batch)
    throw ShapeError("paragraph_forward: feature and paragraph batch sizes differ");
  const std::size_t b = batch.batch, m = batch.max_sentences, n = batch.max_words;
  const std::size_t e = config_.embed_dim, topic = config_.topic_dim;
  ImageEncoding image = project_features(features);

  Tensor sentence_embeds = reshape(embed(batch.tokens), {b * m, n, e});
  Tensor pooled = reshape(pool_context(sentence_embeds, batch.mask), {b, m, e});

  TopicState state;
  for (std::size_t j = 0; j < m; ++j) {
    Tensor context = j == 0 ? Tensor::zeros({b, e})
                            : reshape(slice(pooled, 1, j - 1, 1), {b, e});
    topic_forward(state, image.global, context, m);
  }
  std::vector<Tensor> rows;
  for (const auto &t : state.topics)
    rows.push_back(reshape(t, {b, 1, topic}));
  Tensor topics = concat(rows, 1);

  auto inputs = shift_right(batch);
  auto out = sentence_forward(reshape(topics, {b * m, topic}), inputs, n, image);
  return {reshape(out.logits, {b, m, n, config_.vocab_size}),
          reshape(out.hidden, {b, m, n, config_.conv_channels}), topics,
          image.global};
}

Tensor ParaCnn::loss(const ParagraphOutput &out,
                     const ParagraphBatch &batch) const {
  Tensor flat = reshape(out.logits, {batch.positions(), config_.vocab_size});
  return cross_entropy(flat, batch.tokens, batch.mask);
}

ParameterList ParaCnn::parameters() const {
  ParameterList out;
  feature_projection.collect("feature_projection", out);
  embedding.collect("embedding", out);
  if (context_attention)
    context_attention->collect("context_attention", out);
  out.push_back({"topic_start", topic_start});
  topic_feed.collect("topic_feed", out);
  topic_input.collect("topic_input", out);
  for (std::size_t l = 0; l < topic_stack.size(); ++l)
    topic_stack[l].collect("topic_stack." + std::to_string(l), out);
  word_input.collect("word_input", out);
  for (std::size_t l = 0; l < word_stack.size(); ++l)
    word_stack[l].collect("word_stack." + std::to_string(l), out);
  for (std::size_t a = 0; a < attention.size(); ++a) {
    attention[a].collect("attention." + std::to_string(a), out);
    attention_projection[a].collect("attention_projection." + std::to_string(a),
                                    out);
  }
  output.collect("output", out);
  return out;
}

// ---------------------------------------------------------------------------

SentenceCountPredictor::SentenceCountPredictor(std::size_t input_dim,
                                               std::size_t hidden1,
                                               std::size_t hidden2,
                                               std::size_t max_count, Rng &rng)
    : layer1(input_dim, hidden1, rng), layer2(hidden1, hidden2, rng),
      layer3(hidden2, max_count, rng), max_count_(max_count) {}

Tensor SentenceCountPredictor::forward(const Tensor &global) const {
  return layer3.forward(relu(layer2.forward(relu(layer1.forward(global)))));
}

ParameterList SentenceCountPredictor::parameters() const {
  ParameterList out;
  layer1.collect("layer1", out);
  layer2.collect("layer2", out);
  layer3.collect("layer3", out);
  return out;
}

std::size_t predict_sentence_count(std::span<const double> logits,
                                   std::size_t min_count, std::size_t max_count) {
  if (logits.empty())
    throw std::invalid_argument("sentence-count logits are empty");
  if (min_count == 0 || min_count > max_count)
    throw std::invalid_argument("sentence-count clamp needs 1 <= min <= max");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best])
      best = i;
  return std::clamp(best + 1, min_count, max_count);
}

} // namespace paracnn
