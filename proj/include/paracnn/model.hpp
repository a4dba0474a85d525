// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Hierarchical convolutional paragraph generator.
 *
 * Image regions are projected and max-pooled into a global feature. A causal
 * topic stack emits one topic vector per sentence slot; slot j sees the
 * previous topic, the global feature and a context vector pooled from the
 * embedding of sentence j-1. A causal word stack then decodes each sentence
 * from its topic, with soft visual attention over the projected regions
 * injected after selected layers.
 */
#pragma once

#include "paracnn/batch.hpp"
#include "paracnn/layers.hpp"

#include <optional>
#include <set>

namespace paracnn {

enum class PoolingMode { mean, self_attention };

struct ModelConfig {
  std::size_t max_sentences = 6;
  std::size_t max_words = 30;
  std::size_t vocab_size = 8668;
  std::size_t visual_dim = 4096;
  std::size_t projection_dim = 512;
  std::size_t topic_dim = 512;
  std::size_t embed_dim = 512;
  std::size_t context_dim = 512;
  std::size_t conv_channels = 512;
  std::size_t topic_kernel = 5;
  std::size_t word_kernel = 5;
  std::size_t topic_depth = 4;
  std::size_t word_depth = 5;
  PoolingMode pooling = PoolingMode::self_attention;
  /// 1-based word-stack layers followed by visual attention.
  std::vector<std::size_t> attention_layers{2, 4};
  std::size_t attention_heads = 8;
  std::size_t count_hidden1 = 256;
  std::size_t count_hidden2 = 128;

  /// Throws std::invalid_argument on a broken invariant.
  void validate() const;
};

struct ImageEncoding {
  Tensor global;  // [B, P]
  Tensor regions; // [B, R, P]
  Mask region_mask;
  std::size_t batch() const { return global.dim(0); }
};

/// Topics and contexts produced so far for a batch of paragraphs.
struct TopicState {
  std::vector<Tensor> frames;   // topic-stack input frames, each [B, topic]
  std::vector<Tensor> topics;   // T_1..T_j, each [B, topic]
  std::vector<Tensor> contexts; // context_1..context_j, each [B, embed]
  std::size_t slots() const { return topics.size(); }
};

class ParaCnn {
public:
  struct SentenceOutput {
    Tensor logits; // [G·t, V]
    Tensor hidden; // [G·t, C]
  };
  struct ParagraphOutput {
    Tensor logits; // [B, M, N, V]
    Tensor hidden; // [B, M, N, C]
    Tensor topics; // [B, M, topic]
    Tensor global; // [B, P]
  };

  ParaCnn(const ModelConfig &config, Rng &rng);

  const ModelConfig &config() const { return config_; }

  ImageEncoding project_features(const FeatureBatch &features) const;

  /// embeds[G, N, E] of the previous sentences -> [G, E]; a sentence with no
  /// valid token pools to the zero vector.
  Tensor pool_context(const Tensor &embeds, const Mask &mask) const;

  /// Appends T_j for the next slot. `max_slots` bounds the slot index.
  Tensor topic_forward(TopicState &state, const Tensor &global,
                       const Tensor &context, std::size_t max_slots) const;

  /// topics[G, topic]; inputs[G·t] teacher-forced word inputs; the G
  /// sequences belong to image.batch() images, G / B consecutive per image.
  SentenceOutput sentence_forward(const Tensor &topics,
                                  std::span<const std::int64_t> inputs,
                                  std::size_t steps,
                                  const ImageEncoding &image) const;

  /// Teacher-forced pass over a whole batch; contexts come from the
  /// ground-truth previous sentences.
  ParagraphOutput paragraph_forward(const ParagraphBatch &batch,
                                    const FeatureBatch &features) const;

  /// Masked mean cross-entropy of paragraph_forward logits.
  Tensor loss(const ParagraphOutput &out, const ParagraphBatch &batch) const;

  Tensor embed(std::span<const std::int64_t> ids) const {
    return embedding.forward(ids);
  }

  ParameterList parameters() const;

  Linear feature_projection;
  Embedding embedding;
  std::optional<MultiHeadSelfAttention> context_attention;
  Tensor topic_start; // [topic]
  Linear topic_feed;  // T_{j-1} -> slot input
  Linear topic_input; // [feed; global; context] -> topic
  std::vector<CausalConvBlock> topic_stack;
  Linear word_input; // [embedding; topic] -> channels
  std::vector<CausalConvBlock> word_stack;
  std::vector<VisualAttention> attention;
  std::vector<Linear> attention_projection;
  Linear output;

private:
  ModelConfig config_;
};

/// Builds the shifted decoder inputs: <start>, w_0, …, w_{N-2} per sentence.
std::vector<std::int64_t> shift_right(const ParagraphBatch &batch);

/// Standalone sentence-count classifier over the pooled image feature.
class SentenceCountPredictor {
public:
  SentenceCountPredictor(std::size_t input_dim, std::size_t hidden1,
                         std::size_t hidden2, std::size_t max_count, Rng &rng);

  /// global[B, P] -> logits[B, max_count]; class c means c + 1 sentences.
  Tensor forward(const Tensor &global) const;
  ParameterList parameters() const;
  std::size_t max_count() const { return max_count_; }

  Linear layer1, layer2, layer3;

private:
  std::size_t max_count_;
};

/// argmax (lowest index on ties) + 1, clamped to [min_count, max_count].
std::size_t predict_sentence_count(std::span<const double> logits,
                                   std::size_t min_count, std::size_t max_count);

} // namespace paracnn
