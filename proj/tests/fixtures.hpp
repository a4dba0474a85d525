// SPDX-License-Identifier: Apache-2.0
// Small random models and batches shared by the unit and acceptance tests.
#pragma once

#include "paracnn/corpus.hpp"
#include "paracnn/model.hpp"

#include <filesystem>
#include <string>

namespace fixtures {

using namespace paracnn;

inline ModelConfig tiny_config(std::size_t vocab = 11, std::size_t m = 2,
                               std::size_t n = 4) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_sentences = m;
  c.max_words = n;
  c.visual_dim = 6;
  c.projection_dim = 8;
  c.topic_dim = 8;
  c.embed_dim = 8;
  c.context_dim = 8;
  c.conv_channels = 8;
  c.topic_kernel = 3;
  c.word_kernel = 3;
  c.topic_depth = 2;
  c.word_depth = 3;
  c.attention_layers = {1, 2};
  c.attention_heads = 2;
  c.count_hidden1 = 8;
  c.count_hidden2 = 8;
  return c;
}

inline Tensor random_features(std::size_t regions, std::size_t dim, Rng &rng) {
  std::vector<double> v(regions * dim);
  for (auto &x : v)
    x = rng.normal();
  return Tensor::from({regions, dim}, std::move(v));
}

/// A random well-formed paragraph: 1..M sentences of 1..N-1 words + <eos>.
inline EncodedParagraph random_paragraph(const ModelConfig &c, Rng &rng,
                                         std::size_t sentences = 0) {
  EncodedParagraph p;
  p.max_sentences = c.max_sentences;
  p.max_words = c.max_words;
  p.tokens.assign(c.max_sentences * c.max_words, token::pad);
  p.mask.assign(c.max_sentences * c.max_words, 0);
  p.sentence_count = sentences ? sentences : 1 + rng.below(c.max_sentences);
  for (std::size_t j = 0; j < p.sentence_count; ++j) {
    const std::size_t words = 1 + rng.below(c.max_words - 1);
    for (std::size_t w = 0; w < words; ++w) {
      p.tokens[j * c.max_words + w] = static_cast<std::int64_t>(
          token::special_count + rng.below(c.vocab_size - token::special_count));
      p.mask[j * c.max_words + w] = 1;
    }
    p.tokens[j * c.max_words + words] = token::eos;
    p.mask[j * c.max_words + words] = 1;
  }
  return p;
}

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string &name) {
  auto dir = std::filesystem::temp_directory_path() / ("paracnn-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace fixtures
