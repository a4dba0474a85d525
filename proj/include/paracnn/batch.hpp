// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "paracnn/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace paracnn {

/// Fixed indices of the special tokens; every Vocab starts with them.
namespace token {
inline constexpr std::int64_t pad = 0;
inline constexpr std::int64_t start = 1;
inline constexpr std::int64_t eos = 2;
inline constexpr std::int64_t unk = 3;
inline constexpr std::int64_t special_count = 4;
} // namespace token

/// One paragraph as a padded [M × N] grid.
struct EncodedParagraph {
  std::size_t max_sentences = 0;
  std::size_t max_words = 0;
  std::vector<std::int64_t> tokens; // [M·N], pad where invalid
  Mask mask;                        // [M·N], prefix-shaped per sentence
  std::size_t sentence_count = 0;
};

/// Padded token grid [B × M × N] with validity mask.
struct ParagraphBatch {
  std::size_t batch = 0;
  std::size_t max_sentences = 0;
  std::size_t max_words = 0;
  std::vector<std::int64_t> tokens;
  Mask mask;
  std::vector<std::size_t> sentence_counts;
  std::vector<std::string> feature_refs;

  std::size_t index(std::size_t b, std::size_t j, std::size_t i) const {
    return (b * max_sentences + j) * max_words + i;
  }
  std::size_t positions() const { return batch * max_sentences * max_words; }

  static ParagraphBatch from(const std::vector<const EncodedParagraph *> &items,
                             std::vector<std::string> refs = {});
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

/// Region features for a batch of images, zero-padded to the largest R.
struct FeatureBatch {
  std::size_t batch = 0;
  std::size_t max_regions = 0;
  std::size_t dim = 0;
  std::vector<double> values; // [B·R·dim]
  Mask mask;                  // [B·R]

  static FeatureBatch from(const std::vector<const Tensor *> &items);
  static FeatureBatch single(const Tensor &features);
};

} // namespace paracnn
