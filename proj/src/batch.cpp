// SPDX-License-Identifier: Apache-2.0
#include "paracnn/batch.hpp"

#include <algorithm>
#include <stdexcept>

namespace paracnn {

ParagraphBatch ParagraphBatch::from(
    const std::vector<const EncodedParagraph *> &items,
    std::vector<std::string> refs) {
  if (items.empty())
    throw std::invalid_argument("paragraph batch needs at least one item");
  ParagraphBatch out;
  out.batch = items.size();
  out.max_sentences = items.front()->max_sentences;
  out.max_words = items.front()->max_words;
  for (const auto *item : items) {
    if (item->max_sentences != out.max_sentences ||
        item->max_words != out.max_words)
      throw std::invalid_argument("paragraph batch items disagree on M×N");
    out.tokens.insert(out.tokens.end(), item->tokens.begin(), item->tokens.end());
    out.mask.insert(out.mask.end(), item->mask.begin(), item->mask.end());
    out.sentence_counts.push_back(item->sentence_count);
  }
  out.feature_refs = std::move(refs);
  out.validate();
  return out;
}

void ParagraphBatch::validate() const {
  const std::size_t n = positions();
  if (tokens.size() != n || mask.size() != n)
    throw std::invalid_argument("paragraph batch: token/mask size mismatch");
  if (sentence_counts.size() != batch)
    throw std::invalid_argument("paragraph batch: sentence count size mismatch");
  for (std::size_t b = 0; b < batch; ++b) {
    if (sentence_counts[b] > max_sentences)
      throw std::invalid_argument("paragraph batch: sentence count exceeds M");
    for (std::size_t j = 0; j < max_sentences; ++j) {
      bool open = true;
      for (std::size_t i = 0; i < max_words; ++i) {
        const auto at = index(b, j, i);
        if (mask[at] && !open)
          throw std::invalid_argument(
              "paragraph batch: mask is not prefix-shaped");
        if (!mask[at]) {
          open = false;
          if (tokens[at] != token::pad)
            throw std::invalid_argument(
                "paragraph batch: masked position holds a non-pad token");
        }
      }
    }
  }
}

FeatureBatch FeatureBatch::from(const std::vector<const Tensor *> &items) {
  if (items.empty())
    throw std::invalid_argument("feature batch needs at least one item");
  FeatureBatch out;
  out.batch = items.size();
  out.dim = items.front()->dim(1);
  for (const auto *item : items) {
    if (item->rank() != 2 || item->dim(1) != out.dim)
      throw ShapeError("feature batch: expected [R, " + std::to_string(out.dim) +
                       "], got " + to_string(item->shape()));
    out.max_regions = std::max(out.max_regions, item->dim(0));
  }
  out.values.assign(out.batch * out.max_regions * out.dim, 0.0);
  out.mask.assign(out.batch * out.max_regions, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const Tensor &item = *items[b];
    std::copy(item.data().begin(), item.data().end(),
              out.values.begin() + b * out.max_regions * out.dim);
    std::fill_n(out.mask.begin() + b * out.max_regions, item.dim(0), 1);
  }
  return out;
}

FeatureBatch FeatureBatch::single(const Tensor &features) {
  return from({&features});
}

} // namespace paracnn
