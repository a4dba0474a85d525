// SPDX-License-Identifier: Apache-2.0
/**
 * @file   metrics.hpp
 * @brief  Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D over flat paragraph
 *         token streams.
 *
 * Text is lowercased and stripped of edge punctuation before scoring, so
 * "The cat." and "the cat" score identically.
 */
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace paracnn {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens hypothesis;
  std::vector<Tokens> references;
};

/// Flattens a paragraph (any sentence layout) into scoring tokens.
Tokens metric_tokens(std::string_view paragraph);

using Warnings = std::vector<std::string>;

/// Clipped n-gram precision, geometric mean over orders 1..n, brevity
/// penalty exp(1 - r/c) when c < r; r sums the closest reference lengths.
/// An order with no hypothesis n-grams scores 0.
double bleu(const std::vector<EvalPair> &pairs, int n,
            Warnings *warnings = nullptr);

/// LCS F-measure averaged over pairs; with several references the best
/// precision and best recall are combined.
double rouge_l(const std::vector<EvalPair> &pairs, double beta = 1.2);

/// CIDEr-D: document frequencies come from the references of all pairs.
double cider_d(const std::vector<EvalPair> &pairs, Warnings *warnings = nullptr,
               double sigma = 6.0);

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  Warnings warnings;
};

MetricReport evaluate(const std::vector<EvalPair> &pairs);

/// Length of the longest common subsequence.
std::size_t lcs_length(const Tokens &a, const Tokens &b);

} // namespace paracnn
