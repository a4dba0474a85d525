// SPDX-License-Identifier: Apache-2.0
/**
 * @file   decode.hpp
 * @brief  Sentence-by-sentence greedy inference with repetition control.
 */
#pragma once

#include "paracnn/corpus.hpp"
#include "paracnn/model.hpp"

#include <optional>

namespace paracnn {

enum class PenaltyScope { paragraph, sentence };

struct DecodeConfig {
  std::size_t sentences = 6; // fixed count when not adaptive
  bool adaptive = false;
  std::size_t min_sentences = 1;
  std::size_t max_sentences = 6;
  std::size_t max_words = 30;
  double rep_penalty = 2.0;
  bool block_trigrams = true;
  PenaltyScope penalty_scope = PenaltyScope::paragraph;

  void validate() const;
};

std::string to_string(PenaltyScope scope);
PenaltyScope parse_penalty_scope(std::string_view text);

/// logit[t] -= γ·count(t in history); with blocking, any token completing a
/// trigram already present in history gets -inf. History holds the
/// non-special tokens emitted so far.
void apply_repetition_penalty(std::span<double> logits,
                              std::span<const std::int64_t> history, double gamma,
                              bool block_trigrams);

struct DecodedParagraph {
  std::vector<std::vector<std::int64_t>> sentences; // words, <eos> dropped
  /// Optional per-step trace: raw logits before any penalty, and whether
  /// the penalty changed that step's choice set.
  std::vector<std::vector<std::vector<double>>> logits;
  std::vector<std::vector<bool>> adjusted;
};

struct DecodeOptions {
  bool record_logits = false;
  /// Feed these tokens instead of the argmax (teacher forcing through the
  /// inference path). Sentences follow the paragraph's own lengths.
  const EncodedParagraph *forced = nullptr;
};

/// Greedy decoding of `sentences` sentences for one image [R, d].
DecodedParagraph greedy_decode(const ParaCnn &model, const Tensor &features,
                               std::size_t sentences, const DecodeConfig &config,
                               const DecodeOptions &options = {});

/// Predicted sentence count clamped to [min, max], then greedy decoding.
DecodedParagraph decode_adaptive(const ParaCnn &model,
                                 const SentenceCountPredictor &predictor,
                                 const Tensor &features, const DecodeConfig &config);

/// Sentence count the adaptive decoder would use for these features.
std::size_t adaptive_sentence_count(const ParaCnn &model,
                                    const SentenceCountPredictor &predictor,
                                    const Tensor &features,
                                    const DecodeConfig &config);

/// One line per sentence, "w1 w2 … wk."; an empty sentence prints ".".
std::string format_paragraph(const DecodedParagraph &paragraph,
                             const Vocab &vocab);
/// Single-line form used for scoring and reference comparison.
std::string paragraph_text(const DecodedParagraph &paragraph, const Vocab &vocab);
/// Splits a hypotheses file into paragraphs at blank lines.
std::vector<std::string> parse_paragraphs(std::string_view text);

} // namespace paracnn
