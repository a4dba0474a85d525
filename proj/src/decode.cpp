// SPDX-License-Identifier: Apache-2.0
#include "paracnn/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace paracnn {

void DecodeConfig::validate() const {
  if (!adaptive && sentences < 1)
    throw std::invalid_argument("decode: fixed sentence count must be >= 1");
  if (adaptive && (min_sentences < 1 || min_sentences > max_sentences))
    throw std::invalid_argument("decode: adaptive clamp needs 1 <= min <= max");
  if (max_words < 1)
    throw std::invalid_argument("decode: max_words must be >= 1");
  if (!(rep_penalty >= 0.0))
    throw std::invalid_argument("decode: repetition penalty must be >= 0");
}

std::string to_string(PenaltyScope scope) {
  return scope == PenaltyScope::paragraph ? "paragraph" : "sentence";
}

PenaltyScope parse_penalty_scope(std::string_view text) {
  if (text == "paragraph")
    return PenaltyScope::paragraph;
  if (text == "sentence")
    return PenaltyScope::sentence;
  throw std::invalid_argument("unknown penalty scope '" + std::string(text) +
                              "' (paragraph, sentence)");
}

void apply_repetition_penalty(std::span<double> logits,
                              std::span<const std::int64_t> history, double gamma,
                              bool block_trigrams) {
  const auto vocab = static_cast<std::int64_t>(logits.size());
  if (gamma != 0.0) {
    std::map<std::int64_t, std::size_t> counts;
    for (auto t : history)
      ++counts[t];
    for (auto [t, c] : counts)
      if (t >= 0 && t < vocab)
        logits[static_cast<std::size_t>(t)] -= gamma * static_cast<double>(c);
  }
  if (block_trigrams && history.size() >= 2) {
    const auto a = history[history.size() - 2], b = history[history.size() - 1];
    for (std::size_t i = 0; i + 2 < history.size(); ++i)
      if (history[i] == a && history[i + 1] == b && history[i + 2] >= 0 &&
          history[i + 2] < vocab)
        logits[static_cast<std::size_t>(history[i + 2])] =
            -std::numeric_limits<double>::infinity();
  }
}

namespace {

std::int64_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best])
      best = i;
  if (v[best] == -std::numeric_limits<double>::infinity())
    return token::eos;
  return static_cast<std::int64_t>(best);
}

Tensor pooled_context(const ParaCnn &model, std::span<const std::int64_t> tokens,
                      std::size_t width) {
  std::vector<std::int64_t> ids(width, token::pad);
  Mask mask(width, 0);
  for (std::size_t i = 0; i < tokens.size() && i < width; ++i) {
    ids[i] = tokens[i];
    mask[i] = 1;
  }
  const auto e = model.config().embed_dim;
  return model.pool_context(reshape(model.embed(ids), {1, width, e}), mask);
}

} // namespace

DecodedParagraph greedy_decode(const ParaCnn &model, const Tensor &features,
                               std::size_t sentences, const DecodeConfig &config,
                               const DecodeOptions &options) {
  config.validate();
  const EncodedParagraph *forced = options.forced;
  if (forced)
    sentences = forced->sentence_count;
  if (sentences < 1)
    throw std::invalid_argument("decode: need at least one sentence");
  NoGradGuard no_grad;
  const auto &mc = model.config();
  const std::size_t vocab = mc.vocab_size;
  const std::size_t words_cap = forced ? forced->max_words : config.max_words;
  const std::size_t width = std::max(words_cap, mc.max_words);

  ImageEncoding image = model.project_features(FeatureBatch::single(features));
  TopicState state;
  Tensor context = Tensor::zeros({1, mc.embed_dim});
  std::vector<std::int64_t> history;
  DecodedParagraph out;

  for (std::size_t j = 0; j < sentences; ++j) {
    Tensor topic = model.topic_forward(state, image.global, context, sentences);
    if (config.penalty_scope == PenaltyScope::sentence)
      history.clear();
    std::size_t steps = words_cap;
    if (forced) {
      steps = 0;
      while (steps < forced->max_words && forced->mask[j * forced->max_words + steps])
        ++steps;
    }
    std::vector<std::int64_t> inputs{token::start}, emitted;
    std::vector<std::vector<double>> trace;
    std::vector<bool> adjusted;
    bool ended = false;
    for (std::size_t t = 0; t < steps; ++t) {
      auto step = model.sentence_forward(topic, inputs, inputs.size(), image);
      auto row = step.logits.data().subspan(t * vocab, vocab);
      std::vector<double> scores(row.begin(), row.end());
      if (options.record_logits)
        trace.push_back(scores);
      apply_repetition_penalty(scores, history, config.rep_penalty,
                               config.block_trigrams);
      adjusted.push_back(!std::equal(scores.begin(), scores.end(), row.begin()));
      const std::int64_t tok =
          forced ? forced->tokens[j * forced->max_words + t] : argmax(scores);
      emitted.push_back(tok);
      if (tok == token::eos) {
        ended = true;
        break;
      }
      if (tok >= token::special_count)
        history.push_back(tok);
      inputs.push_back(tok);
    }
    std::vector<std::int64_t> words(emitted.begin(),
                                    emitted.end() - (ended ? 1 : 0));
    out.sentences.push_back(std::move(words));
    if (options.record_logits) {
      out.logits.push_back(std::move(trace));
      out.adjusted.push_back(std::move(adjusted));
    }
    if (j + 1 < sentences)
      context = pooled_context(model, emitted, width);
  }
  return out;
}

std::size_t adaptive_sentence_count(const ParaCnn &model,
                                    const SentenceCountPredictor &predictor,
                                    const Tensor &features,
                                    const DecodeConfig &config) {
  config.validate();
  NoGradGuard no_grad;
  ImageEncoding image = model.project_features(FeatureBatch::single(features));
  Tensor logits = predictor.forward(image.global);
  return predict_sentence_count(logits.data(), config.min_sentences,
                                config.max_sentences);
}

DecodedParagraph decode_adaptive(const ParaCnn &model,
                                 const SentenceCountPredictor &predictor,
                                 const Tensor &features,
                                 const DecodeConfig &config) {
  const auto count = adaptive_sentence_count(model, predictor, features, config);
  return greedy_decode(model, features, count, config);
}

namespace {

std::string sentence_text(const std::vector<std::int64_t> &words,
                          const Vocab &vocab) {
  std::string s;
  for (auto w : words) {
    if (!s.empty())
      s += ' ';
    s += vocab.word(w);
  }
  return s + '.';
}

} // namespace

std::string format_paragraph(const DecodedParagraph &paragraph,
                             const Vocab &vocab) {
  std::string out;
  for (const auto &s : paragraph.sentences)
    out += sentence_text(s, vocab) + '\n';
  return out;
}

std::string paragraph_text(const DecodedParagraph &paragraph, const Vocab &vocab) {
  std::string out;
  for (const auto &s : paragraph.sentences) {
    if (!out.empty())
      out += ' ';
    out += sentence_text(s, vocab);
  }
  return out;
}

std::vector<std::string> parse_paragraphs(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  bool open = false;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      if (open)
        out.push_back(std::move(current));
      current.clear();
      open = false;
      continue;
    }
    if (open)
      current += ' ';
    current += line;
    open = true;
  }
  if (open)
    out.push_back(std::move(current));
  return out;
}

} // namespace paracnn
