// SPDX-License-Identifier: Apache-2.0
/**
 * @file   corpus.hpp
 * @brief  Paragraph preprocessing, vocabularies, the synthetic scene corpus,
 *         and the on-disk feature / manifest formats.
 *
 * Feature file (PFV1), all little-endian:
 *   "PFV1" | u32 regions | u32 dim | regions·dim float32, row-major
 *
 * Manifest: JSON lines, one {"id", "feature_path", "paragraph"} per image.
 * feature_path is resolved relative to the manifest's directory.
 */
#pragma once

#include "paracnn/batch.hpp"
#include "paracnn/rng.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace paracnn {

/// Splits on '.', '!' or '?' followed by whitespace or end of text.
std::vector<std::string> split_sentences(std::string_view text);
/// Lowercases, splits on whitespace and strips punctuation from token edges.
std::vector<std::string> tokenize(std::string_view sentence);
/// Every sentence of `text` tokenized, empty sentences dropped.
std::vector<std::vector<std::string>> tokenize_paragraph(std::string_view text);

class Vocab {
public:
  static constexpr std::string_view pad_token = "<pad>";
  static constexpr std::string_view start_token = "<start>";
  static constexpr std::string_view eos_token = "<eos>";
  static constexpr std::string_view unk_token = "<unk>";

  /// Counts tokens over all paragraphs; tokens seen fewer than `min_freq`
  /// times are dropped. Order: specials, then frequency desc, then lexical.
  static Vocab build(const std::vector<std::string> &paragraphs,
                     std::size_t min_freq = 2);
  /// Restores a vocabulary from its index order (specials first).
  static Vocab from_tokens(std::vector<std::string> tokens,
                           std::size_t min_freq = 0);

  std::int64_t id(std::string_view word) const;
  const std::string &word(std::int64_t id) const;
  bool contains(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string> &tokens() const { return words_; }
  std::size_t min_frequency() const { return min_freq_; }

private:
  std::vector<std::string> words_;
  std::map<std::string, std::int64_t, std::less<>> index_;
  std::size_t min_freq_ = 0;
};

class EncodeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Keeps at most M sentences, each truncated to N-1 words plus <eos>.
EncodedParagraph encode_paragraph(std::string_view text, const Vocab &vocab,
                                  std::size_t max_sentences = 6,
                                  std::size_t max_words = 30);
/// Sentences as "w1 w2 … wk." joined by single spaces.
std::string decode_paragraph(const EncodedParagraph &paragraph,
                             const Vocab &vocab);

// --- synthetic scenes ------------------------------------------------------

struct SyntheticOptions {
  std::size_t grid = 3;
  std::size_t vocab_size = 60;
  std::size_t min_objects = 2;
  std::size_t max_objects = 6;
  double noise = 0.05;
};

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t cell = 0;
};

struct SyntheticScene {
  std::string id;
  std::vector<SceneObject> objects; // canonical (row-major cell) order
  Tensor features;                  // [objects, feature_dim]
  std::string paragraph;
};

/// Word lists and feature layout shared by every scene of a corpus.
class SceneLexicon {
public:
  explicit SceneLexicon(const SyntheticOptions &options);

  const std::vector<std::string> &colors() const { return colors_; }
  const std::vector<std::string> &shapes() const { return shapes_; }
  const std::vector<std::string> &positions() const { return positions_; }
  /// Every word a synthetic paragraph can contain.
  std::vector<std::string> words() const;

  std::size_t feature_dim() const;
  /// Noise-free encoding of one object.
  std::vector<double> encode(const SceneObject &object) const;
  std::string sentence(const SceneObject &object) const;

private:
  std::size_t grid_;
  std::vector<std::string> colors_, shapes_, positions_;
};

std::vector<SyntheticScene>
generate_synthetic_corpus(std::uint64_t seed, std::size_t size,
                          const SyntheticOptions &options);

// --- files -----------------------------------------------------------------

class FeatureFileError : public std::runtime_error {
public:
  enum class Kind { io, malformed_header, dimension_mismatch, truncated };
  FeatureFileError(Kind kind, const std::string &message)
      : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

void save_features(const std::filesystem::path &path, const Tensor &features);
/// Reads a PFV1 file; when expected_dim is non-zero the header must match.
Tensor load_features(const std::filesystem::path &path,
                     std::size_t expected_dim = 0);

struct ManifestRecord {
  std::string id;
  std::string feature_path;
  std::string paragraph;
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path &path);
void write_manifest(const std::filesystem::path &path,
                    const std::vector<ManifestRecord> &records);

/// A manifest with its features loaded and paragraphs encoded.
struct Example {
  std::string id;
  std::string paragraph;
  Tensor features;
  EncodedParagraph encoded;
};

std::vector<Example> load_examples(const std::filesystem::path &manifest,
                                   const Vocab &vocab, std::size_t max_sentences,
                                   std::size_t max_words,
                                   std::size_t expected_dim = 0);

/// Batches examples[indices] into paragraph and feature batches.
std::pair<ParagraphBatch, FeatureBatch>
make_batch(const std::vector<Example> &examples,
           std::span<const std::size_t> indices);

} // namespace paracnn
