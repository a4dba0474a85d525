// SPDX-License-Identifier: Apache-2.0
#include "paracnn/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace paracnn {

namespace {

bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }
bool is_edge_punct(unsigned char c) { return std::ispunct(c) && c != '<' && c != '>'; }

} // namespace

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (std::size_t i = 0; i < text.size(); ++i) {
    current.push_back(text[i]);
    const bool boundary =
        is_terminal(text[i]) &&
        (i + 1 == text.size() ||
         std::isspace(static_cast<unsigned char>(text[i + 1])));
    if (boundary) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty())
    out.push_back(std::move(current));
  return out;
}

std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> out;
  std::istringstream in{std::string(sentence)};
  std::string word;
  while (in >> word) {
    std::size_t lo = 0, hi = word.size();
    while (lo < hi && is_edge_punct(static_cast<unsigned char>(word[lo])))
      ++lo;
    while (hi > lo && is_edge_punct(static_cast<unsigned char>(word[hi - 1])))
      --hi;
    if (lo == hi)
      continue;
    std::string token = word.substr(lo, hi - lo);
    for (auto &c : token)
      c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(token));
  }
  return out;
}

std::vector<std::vector<std::string>> tokenize_paragraph(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  for (const auto &s : split_sentences(text)) {
    auto words = tokenize(s);
    if (!words.empty())
      out.push_back(std::move(words));
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocab Vocab::build(const std::vector<std::string> &paragraphs,
                   std::size_t min_freq) {
  if (paragraphs.empty())
    throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto &p : paragraphs)
    for (const auto &sentence : tokenize_paragraph(p))
      for (const auto &w : sentence)
        ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto &[w, c] : counts)
    if (c >= min_freq && !(w == pad_token || w == start_token ||
                           w == eos_token || w == unk_token))
      kept.emplace_back(w, c);
  std::sort(kept.begin(), kept.end(), [](const auto &a, const auto &b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words{std::string(pad_token), std::string(start_token),
                                 std::string(eos_token), std::string(unk_token)};
  for (auto &[w, c] : kept)
    words.push_back(w);
  return from_tokens(std::move(words), min_freq);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, std::size_t min_freq) {
  if (tokens.size() < static_cast<std::size_t>(token::special_count) ||
      tokens[token::pad] != pad_token || tokens[token::start] != start_token ||
      tokens[token::eos] != eos_token || tokens[token::unk] != unk_token)
    throw std::invalid_argument("vocabulary must start with the special tokens");
  Vocab v;
  v.words_ = std::move(tokens);
  v.min_freq_ = min_freq;
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    if (!v.index_.emplace(v.words_[i], static_cast<std::int64_t>(i)).second)
      throw std::invalid_argument("duplicate vocabulary entry '" + v.words_[i] +
                                  "'");
  return v;
}

std::int64_t Vocab::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? token::unk : it->second;
}

const std::string &Vocab::word(std::int64_t id) const {
  if (id < 0 || id >= static_cast<std::int64_t>(words_.size()))
    throw std::out_of_range("token index " + std::to_string(id) +
                            " outside vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view word) const {
  return index_.find(word) != index_.end();
}

// ---------------------------------------------------------------------------

EncodedParagraph encode_paragraph(std::string_view text, const Vocab &vocab,
                                  std::size_t max_sentences,
                                  std::size_t max_words) {
  if (max_sentences == 0 || max_words < 1)
    throw std::invalid_argument("encode_paragraph: M and N must be positive");
  auto sentences = tokenize_paragraph(text);
  if (sentences.empty())
    throw EncodeError("paragraph has no sentences: '" + std::string(text) + "'");
  EncodedParagraph out;
  out.max_sentences = max_sentences;
  out.max_words = max_words;
  out.tokens.assign(max_sentences * max_words, token::pad);
  out.mask.assign(max_sentences * max_words, 0);
  out.sentence_count = std::min(sentences.size(), max_sentences);
  for (std::size_t j = 0; j < out.sentence_count; ++j) {
    const auto &words = sentences[j];
    const std::size_t keep = std::min(words.size(), max_words - 1);
    for (std::size_t i = 0; i < keep; ++i) {
      out.tokens[j * max_words + i] = vocab.id(words[i]);
      out.mask[j * max_words + i] = 1;
    }
    out.tokens[j * max_words + keep] = token::eos;
    out.mask[j * max_words + keep] = 1;
  }
  return out;
}

std::string decode_paragraph(const EncodedParagraph &paragraph,
                             const Vocab &vocab) {
  std::string out;
  for (std::size_t j = 0; j < paragraph.sentence_count; ++j) {
    std::string sentence;
    for (std::size_t i = 0; i < paragraph.max_words; ++i) {
      const auto at = j * paragraph.max_words + i;
      if (!paragraph.mask[at] || paragraph.tokens[at] == token::eos)
        break;
      if (!sentence.empty())
        sentence += ' ';
      sentence += vocab.word(paragraph.tokens[at]);
    }
    if (!out.empty())
      out += ' ';
    out += sentence + '.';
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<const char *, 22> kColors{
    "red",   "blue",   "green", "yellow", "purple", "orange", "pink", "brown",
    "black", "white",  "gray",  "cyan",   "magenta", "gold",  "silver", "teal",
    "navy",  "maroon", "olive", "lime",   "beige",  "violet"};
constexpr std::array<const char *, 22> kShapes{
    "cube",  "sphere", "cone",  "cylinder", "pyramid", "ring",  "star", "disk",
    "prism", "torus",  "block", "ball",     "rod",     "plate", "wedge", "arch",
    "cross", "tile",   "bar",   "egg",      "bowl",    "cup"};
constexpr std::array<const char *, 3> kFunctionWords{"the", "is", "in"};

} // namespace

SceneLexicon::SceneLexicon(const SyntheticOptions &options)
    : grid_(options.grid) {
  if (grid_ == 0)
    throw std::invalid_argument("synthetic grid must be positive");
  const std::size_t cells = grid_ * grid_;
  const std::size_t fixed = token::special_count + kFunctionWords.size() + cells;
  std::size_t palette = options.vocab_size > fixed + 4
                            ? (options.vocab_size - fixed) / 2
                            : 2;
  palette = std::clamp<std::size_t>(palette, 2, kColors.size());
  colors_.assign(kColors.begin(), kColors.begin() + palette);
  shapes_.assign(kShapes.begin(), kShapes.begin() + palette);
  if (grid_ == 3) {
    positions_ = {"top-left",    "top",    "top-right",
                  "left",        "center", "right",
                  "bottom-left", "bottom", "bottom-right"};
  } else {
    for (std::size_t r = 0; r < grid_; ++r)
      for (std::size_t c = 0; c < grid_; ++c)
        positions_.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
  }
}

std::vector<std::string> SceneLexicon::words() const {
  std::vector<std::string> out(kFunctionWords.begin(), kFunctionWords.end());
  out.insert(out.end(), colors_.begin(), colors_.end());
  out.insert(out.end(), shapes_.begin(), shapes_.end());
  out.insert(out.end(), positions_.begin(), positions_.end());
  return out;
}

// shape one-hot | color one-hot | cell one-hot | cell thermometer | row, col
std::size_t SceneLexicon::feature_dim() const {
  return shapes_.size() + colors_.size() + 2 * positions_.size() + 2;
}

std::vector<double> SceneLexicon::encode(const SceneObject &object) const {
  std::vector<double> v(feature_dim(), 0.0);
  std::size_t at = 0;
  v[at + object.shape] = 1.0;
  at += shapes_.size();
  v[at + object.color] = 1.0;
  at += colors_.size();
  v[at + object.cell] = 1.0;
  at += positions_.size();
  for (std::size_t c = 0; c <= object.cell; ++c)
    v[at + c] = 0.5;
  at += positions_.size();
  const double denom = grid_ > 1 ? static_cast<double>(grid_ - 1) : 1.0;
  v[at] = static_cast<double>(object.cell / grid_) / denom;
  v[at + 1] = static_cast<double>(object.cell % grid_) / denom;
  return v;
}

std::string SceneLexicon::sentence(const SceneObject &object) const {
  return "the " + colors_[object.color] + " " + shapes_[object.shape] +
         " is in the " + positions_[object.cell] + ".";
}

std::vector<SyntheticScene>
generate_synthetic_corpus(std::uint64_t seed, std::size_t size,
                          const SyntheticOptions &options) {
  if (size == 0)
    throw std::invalid_argument("synthetic corpus size must be at least 1");
  const std::size_t cells = options.grid * options.grid;
  if (options.min_objects == 0 || options.min_objects > options.max_objects ||
      options.max_objects > cells)
    throw std::invalid_argument("synthetic object counts must satisfy "
                                "1 <= min <= max <= grid²");
  SceneLexicon lexicon(options);
  Rng rng(seed);
  std::vector<SyntheticScene> scenes;
  scenes.reserve(size);
  for (std::size_t s = 0; s < size; ++s) {
    SyntheticScene scene;
    char id[32];
    std::snprintf(id, sizeof id, "scene-%06zu", s);
    scene.id = id;
    const std::size_t span = options.max_objects - options.min_objects + 1;
    const std::size_t count = options.min_objects + rng.below(span);
    std::vector<std::size_t> free_cells(cells);
    for (std::size_t c = 0; c < cells; ++c)
      free_cells[c] = c;
    rng.shuffle(free_cells);
    for (std::size_t o = 0; o < count; ++o)
      scene.objects.push_back({rng.below(lexicon.shapes().size()),
                               rng.below(lexicon.colors().size()),
                               free_cells[o]});
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const auto &a, const auto &b) { return a.cell < b.cell; });

    const std::size_t dim = lexicon.feature_dim();
    std::vector<double> values;
    values.reserve(count * dim);
    for (const auto &obj : scene.objects) {
      for (double v : lexicon.encode(obj)) {
        const double noisy = options.noise > 0.0 ? v + options.noise * rng.normal() : v;
        // features live on disk as float32; keep memory and disk identical
        values.push_back(static_cast<double>(static_cast<float>(noisy)));
      }
    }
    scene.features = Tensor::from({count, dim}, std::move(values));
    for (const auto &obj : scene.objects) {
      if (!scene.paragraph.empty())
        scene.paragraph += ' ';
      scene.paragraph += lexicon.sentence(obj);
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'F', 'V', '1'};

void put_u32(std::ostream &out, std::uint32_t v) {
  const unsigned char bytes[4] = {
      static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
      static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char *>(bytes), 4);
}

std::uint32_t get_u32(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

} // namespace

void save_features(const std::filesystem::path &path, const Tensor &features) {
  if (features.rank() != 2)
    throw ShapeError("features must be [R, d], got " + to_string(features.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw FeatureFileError(FeatureFileError::Kind::io,
                           "cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(features.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(features.dim(1)));
  for (double v : features.data())
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out)
    throw FeatureFileError(FeatureFileError::Kind::io,
                           "write failed for " + path.string());
}

Tensor load_features(const std::filesystem::path &path, std::size_t expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FeatureFileError(FeatureFileError::Kind::io,
                           "cannot open feature file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FeatureFileError(FeatureFileError::Kind::malformed_header,
                           path.string() + ": missing PFV1 header");
  const std::uint32_t regions = get_u32(bytes.data() + 4);
  const std::uint32_t dim = get_u32(bytes.data() + 8);
  if (regions == 0 || dim == 0)
    throw FeatureFileError(FeatureFileError::Kind::malformed_header,
                           path.string() + ": header declares R=" +
                               std::to_string(regions) + ", d=" +
                               std::to_string(dim));
  if (expected_dim != 0 && dim != expected_dim)
    throw FeatureFileError(FeatureFileError::Kind::dimension_mismatch,
                           path.string() + ": feature dimension " +
                               std::to_string(dim) + ", expected " +
                               std::to_string(expected_dim));
  const std::size_t expected_bytes =
      12 + static_cast<std::size_t>(regions) * dim * 4;
  if (bytes.size() < expected_bytes)
    throw FeatureFileError(FeatureFileError::Kind::truncated,
                           path.string() + ": truncated, expected " +
                               std::to_string(expected_bytes) + " bytes, got " +
                               std::to_string(bytes.size()));
  if (bytes.size() > expected_bytes)
    throw FeatureFileError(FeatureFileError::Kind::dimension_mismatch,
                           path.string() + ": " +
                               std::to_string(bytes.size() - expected_bytes) +
                               " trailing bytes after the declared matrix");
  std::vector<double> values(static_cast<std::size_t>(regions) * dim);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = std::bit_cast<float>(get_u32(bytes.data() + 12 + 4 * i));
  return Tensor::from({regions, dim}, std::move(values));
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(),
                     j.at("feature_path").get<std::string>(),
                     j.at("paragraph").get<std::string>()});
    } catch (const nlohmann::json::exception &e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) +
                               ": bad manifest record: " + e.what());
    }
  }
  return out;
}

void write_manifest(const std::filesystem::path &path,
                    const std::vector<ManifestRecord> &records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto &r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["feature_path"] = r.feature_path;
    j["paragraph"] = r.paragraph;
    out << j.dump() << '\n';
  }
}

std::vector<Example> load_examples(const std::filesystem::path &manifest,
                                   const Vocab &vocab, std::size_t max_sentences,
                                   std::size_t max_words,
                                   std::size_t expected_dim) {
  std::vector<Example> out;
  const auto base = manifest.parent_path();
  for (auto &r : read_manifest(manifest)) {
    std::filesystem::path fp(r.feature_path);
    if (fp.is_relative())
      fp = base / fp;
    Example e;
    e.id = r.id;
    e.features = load_features(fp, expected_dim);
    e.encoded = encode_paragraph(r.paragraph, vocab, max_sentences, max_words);
    e.paragraph = std::move(r.paragraph);
    out.push_back(std::move(e));
  }
  return out;
}

std::pair<ParagraphBatch, FeatureBatch>
make_batch(const std::vector<Example> &examples,
           std::span<const std::size_t> indices) {
  std::vector<const EncodedParagraph *> paragraphs;
  std::vector<const Tensor *> features;
  std::vector<std::string> refs;
  for (auto i : indices) {
    paragraphs.push_back(&examples.at(i).encoded);
    features.push_back(&examples.at(i).features);
    refs.push_back(examples.at(i).id);
  }
  return {ParagraphBatch::from(paragraphs, std::move(refs)),
          FeatureBatch::from(features)};
}

} // namespace paracnn
