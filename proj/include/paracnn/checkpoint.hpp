// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Binary checkpoint container.
 *
 * Layout, little-endian:
 *   "PCKPT1"
 *   u64 n, n bytes of JSON {config, vocab, min_word_freq, seed, epoch,
 *                            best_val_ce}
 *   u64 count, then per parameter:
 *     u32 name length, name, u32 rank, rank × u64 extents, f64 values
 *   u64 count, then per optimiser:
 *     u32 name length, name, u64 steps, u64 slots,
 *     per slot: u64 n, n × f64 running averages
 */
#pragma once

#include "paracnn/config.hpp"
#include "paracnn/corpus.hpp"

#include <filesystem>
#include <map>
#include <optional>

namespace paracnn {

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

struct StoredOptimizer {
  std::uint64_t steps = 0;
  std::vector<std::vector<double>> averages;
};

struct Checkpoint {
  RunConfig config;
  std::vector<std::string> vocab;
  std::size_t min_word_freq = 0;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::optional<double> best_val_ce;
  std::vector<std::pair<std::string, StoredTensor>> parameters;
  std::vector<std::pair<std::string, StoredOptimizer>> optimizers;

  const StoredTensor *find(std::string_view name) const;
  /// Drops every parameter and optimiser whose name starts with `prefix`.
  void erase_prefix(std::string_view prefix);
};

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &path);

/// Captures a trainer's full state.
Checkpoint snapshot(TwinTrainer &trainer, const RunConfig &config,
                    const Vocab &vocab, std::optional<double> best_val_ce);
/// Copies every stored parameter and optimiser state into the trainer;
/// shapes and the parameter set must match exactly.
void restore(TwinTrainer &trainer, const Checkpoint &ckpt);

/// Copies the parameters named prefix + p.name into `params`; throws if any
/// is missing or mis-shaped.
void load_parameters(const Checkpoint &ckpt, const std::string &prefix,
                     const ParameterList &params);

/// The forward generator alone, as used for inference.
ParaCnn load_generator(const Checkpoint &ckpt);
/// The sentence-count predictor, if the checkpoint carries one.
std::optional<SentenceCountPredictor> load_count_predictor(const Checkpoint &ckpt);

} // namespace paracnn
