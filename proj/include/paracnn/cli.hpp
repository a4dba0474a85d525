// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  The paracnn command line: make-corpus, train, generate, eval,
 *         gradcheck. Each command is also callable in-process.
 */
#pragma once

#include "paracnn/config.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace paracnn {

/// Parses argv (argv[0] is the program name) and runs one command.
/// Returns the process exit code; messages go to `out` and `err`.
int run_cli(const std::vector<std::string> &args, std::ostream &out,
            std::ostream &err);

struct MakeCorpusOptions {
  std::uint64_t seed = 0;
  std::size_t size = 100;
  std::string out_dir;
  bool force = false;
  SyntheticOptions synthetic;
};
int cmd_make_corpus(const MakeCorpusOptions &options, std::ostream &out,
                    std::ostream &err);

struct TrainOptions {
  std::string config;
  std::vector<std::string> overrides;
  bool resume = false;
};
int cmd_train(const TrainOptions &options, std::ostream &out, std::ostream &err);

struct GenerateOptions {
  std::string checkpoint;
  std::string manifest;                // items to describe
  std::vector<std::string> features;   // or bare feature files
  std::string output;                  // empty: stdout
  std::string config;                  // optional; model section must match
  std::optional<std::size_t> sentences;
  bool adaptive = false;
  std::optional<std::size_t> min_sentences, max_sentences;
  std::optional<double> rep_penalty;
  std::optional<bool> block_trigrams;
  std::optional<std::string> penalty_scope;
};
int cmd_generate(const GenerateOptions &options, std::ostream &out,
                 std::ostream &err);

struct EvalOptions {
  std::string hypotheses;
  std::string ids; // default: hypotheses + ".ids"
  std::string manifest;
  std::string json_out;
};
int cmd_eval(const EvalOptions &options, std::ostream &out, std::ostream &err);

struct GradcheckEntry {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Gradient checks on the tiny configuration: every layer type, every
/// loss term, and each parameter group of the full model's loss.
std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed);
/// The tiny model used by gradcheck.
ModelConfig gradcheck_model_config();

struct GradcheckOptions {
  std::uint64_t seed = 7;
  std::string fault = "none"; // none | sigmoid | matmul
  double tolerance = 1e-4;
};
int cmd_gradcheck(const GradcheckOptions &options, std::ostream &out,
                  std::ostream &err);

} // namespace paracnn
