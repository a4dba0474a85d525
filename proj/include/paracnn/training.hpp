// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  RMSprop, maximum-likelihood steps and the twin-network trainer.
 *
 * The backward network reads each paragraph's targets reversed. Its hidden
 * frames are re-aligned so that forward position t meets the backward frame
 * predicting the same token, and the forward network is pulled towards them
 * by an L2 term, a Wasserstein critic, or both.
 */
#pragma once

#include "paracnn/corpus.hpp"
#include "paracnn/model.hpp"

#include <functional>
#include <optional>

namespace paracnn {

enum class TwinMode { none, l2, adversarial, l2_plus_adversarial };
enum class ReverseScope { paragraph, sentence };

std::string to_string(TwinMode mode);
TwinMode parse_twin_mode(std::string_view text);
std::string to_string(ReverseScope scope);
ReverseScope parse_reverse_scope(std::string_view text);

struct TwinConfig {
  TwinMode mode = TwinMode::none;
  double lambda_l2 = 1.0;
  double lambda_adv = 0.001;
  double critic_lr = 2e-4;
  std::size_t critic_steps = 5;
  double clip = 0.01;
  std::size_t critic_hidden = 512;
  ReverseScope reverse = ReverseScope::paragraph;

  bool uses_l2() const {
    return mode == TwinMode::l2 || mode == TwinMode::l2_plus_adversarial;
  }
  bool uses_critic() const {
    return mode == TwinMode::adversarial || mode == TwinMode::l2_plus_adversarial;
  }
  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double lr = 4e-4;
  double rms_alpha = 0.9;
  double rms_eps = 1e-8;
  bool train_count_predictor = true;
  void validate() const;
};

class NonFiniteGradient : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// v <- αv + (1-α)g², p <- p - lr·g / (√v + ε). A parameter that received
/// no gradient is treated as g = 0.
class RmsProp {
public:
  RmsProp() = default;
  RmsProp(ParameterList params, double lr, double alpha = 0.9,
          double eps = 1e-8);

  /// Applies one update from the parameters' gradients. Throws
  /// NonFiniteGradient, leaving parameters and state untouched, if any
  /// gradient is NaN or infinite.
  void step();
  void zero_grad();

  const ParameterList &parameters() const { return params_; }
  std::vector<std::vector<double>> &averages() { return avg_; }
  const std::vector<std::vector<double>> &averages() const { return avg_; }
  double lr() const { return lr_; }
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t steps) { steps_ = steps; }

private:
  ParameterList params_;
  std::vector<std::vector<double>> avg_;
  double lr_ = 0.0, alpha_ = 0.9, eps_ = 1e-8;
  std::size_t steps_ = 0;
};

/// Flat-index permutation pairing each valid position with the position
/// its token moves to under reversal. It is an involution; invalid
/// positions map to themselves.
std::vector<std::size_t> reversal_permutation(const ParagraphBatch &batch,
                                              ReverseScope scope);
/// Reverses the valid tokens of each paragraph (or of each sentence); the
/// mask is unchanged.
ParagraphBatch reverse_targets(const ParagraphBatch &batch,
                               ReverseScope scope = ReverseScope::paragraph);

/// Valid positions of each paragraph in reading order, as [B, L] row
/// indices into the flattened [B·M·N] grid (-1 beyond a paragraph's end).
struct SequenceLayout {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int64_t> forward_rows;
  std::vector<std::int64_t> backward_rows; // aligned partner of forward_rows
  Mask mask;                               // [B·L], prefix-shaped
  std::size_t valid() const;
};

SequenceLayout sequence_layout(const ParagraphBatch &batch, ReverseScope scope);

/// hidden[B, M, N, C] -> [B, L, C] by gathering rows.
Tensor gather_sequence(const Tensor &hidden, std::span<const std::int64_t> rows,
                       std::size_t batch, std::size_t length);

/// Mean over valid positions and channels of (fwd - bwd)².
Tensor twin_l2_loss(const Tensor &fwd, const Tensor &bwd, const Mask &mask);

/// One-layer bidirectional GRU over hidden-frame sequences, then an affine
/// map of the final states to an unbounded score.
class Critic {
public:
  Critic() = default;
  Critic(std::size_t input_dim, std::size_t hidden_dim, Rng &rng);

  /// seq[G, T, C] -> scores [G]
  Tensor score(const Tensor &seq, const Mask &mask) const;
  /// Clamps every parameter to [-c, c].
  void clip(double c);
  double max_abs_weight() const;
  ParameterList parameters() const;

  BiGru gru;
  Linear head;
};

/// mean(score(fwd)) - mean(score(bwd))
Tensor critic_loss(const Critic &critic, const Tensor &fwd, const Tensor &bwd,
                   const Mask &mask);
/// -mean(score(fwd))
Tensor adversarial_generator_loss(const Critic &critic, const Tensor &fwd,
                                  const Mask &mask);
/// One optimiser step on the critic followed by clipping; returns the loss.
double critic_step(Critic &critic, const Tensor &fwd, const Tensor &bwd,
                   const Mask &mask, RmsProp &opt, double clip);

/// Teacher-forced cross-entropy, backprop and one optimiser step.
double mle_step(const ParaCnn &model, const ParagraphBatch &batch,
                const FeatureBatch &features, RmsProp &opt);

struct EpochStats {
  std::size_t epoch = 0;
  double ce_fwd = 0.0;
  std::optional<double> ce_bwd;
  std::optional<double> twin_l2;
  std::optional<double> critic_loss;
  std::optional<double> count_loss;
  std::size_t critic_updates = 0;
  std::size_t generator_updates = 0;
  double max_critic_weight = 0.0;
  double wallclock = 0.0;
};

/// Forward and backward generators, critic and sentence-count predictor
/// with their optimisers. Each component draws its initial weights from
/// its own seed-derived stream, so the forward network starts identically
/// whatever the twin mode.
class TwinTrainer {
public:
  TwinTrainer(const ModelConfig &model, const TwinConfig &twin,
              const TrainConfig &train, std::uint64_t seed);

  EpochStats train_epoch(const std::vector<Example> &data);
  /// Runs one batch; returns {ce_fwd, ce_bwd, twin_l2, critic_loss}.
  EpochStats train_batch(const ParagraphBatch &batch,
                         const FeatureBatch &features);
  /// Mean forward cross-entropy without gradients.
  double evaluate_ce(const std::vector<Example> &data) const;

  /// Called after every critic step with the post-clip max |weight|.
  std::function<void(double)> on_critic_step;

  const ModelConfig &model_config() const { return model_config_; }
  const TwinConfig &twin_config() const { return twin_; }
  const TrainConfig &train_config() const { return train_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t epoch() const { return epoch_; }
  void set_epoch(std::size_t epoch) { epoch_ = epoch; }

  /// Every parameter with a component prefix: fwd., bwd., critic., count.
  ParameterList parameters() const;
  /// Optimisers in a fixed order matching the prefixes above.
  std::vector<std::pair<std::string, RmsProp *>> optimizers();

  ParaCnn fwd, bwd;
  Critic critic;
  SentenceCountPredictor count;
  RmsProp opt_fwd, opt_bwd, opt_critic, opt_count;

private:
  ModelConfig model_config_;
  TwinConfig twin_;
  TrainConfig train_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
};

/// Seed-derived stream salts.
namespace stream {
inline constexpr std::uint64_t forward_init = 1;
inline constexpr std::uint64_t backward_init = 2;
inline constexpr std::uint64_t critic_init = 3;
inline constexpr std::uint64_t count_init = 4;
inline constexpr std::uint64_t shuffle = 1000;
} // namespace stream

} // namespace paracnn
