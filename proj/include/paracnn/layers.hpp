// SPDX-License-Identifier: Apache-2.0
/**
 * @file   layers.hpp
 * @brief  Neural building blocks on top of the tensor tape.
 *
 * Sequence tensors are laid out [G, T, C]: G independent sequences of T
 * frames with C channels. Masks are flat, one byte per (g, t).
 * All parameters are initialised uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
 */
#pragma once

#include "paracnn/rng.hpp"
#include "paracnn/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace paracnn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng &rng);

class Linear {
public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng &rng, bool with_bias = true);

  /// x[..., in] -> [..., out]
  Tensor forward(const Tensor &x) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Tensor weight; // [in, out]
  Tensor bias;   // [out], may be undefined

private:
  std::size_t in_ = 0, out_ = 0;
};

/// Masked (causal) 1-D convolution with a gated linear unit.
///
/// Input is left-padded with kernel-1 zero frames, so output t only sees
/// frames <= t. The 2·out pre-activation [A; B] becomes A ⊙ σ(B); when the
/// residual flag is set and in == out the input is added back.
class CausalConvBlock {
public:
  CausalConvBlock() = default;
  CausalConvBlock(std::size_t in, std::size_t out, std::size_t kernel,
                  bool residual, Rng &rng);

  /// x[G, T, in] -> [G, T, out]
  Tensor forward(const Tensor &x) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  std::size_t kernel() const { return kernel_; }
  bool residual() const { return residual_ && in_ == out_; }

  Tensor weight; // [kernel, in, 2·out]; tap 0 is the oldest frame
  Tensor bias;   // [2·out]

private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 0;
  bool residual_ = false;
};

/// Two-layer word embedding: a lookup table (the one-hot layer) followed by
/// a learned linear map.
class Embedding {
public:
  Embedding() = default;
  Embedding(std::size_t vocab, std::size_t dim, Rng &rng);

  /// ids -> [ids.size(), dim]; throws ShapeError for ids outside the table.
  Tensor forward(std::span<const std::int64_t> ids) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  std::size_t vocab() const { return vocab_; }
  std::size_t dim() const { return dim_; }

  Tensor table; // [vocab, dim]
  Linear projection;

private:
  std::size_t vocab_ = 0, dim_ = 0;
};

/// Additive soft attention over image regions:
/// e_r = vᵀ tanh(W_h h + W_v V_r), weights = softmax(e), context = Σ w_r V_r.
class VisualAttention {
public:
  struct Output {
    Tensor context; // [G, L, region_dim]
    Tensor weights; // [G, L, R]
  };

  VisualAttention() = default;
  VisualAttention(std::size_t query_dim, std::size_t region_dim,
                  std::size_t hidden_dim, Rng &rng);

  /// queries[G, L, query_dim], regions[G, R, region_dim], region_mask[G·R]
  Output forward(const Tensor &queries, const Tensor &regions,
                 const Mask &region_mask) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  Linear query; // W_h, no bias
  Linear key;   // W_v, no bias
  Tensor scorer; // v, [hidden, 1]
};

/// Multi-head scaled dot-product self-attention, full (non-causal).
class MultiHeadSelfAttention {
public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t dim, std::size_t heads, Rng &rng);

  /// x[G, T, dim], key_mask[G·T] -> [G, T, dim]. When `weights` is given it
  /// receives the attention matrix [G·heads, T, T].
  Tensor forward(const Tensor &x, const Mask &key_mask,
                 Tensor *weights = nullptr) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  std::size_t heads() const { return heads_; }

  Linear q, k, v, o;

private:
  std::size_t dim_ = 0, heads_ = 0;
};

/// One direction of a gated recurrent unit (gate order r, z, n).
struct GruDirection {
  Linear input;  // [d, 3h]
  Linear hidden; // [h, 3h]

  GruDirection() = default;
  GruDirection(std::size_t in, std::size_t hidden_dim, Rng &rng);
  /// gates_x[G, 3h] (input contribution), h[G, h] -> next h[G, h]
  Tensor step(const Tensor &gates_x, const Tensor &h) const;
  void collect(const std::string &prefix, ParameterList &out) const;
};

class BiGru {
public:
  struct Output {
    Tensor outputs; // [G, T, 2h] = [forward; backward]
    Tensor final;   // [G, 2h] = [forward after last valid; backward at t=0]
  };

  BiGru() = default;
  BiGru(std::size_t in, std::size_t hidden_dim, Rng &rng);

  /// seq[G, T, in]; mask[G·T] must be prefix-shaped per sequence. Past a
  /// sequence's end the forward state is held and the backward state is 0.
  Output forward(const Tensor &seq, const Mask &mask) const;
  void collect(const std::string &prefix, ParameterList &out) const;

  std::size_t hidden_dim() const { return hidden_; }

  GruDirection fwd, bwd;

private:
  std::size_t hidden_ = 0;
};

} // namespace paracnn
