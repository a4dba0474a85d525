// SPDX-License-Identifier: Apache-2.0
#include "paracnn/layers.hpp"

#include <cmath>

namespace paracnn {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng &rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(numel_of(shape));
  for (auto &v : values)
    v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(values), true);
}

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng &rng, bool with_bias)
    : in_(in), out_(out) {
  weight = init_uniform({in, out}, in, rng);
  if (with_bias)
    bias = init_uniform({out}, in, rng);
}

Tensor Linear::forward(const Tensor &x) const {
  return linear(x, weight, bias);
}

void Linear::collect(const std::string &prefix, ParameterList &out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined())
    out.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------------------

CausalConvBlock::CausalConvBlock(std::size_t in, std::size_t out,
                                 std::size_t kernel, bool residual, Rng &rng)
    : in_(in), out_(out), kernel_(kernel), residual_(residual) {
  weight = init_uniform({kernel, in, 2 * out}, kernel * in, rng);
  bias = init_uniform({2 * out}, kernel * in, rng);
}

Tensor CausalConvBlock::forward(const Tensor &x) const {
  if (x.rank() != 3 || x.dim(2) != in_)
    throw ShapeError("causal conv expects [G, T, " + std::to_string(in_) +
                     "], got " + to_string(x.shape()));
  const std::size_t groups = x.dim(0), steps = x.dim(1);
  Tensor frames = causal_unfold(x, kernel_);
  Tensor pre = linear(frames, reshape(weight, {kernel_ * in_, 2 * out_}), bias);
  Tensor y = glu(pre);
  if (residual())
    y = add(y, x);
  return reshape(y, {groups, steps, out_});
}

void CausalConvBlock::collect(const std::string &prefix,
                              ParameterList &out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------------------

Embedding::Embedding(std::size_t vocab, std::size_t dim, Rng &rng)
    : vocab_(vocab), dim_(dim) {
  table = init_uniform({vocab, dim}, vocab, rng);
  projection = Linear(dim, dim, rng);
}

Tensor Embedding::forward(std::span<const std::int64_t> ids) const {
  for (auto id : ids)
    if (id < 0 || id >= static_cast<std::int64_t>(vocab_))
      throw ShapeError("token index " + std::to_string(id) +
                       " outside vocabulary of " + std::to_string(vocab_));
  return projection.forward(gather_rows(table, ids));
}

void Embedding::collect(const std::string &prefix, ParameterList &out) const {
  out.push_back({prefix + ".table", table});
  projection.collect(prefix + ".projection", out);
}

// ---------------------------------------------------------------------------

VisualAttention::VisualAttention(std::size_t query_dim, std::size_t region_dim,
                                 std::size_t hidden_dim, Rng &rng)
    : query(query_dim, hidden_dim, rng, false),
      key(region_dim, hidden_dim, rng, false),
      scorer(init_uniform({hidden_dim, 1}, hidden_dim, rng)) {}

VisualAttention::Output VisualAttention::forward(const Tensor &queries,
                                                 const Tensor &regions,
                                                 const Mask &region_mask) const {
  if (queries.rank() != 3 || regions.rank() != 3 ||
      queries.dim(0) != regions.dim(0))
    throw ShapeError("visual attention: queries " + to_string(queries.shape()) +
                     " and regions " + to_string(regions.shape()) +
                     " must be [G, L, d] and [G, R, d_v]");
  const std::size_t groups = queries.dim(0), steps = queries.dim(1),
                    count = regions.dim(1);
  if (region_mask.size() != groups * count)
    throw ShapeError("visual attention: region mask size mismatch");

  Tensor hidden = tanh(pairwise_add(query.forward(queries), key.forward(regions)));
  Tensor scores = reshape(matmul(hidden, scorer), {groups, steps, count});
  Mask full(groups * steps * count);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t l = 0; l < steps; ++l)
      for (std::size_t r = 0; r < count; ++r)
        full[(g * steps + l) * count + r] = region_mask[g * count + r];
  Tensor weights = softmax(scores, 2, &full);
  return {bmm(weights, regions), weights};
}

void VisualAttention::collect(const std::string &prefix,
                              ParameterList &out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  out.push_back({prefix + ".scorer", scorer});
}

// ---------------------------------------------------------------------------

MultiHeadSelfAttention::MultiHeadSelfAttention(std::size_t dim,
                                               std::size_t heads, Rng &rng)
    : dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads != 0)
    throw ShapeError("self-attention: dim " + std::to_string(dim) +
                     " not divisible by " + std::to_string(heads) + " heads");
  q = Linear(dim, dim, rng);
  k = Linear(dim, dim, rng, false); // a key bias shifts every score of a query equally
  v = Linear(dim, dim, rng);
  o = Linear(dim, dim, rng);
}

Tensor MultiHeadSelfAttention::forward(const Tensor &x, const Mask &key_mask,
                                       Tensor *weights) const {
  if (x.rank() != 3 || x.dim(2) != dim_)
    throw ShapeError("self-attention expects [G, T, " + std::to_string(dim_) +
                     "], got " + to_string(x.shape()));
  const std::size_t groups = x.dim(0), steps = x.dim(1);
  const std::size_t head_dim = dim_ / heads_;
  if (key_mask.size() != groups * steps)
    throw ShapeError("self-attention: key mask size mismatch");

  auto split_heads = [&](const Tensor &t) {
    Tensor r = reshape(t, {groups, steps, heads_, head_dim});
    return reshape(transpose(r, 1, 2), {groups * heads_, steps, head_dim});
  };
  Tensor qh = split_heads(q.forward(x));
  Tensor kh = split_heads(k.forward(x));
  Tensor vh = split_heads(v.forward(x));

  Tensor scores =
      scale(bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Mask full(groups * heads_ * steps * steps);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads_; ++h)
      for (std::size_t i = 0; i < steps; ++i)
        for (std::size_t j = 0; j < steps; ++j)
          full[((g * heads_ + h) * steps + i) * steps + j] =
              key_mask[g * steps + j];
  Tensor attn = softmax(scores, 2, &full);
  if (weights)
    *weights = attn;

  Tensor mixed = reshape(bmm(attn, vh), {groups, heads_, steps, head_dim});
  Tensor merged = reshape(transpose(mixed, 1, 2), {groups, steps, dim_});
  return o.forward(merged);
}

void MultiHeadSelfAttention::collect(const std::string &prefix,
                                     ParameterList &out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

// ---------------------------------------------------------------------------

GruDirection::GruDirection(std::size_t in, std::size_t hidden_dim, Rng &rng)
    : input(in, 3 * hidden_dim, rng), hidden(hidden_dim, 3 * hidden_dim, rng) {}

Tensor GruDirection::step(const Tensor &gates_x, const Tensor &h) const {
  const std::size_t width = h.dim(1);
  Tensor gates_h = hidden.forward(h);
  Tensor r = sigmoid(add(slice(gates_x, 1, 0, width), slice(gates_h, 1, 0, width)));
  Tensor z = sigmoid(
      add(slice(gates_x, 1, width, width), slice(gates_h, 1, width, width)));
  Tensor n = tanh(add(slice(gates_x, 1, 2 * width, width),
                      mul(r, slice(gates_h, 1, 2 * width, width))));
  // h' = (1 - z) ⊙ n + z ⊙ h
  return add(mul(add_scalar(scale(z, -1.0), 1.0), n), mul(z, h));
}

void GruDirection::collect(const std::string &prefix, ParameterList &out) const {
  input.collect(prefix + ".input", out);
  hidden.collect(prefix + ".hidden", out);
}

BiGru::BiGru(std::size_t in, std::size_t hidden_dim, Rng &rng)
    : fwd(in, hidden_dim, rng), bwd(in, hidden_dim, rng), hidden_(hidden_dim) {}

BiGru::Output BiGru::forward(const Tensor &seq, const Mask &mask) const {
  if (seq.rank() != 3)
    throw ShapeError("bi-GRU expects [G, T, d], got " + to_string(seq.shape()));
  const std::size_t groups = seq.dim(0), steps = seq.dim(1), h = hidden_;
  if (mask.size() != groups * steps)
    throw ShapeError("bi-GRU: mask size mismatch");

  auto run = [&](const GruDirection &dir, bool reverse) {
    Tensor gates = dir.input.forward(seq); // [G, T, 3h]
    Tensor state = Tensor::zeros({groups, h});
    std::vector<Tensor> outs(steps);
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t t = reverse ? steps - 1 - s : s;
      Tensor gx = reshape(slice(gates, 1, t, 1), {groups, 3 * h});
      Tensor next = dir.step(gx, state);
      bool all_valid = true;
      std::vector<double> keep(groups * h);
      for (std::size_t g = 0; g < groups; ++g) {
        const bool valid = mask[g * steps + t] != 0;
        all_valid = all_valid && valid;
        std::fill_n(keep.begin() + g * h, h, valid ? 1.0 : 0.0);
      }
      if (all_valid) {
        state = next;
      } else {
        Tensor m = Tensor::from({groups, h}, keep);
        Tensor hold = Tensor::from({groups, h}, [&] {
          for (auto &v : keep)
            v = 1.0 - v;
          return keep;
        }());
        state = add(mul(m, next), mul(hold, state));
      }
      outs[t] = reshape(state, {groups, 1, h});
    }
    return std::pair{concat(outs, 1), state};
  };

  auto [out_f, final_f] = run(fwd, false);
  auto [out_b, final_b] = run(bwd, true);
  return {concat({out_f, out_b}, 2), concat({final_f, final_b}, 1)};
}

void BiGru::collect(const std::string &prefix, ParameterList &out) const {
  fwd.collect(prefix + ".fwd", out);
  bwd.collect(prefix + ".bwd", out);
}

} // namespace paracnn
