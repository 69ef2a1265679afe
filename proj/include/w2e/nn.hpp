#pragma once

#include <functional>
#include <span>
#include <vector>

#include "w2e/ops.hpp"
#include "w2e/rng.hpp"
#include "w2e/tensor.hpp"

namespace w2e {

// Parameter bundles. Weights init Normal(0, 0.02), biases zero, layer-norm
// gamma one.

struct LinearParams {
  TensorPtr w;  // [in, out]
  TensorPtr b;  // [out]
};

struct LayerNormParams {
  TensorPtr gamma;
  TensorPtr beta;
};

struct TransformerBlockParams {
  LayerNormParams ln1, ln2;
  LinearParams q, k, v, o;    // [d, d]
  LinearParams ff1;           // [d, 4d]
  LinearParams ff2;           // [4d, d]
};

TensorPtr make_param(std::vector<int> shape, Rng& rng, float stddev = 0.02f);
LinearParams make_linear(int in, int out, Rng& rng);
LayerNormParams make_layer_norm(int d);
TransformerBlockParams make_transformer_block(int d, Rng& rng);

// x[m, in] * w + b
TensorPtr affine(const TensorPtr& x, const LinearParams& p);

void collect(const LinearParams& p, std::vector<TensorPtr>& out);
void collect(const LayerNormParams& p, std::vector<TensorPtr>& out);
void collect(const TransformerBlockParams& p, std::vector<TensorPtr>& out);

// Optional per-head attention probabilities, for inspection.
struct AttentionTrace {
  std::vector<TensorPtr> head_probs;  // each [T, T]
};

// Pre-norm residual block over x[T, d]:
//   x + MHA(LN(x)); then + FFN(LN(.))
// MHA is softmax(Q K^T / sqrt(d_head)) V per head, concatenated, projected;
// FFN is Linear(gelu(Linear(.))) with hidden 4d. d must divide by n_heads.
TensorPtr transformer_block(const TensorPtr& x, const TransformerBlockParams& p,
                            int n_heads, AttentionTrace* trace = nullptr);

// Additive sinusoidal positional encoding table [T, d].
TensorPtr sinusoidal_positions(int T, int d);

// ---- optimizer ----

struct AdamState {
  std::vector<std::vector<float>> m, v;
  long step = 0;

  void init(std::span<const TensorPtr> params);
  bool initialized() const { return !m.empty(); }
};

// Standard Adam update with bias correction; reads gradients from
// param->grad. Errors: ShapeMismatch when state does not match params.
void adam_step(std::span<const TensorPtr> params, AdamState& state, float lr,
               float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

// ---- gradient verification ----

// Central differences (f(t+e) - f(t-e)) / 2e on a sampled subset of at least
// `min_coords` coordinates, compared against the tape gradient. Relative
// error is |a - n| / max(|a|, |n|, 1e-8); returns the max over the sample.
// f must be deterministic and rebuild its graph from `params` on every call.
double grad_check(const std::function<TensorPtr()>& f,
                  std::span<const TensorPtr> params, double eps = 1e-3,
                  int min_coords = 50, std::uint64_t seed = 0);

}  // namespace w2e
