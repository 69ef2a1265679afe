#include "w2e/nn.hpp"

#include <algorithm>
#include <cmath>

#include "w2e/error.hpp"

namespace w2e {

TensorPtr make_param(std::vector<int> shape, Rng& rng, float stddev) {
  auto t = Tensor::zeros(std::move(shape));
  for (auto& v : t->data) v = static_cast<float>(rng.normal() * stddev);
  t->requires_grad = true;
  t->ensure_grad();
  return t;
}

LinearParams make_linear(int in, int out, Rng& rng) {
  LinearParams p;
  p.w = make_param({in, out}, rng);
  p.b = Tensor::zeros({out});
  p.b->requires_grad = true;
  p.b->ensure_grad();
  return p;
}

LayerNormParams make_layer_norm(int d) {
  LayerNormParams p;
  p.gamma = Tensor::full({d}, 1.0f);
  p.beta = Tensor::zeros({d});
  p.gamma->requires_grad = true;
  p.beta->requires_grad = true;
  p.gamma->ensure_grad();
  p.beta->ensure_grad();
  return p;
}

TransformerBlockParams make_transformer_block(int d, Rng& rng) {
  TransformerBlockParams p;
  p.ln1 = make_layer_norm(d);
  p.ln2 = make_layer_norm(d);
  p.q = make_linear(d, d, rng);
  p.k = make_linear(d, d, rng);
  p.v = make_linear(d, d, rng);
  p.o = make_linear(d, d, rng);
  p.ff1 = make_linear(d, 4 * d, rng);
  p.ff2 = make_linear(4 * d, d, rng);
  return p;
}

TensorPtr affine(const TensorPtr& x, const LinearParams& p) {
  return add_rows(matmul(x, p.w), p.b);
}

void collect(const LinearParams& p, std::vector<TensorPtr>& out) {
  out.push_back(p.w);
  out.push_back(p.b);
}

void collect(const LayerNormParams& p, std::vector<TensorPtr>& out) {
  out.push_back(p.gamma);
  out.push_back(p.beta);
}

void collect(const TransformerBlockParams& p, std::vector<TensorPtr>& out) {
  collect(p.ln1, out);
  collect(p.ln2, out);
  collect(p.q, out);
  collect(p.k, out);
  collect(p.v, out);
  collect(p.o, out);
  collect(p.ff1, out);
  collect(p.ff2, out);
}

TensorPtr transformer_block(const TensorPtr& x, const TransformerBlockParams& p,
                            int n_heads, AttentionTrace* trace) {
  if (x->rank() != 2) fail(Errc::shape_mismatch, "transformer_block: input must be [T, d]");
  const int d = x->dim(1);
  if (n_heads <= 0 || d % n_heads != 0) {
    fail(Errc::shape_mismatch, "transformer_block: d must divide by n_heads");
  }
  const int d_head = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));

  auto normed = layer_norm(x, p.ln1.gamma, p.ln1.beta);
  auto q = affine(normed, p.q);
  auto k = affine(normed, p.k);
  auto v = affine(normed, p.v);

  std::vector<TensorPtr> head_outs;
  head_outs.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(q, h * d_head, d_head);
    auto kh = slice_cols(k, h * d_head, d_head);
    auto vh = slice_cols(v, h * d_head, d_head);
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    auto probs = softmax(scores, -1);
    if (trace != nullptr) trace->head_probs.push_back(probs);
    head_outs.push_back(matmul(probs, vh));
  }
  auto attn = affine(concat_cols(head_outs), p.o);
  auto mid = add(x, attn);

  auto normed2 = layer_norm(mid, p.ln2.gamma, p.ln2.beta);
  auto ff = affine(gelu(affine(normed2, p.ff1)), p.ff2);
  return add(mid, ff);
}

TensorPtr sinusoidal_positions(int T, int d) {
  auto pe = Tensor::zeros({T, d});
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < d; i += 2) {
      double angle = t / std::pow(10000.0, static_cast<double>(i) / d);
      pe->data[static_cast<std::size_t>(t * d + i)] = static_cast<float>(std::sin(angle));
      if (i + 1 < d) {
        pe->data[static_cast<std::size_t>(t * d + i + 1)] = static_cast<float>(std::cos(angle));
      }
    }
  }
  return pe;
}

void AdamState::init(std::span<const TensorPtr> params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p->data.size(), 0.0f);
    v.emplace_back(p->data.size(), 0.0f);
  }
  step = 0;
}

void adam_step(std::span<const TensorPtr> params, AdamState& state, float lr,
               float beta1, float beta2, float eps) {
  if (!state.initialized()) state.init(params);
  if (state.m.size() != params.size()) {
    fail(Errc::shape_mismatch, "adam_step: state/parameter count mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    if (state.m[pi].size() != p->data.size()) {
      fail(Errc::shape_mismatch, "adam_step: moment buffer shape mismatch");
    }
    p->ensure_grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const float g = p->grad[i];
      m[i] = beta1 * m[i] + (1.0f - beta1) * g;
      v[i] = beta2 * v[i] + (1.0f - beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

double grad_check(const std::function<TensorPtr()>& f,
                  std::span<const TensorPtr> params, double eps, int min_coords,
                  std::uint64_t seed) {
  // analytic gradients from one precise-mode recorded pass
  std::vector<std::vector<float>> analytic;
  {
    zero_grads(std::vector<TensorPtr>(params.begin(), params.end()));
    Tape tape(/*precise=*/true);
    auto loss = f();
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p->grad);
  }

  // sampled coordinates across all parameters
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi]->data.size(); ++i) coords.emplace_back(pi, i);
  }
  Rng rng(seed ^ 0x5eedc0de);
  rng.shuffle(coords);
  const std::size_t n_check = std::min<std::size_t>(
      coords.size(), static_cast<std::size_t>(std::max(min_coords, 1)));

  auto eval = [&]() -> double {
    Tape tape(/*precise=*/true, /*record=*/false);
    auto loss = f();
    return loss->value();
  };

  double max_rel = 0.0;
  for (std::size_t ci = 0; ci < n_check; ++ci) {
    auto [pi, i] = coords[ci];
    auto& p = params[pi];
    const float x0 = p->data[i];
    const auto xp = static_cast<float>(x0 + eps);
    const auto xm = static_cast<float>(x0 - eps);
    // use the realized float32 step so the quotient is unbiased
    const double h = static_cast<double>(xp) - static_cast<double>(xm);

    p->data[i] = xp;
    const double lp = eval();
    p->data[i] = xm;
    const double lm = eval();
    p->data[i] = x0;

    const double numeric = (lp - lm) / h;
    const double a = analytic[pi][i];
    const double rel = std::abs(a - numeric) /
                       std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace w2e
