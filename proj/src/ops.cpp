// Differentiable tensor operations: float32 forward kernels with an optional
// float64 shadow, adjoints recorded on the active tape.

#include "w2e/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>

#include "w2e/error.hpp"

namespace w2e {

namespace {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapM = Eigen::Map<const MatRM<S>>;

bool precise_mode() {
  Tape* t = Tape::current();
  return t != nullptr && t->precise();
}

std::vector<double> widen(const Tensor& t) {
  if (!t.shadow.empty()) return t.shadow;
  return std::vector<double>(t.data.begin(), t.data.end());
}

void cast_shadow(Tensor& t) {
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    t.data[i] = static_cast<float>(t.shadow[i]);
  }
}

bool grad_wanted(std::initializer_list<TensorPtr> inputs) {
  Tape* tape = Tape::current();
  if (tape == nullptr || !tape->recording()) return false;
  for (const auto& t : inputs) {
    if (t && t->requires_grad) return true;
  }
  return false;
}

void prep_record(const TensorPtr& out, std::initializer_list<TensorPtr> inputs,
                 std::function<void()> fn) {
  out->requires_grad = true;
  out->ensure_grad();
  for (const auto& t : inputs) {
    if (t && t->requires_grad) t->ensure_grad();
  }
  Tape::current()->record(std::move(fn));
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    fail(Errc::shape_mismatch, std::string(op) + ": operand shapes differ");
  }
}

// Generic unary elementwise op. fwd and dfdx work in double; dfdx receives
// (input, output).
template <class F, class G>
TensorPtr unary_ew(const TensorPtr& a, F fwd, G dfdx) {
  auto out = Tensor::zeros(a->shape);
  const std::size_t n = a->data.size();
  for (std::size_t i = 0; i < n; ++i) {
    out->data[i] = static_cast<float>(fwd(static_cast<double>(a->data[i])));
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    out->shadow.resize(n);
    for (std::size_t i = 0; i < n; ++i) out->shadow[i] = fwd(wa[i]);
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, dfdx] {
      for (std::size_t i = 0; i < a->data.size(); ++i) {
        a->grad[i] += out->grad[i] *
                      static_cast<float>(dfdx(static_cast<double>(a->data[i]),
                                              static_cast<double>(out->data[i])));
      }
    });
  }
  return out;
}

// Generic binary elementwise op with partials dfda / dfdb as (a, b) -> double.
template <class F, class Ga, class Gb>
TensorPtr binary_ew(const TensorPtr& a, const TensorPtr& b, const char* name,
                    F fwd, Ga dfda, Gb dfdb) {
  check_same_shape(a, b, name);
  auto out = Tensor::zeros(a->shape);
  const std::size_t n = a->data.size();
  for (std::size_t i = 0; i < n; ++i) {
    out->data[i] = static_cast<float>(
        fwd(static_cast<double>(a->data[i]), static_cast<double>(b->data[i])));
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    auto wb = widen(*b);
    out->shadow.resize(n);
    for (std::size_t i = 0; i < n; ++i) out->shadow[i] = fwd(wa[i], wb[i]);
    cast_shadow(*out);
  }
  if (grad_wanted({a, b})) {
    prep_record(out, {a, b}, [a, b, out, dfda, dfdb] {
      for (std::size_t i = 0; i < a->data.size(); ++i) {
        double x = a->data[i];
        double y = b->data[i];
        if (a->requires_grad) a->grad[i] += out->grad[i] * static_cast<float>(dfda(x, y));
        if (b->requires_grad) b->grad[i] += out->grad[i] * static_cast<float>(dfdb(x, y));
      }
    });
  }
  return out;
}

struct AxisLanes {
  std::int64_t outer, n, inner;
};

AxisLanes resolve_axis(const Tensor& t, int axis) {
  int r = t.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail(Errc::shape_mismatch, "axis out of range");
  AxisLanes l{1, t.shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) l.outer *= t.shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) l.inner *= t.shape[static_cast<std::size_t>(i)];
  return l;
}

template <class S>
void softmax_lane(const S* x, S* y, std::int64_t n, std::int64_t stride) {
  S mx = x[0];
  for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j * stride]);
  double denom = 0.0;
  for (std::int64_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(x[j * stride] - mx));
  for (std::int64_t j = 0; j < n; ++j) {
    y[j * stride] = static_cast<S>(std::exp(static_cast<double>(x[j * stride] - mx)) / denom);
  }
}

template <class S>
void log_softmax_lane(const S* x, S* y, std::int64_t n, std::int64_t stride) {
  S mx = x[0];
  for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j * stride]);
  double denom = 0.0;
  for (std::int64_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(x[j * stride] - mx));
  double log_denom = std::log(denom);
  for (std::int64_t j = 0; j < n; ++j) {
    y[j * stride] = static_cast<S>(static_cast<double>(x[j * stride] - mx) - log_denom);
  }
}

void require_2d(const TensorPtr& t, const char* op) {
  if (t->rank() != 2) fail(Errc::shape_mismatch, std::string(op) + ": expected a 2-d tensor");
}

// im2col for strided valid convolution and for dilated same-length
// convolution (pad < 0 positions and positions >= T read as zero).
template <class S>
void im2col(const S* x, std::int64_t c_in, std::int64_t T, std::int64_t k,
            std::int64_t stride, std::int64_t dilation, std::int64_t pad_left,
            std::int64_t t_out, S* cols) {
  for (std::int64_t ci = 0; ci < c_in; ++ci) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
      S* dst = cols + (ci * k + kk) * t_out;
      for (std::int64_t t = 0; t < t_out; ++t) {
        std::int64_t pos = t * stride + kk * dilation - pad_left;
        dst[t] = (pos >= 0 && pos < T) ? x[ci * T + pos] : S(0);
      }
    }
  }
}

template <class S>
void conv_forward(const S* x, const S* w, const S* b, S* out, std::int64_t c_in,
                  std::int64_t T, std::int64_t c_out, std::int64_t k,
                  std::int64_t stride, std::int64_t dilation, std::int64_t pad_left,
                  std::int64_t t_out) {
  std::vector<S> cols(static_cast<std::size_t>(c_in * k * t_out));
  im2col(x, c_in, T, k, stride, dilation, pad_left, t_out, cols.data());
  CMapM<S> W(w, c_out, c_in * k);
  CMapM<S> C(cols.data(), c_in * k, t_out);
  MapM<S> O(out, c_out, t_out);
  O.noalias() = W * C;
  if (b != nullptr) {
    for (std::int64_t co = 0; co < c_out; ++co) O.row(co).array() += b[co];
  }
}

TensorPtr conv_impl(const TensorPtr& x, const TensorPtr& kernels,
                    const TensorPtr& bias, int stride, int dilation, bool same_pad) {
  require_2d(x, "conv1d");
  if (kernels->rank() != 3) fail(Errc::shape_mismatch, "conv1d: kernels must be [c_out, c_in, k]");
  const std::int64_t c_in = x->dim(0);
  const std::int64_t T = x->dim(1);
  const std::int64_t c_out = kernels->dim(0);
  const std::int64_t k = kernels->dim(2);
  if (kernels->dim(1) != c_in) fail(Errc::shape_mismatch, "conv1d: kernel c_in mismatch");
  if (bias && bias->numel() != c_out) fail(Errc::shape_mismatch, "conv1d: bias size mismatch");

  std::int64_t pad_left = 0;
  std::int64_t t_out;
  if (same_pad) {
    pad_left = (k - 1) * dilation / 2;
    t_out = T;
  } else {
    if (T < k) fail(Errc::input_too_short, "conv1d: input shorter than kernel");
    t_out = (T - k) / stride + 1;
  }

  auto out = Tensor::zeros({static_cast<int>(c_out), static_cast<int>(t_out)});
  conv_forward<float>(x->data.data(), kernels->data.data(),
                      bias ? bias->data.data() : nullptr, out->data.data(), c_in, T,
                      c_out, k, stride, dilation, pad_left, t_out);
  if (precise_mode()) {
    auto wx = widen(*x);
    auto wk = widen(*kernels);
    std::vector<double> wb;
    if (bias) wb = widen(*bias);
    out->shadow.resize(out->data.size());
    conv_forward<double>(wx.data(), wk.data(), bias ? wb.data() : nullptr,
                         out->shadow.data(), c_in, T, c_out, k, stride, dilation,
                         pad_left, t_out);
    cast_shadow(*out);
  }
  if (grad_wanted({x, kernels, bias})) {
    prep_record(out, {x, kernels, bias},
                [x, kernels, bias, out, c_in, T, c_out, k, stride, dilation,
                 pad_left, t_out] {
      std::vector<float> cols(static_cast<std::size_t>(c_in * k * t_out));
      im2col(x->data.data(), c_in, T, k, stride, dilation, pad_left, t_out, cols.data());
      CMapM<float> dO(out->grad.data(), c_out, t_out);
      if (kernels->requires_grad) {
        CMapM<float> C(cols.data(), c_in * k, t_out);
        MapM<float> dW(kernels->grad.data(), c_out, c_in * k);
        dW.noalias() += dO * C.transpose();
      }
      if (bias && bias->requires_grad) {
        for (std::int64_t co = 0; co < c_out; ++co) {
          bias->grad[static_cast<std::size_t>(co)] += dO.row(co).sum();
        }
      }
      if (x->requires_grad) {
        CMapM<float> W(kernels->data.data(), c_out, c_in * k);
        MatRM<float> dC = W.transpose() * dO;  // [c_in*k, t_out]
        for (std::int64_t ci = 0; ci < c_in; ++ci) {
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const float* src = dC.data() + (ci * k + kk) * t_out;
            for (std::int64_t t = 0; t < t_out; ++t) {
              std::int64_t pos = t * stride + kk * dilation - pad_left;
              if (pos >= 0 && pos < T) {
                x->grad[static_cast<std::size_t>(ci * T + pos)] += src[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  return binary_ew(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return 1.0; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  return binary_ew(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return -1.0; });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  return binary_ew(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double, double y) { return y; },
                   [](double x, double) { return x; });
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
  return binary_ew(a, b, "div", [](double x, double y) { return x / y; },
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); });
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
  return unary_ew(a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

TensorPtr scale(const TensorPtr& a, double c) {
  return unary_ew(a, [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

TensorPtr neg(const TensorPtr& a) { return scale(a, -1.0); }

TensorPtr sqrt_op(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

TensorPtr log_op(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

TensorPtr exp_op(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

TensorPtr xlogx(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
                  [](double x, double) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}

TensorPtr relu(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

TensorPtr gelu(const TensorPtr& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  auto fwd = [](double x) {
    double u = kC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  };
  auto grad = [](double x, double) {
    double u = kC * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
  };
  return unary_ew(a, fwd, grad);
}

TensorPtr elu(const TensorPtr& a, double alpha) {
  return unary_ew(a,
                  [alpha](double x) { return x > 0.0 ? x : alpha * (std::exp(x) - 1.0); },
                  [alpha](double x, double) { return x > 0.0 ? 1.0 : alpha * std::exp(x); });
}

TensorPtr tanh_op(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

TensorPtr sigmoid(const TensorPtr& a) {
  return unary_ew(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

TensorPtr add_rows(const TensorPtr& x, const TensorPtr& bias) {
  require_2d(x, "add_rows");
  const std::int64_t m = x->dim(0);
  const std::int64_t n = x->dim(1);
  if (bias->numel() != n) fail(Errc::shape_mismatch, "add_rows: bias length mismatch");

  auto out = Tensor::zeros(x->shape);
  for (std::int64_t r = 0; r < m; ++r) {
    for (std::int64_t c = 0; c < n; ++c) {
      out->data[static_cast<std::size_t>(r * n + c)] =
          x->data[static_cast<std::size_t>(r * n + c)] + bias->data[static_cast<std::size_t>(c)];
    }
  }
  if (precise_mode()) {
    auto wx = widen(*x);
    auto wb = widen(*bias);
    out->shadow.resize(out->data.size());
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < n; ++c) {
        out->shadow[static_cast<std::size_t>(r * n + c)] =
            wx[static_cast<std::size_t>(r * n + c)] + wb[static_cast<std::size_t>(c)];
      }
    }
    cast_shadow(*out);
  }
  if (grad_wanted({x, bias})) {
    prep_record(out, {x, bias}, [x, bias, out, m, n] {
      if (x->requires_grad) {
        for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
      }
      if (bias->requires_grad) {
        for (std::int64_t r = 0; r < m; ++r) {
          for (std::int64_t c = 0; c < n; ++c) {
            bias->grad[static_cast<std::size_t>(c)] +=
                out->grad[static_cast<std::size_t>(r * n + c)];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::int64_t m = a->dim(0);
  const std::int64_t k = a->dim(1);
  const std::int64_t n = b->dim(1);
  if (b->dim(0) != k) fail(Errc::shape_mismatch, "matmul: inner dimensions disagree");

  auto out = Tensor::zeros({static_cast<int>(m), static_cast<int>(n)});
  {
    CMapM<float> A(a->data.data(), m, k);
    CMapM<float> B(b->data.data(), k, n);
    MapM<float> C(out->data.data(), m, n);
    C.noalias() = A * B;
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    auto wb = widen(*b);
    out->shadow.resize(out->data.size());
    CMapM<double> A(wa.data(), m, k);
    CMapM<double> B(wb.data(), k, n);
    MapM<double> C(out->shadow.data(), m, n);
    C.noalias() = A * B;
    cast_shadow(*out);
  }
  if (grad_wanted({a, b})) {
    prep_record(out, {a, b}, [a, b, out, m, k, n] {
      CMapM<float> dC(out->grad.data(), m, n);
      if (a->requires_grad) {
        CMapM<float> B(b->data.data(), k, n);
        MapM<float> dA(a->grad.data(), m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (b->requires_grad) {
        CMapM<float> A(a->data.data(), m, k);
        MapM<float> dB(b->grad.data(), k, n);
        dB.noalias() += A.transpose() * dC;
      }
    });
  }
  return out;
}

TensorPtr transpose(const TensorPtr& a) {
  require_2d(a, "transpose");
  const std::int64_t m = a->dim(0);
  const std::int64_t n = a->dim(1);
  auto out = Tensor::zeros({static_cast<int>(n), static_cast<int>(m)});
  for (std::int64_t r = 0; r < m; ++r) {
    for (std::int64_t c = 0; c < n; ++c) {
      out->data[static_cast<std::size_t>(c * m + r)] = a->data[static_cast<std::size_t>(r * n + c)];
    }
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    out->shadow.resize(out->data.size());
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < n; ++c) {
        out->shadow[static_cast<std::size_t>(c * m + r)] = wa[static_cast<std::size_t>(r * n + c)];
      }
    }
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, m, n] {
      for (std::int64_t r = 0; r < m; ++r) {
        for (std::int64_t c = 0; c < n; ++c) {
          a->grad[static_cast<std::size_t>(r * n + c)] +=
              out->grad[static_cast<std::size_t>(c * m + r)];
        }
      }
    });
  }
  return out;
}

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernels, const TensorPtr& bias,
                 int stride) {
  if (stride <= 0) fail(Errc::shape_mismatch, "conv1d: stride must be positive");
  return conv_impl(x, kernels, bias, stride, 1, /*same_pad=*/false);
}

TensorPtr dilated_conv1d(const TensorPtr& x, const TensorPtr& kernels,
                         const TensorPtr& bias, int dilation) {
  if (dilation < 1) fail(Errc::shape_mismatch, "dilated_conv1d: dilation must be >= 1");
  // symmetric zero padding keeps the output the input length for any T >= 1
  return conv_impl(x, kernels, bias, 1, dilation, /*same_pad=*/true);
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta) {
  if (x->rank() < 1) fail(Errc::shape_mismatch, "layer_norm: rank must be >= 1");
  const std::int64_t d = x->dim(x->rank() - 1);
  if (gamma->numel() != d || beta->numel() != d) {
    fail(Errc::shape_mismatch, "layer_norm: gamma/beta length mismatch");
  }
  const std::int64_t rows = x->numel() / d;
  constexpr double kEps = 1e-5;

  auto out = Tensor::zeros(x->shape);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x->data.data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double dv = xr[j] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + kEps);
    (*means)[static_cast<std::size_t>(r)] = mu;
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    float* yr = out->data.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      double xhat = (xr[j] - mu) * inv;
      yr[j] = static_cast<float>(xhat * gamma->data[static_cast<std::size_t>(j)] +
                                 beta->data[static_cast<std::size_t>(j)]);
    }
  }
  if (precise_mode()) {
    auto wx = widen(*x);
    auto wg = widen(*gamma);
    auto wb = widen(*beta);
    out->shadow.resize(out->data.size());
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = wx.data() + r * d;
      double mu = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double dv = xr[j] - mu;
        var += dv * dv;
      }
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + kEps);
      for (std::int64_t j = 0; j < d; ++j) {
        out->shadow[static_cast<std::size_t>(r * d + j)] =
            (xr[j] - mu) * inv * wg[static_cast<std::size_t>(j)] + wb[static_cast<std::size_t>(j)];
      }
    }
    cast_shadow(*out);
  }
  if (grad_wanted({x, gamma, beta})) {
    prep_record(out, {x, gamma, beta}, [x, gamma, beta, out, rows, d, inv_std, means] {
      std::vector<double> g(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* xr = x->data.data() + r * d;
        const float* dy = out->grad.data() + r * d;
        const double mu = (*means)[static_cast<std::size_t>(r)];
        const double inv = (*inv_std)[static_cast<std::size_t>(r)];
        double g_mean = 0.0;
        double gx_mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          double xhat = (xr[j] - mu) * inv;
          double gj = static_cast<double>(dy[j]) * gamma->data[static_cast<std::size_t>(j)];
          g[static_cast<std::size_t>(j)] = gj;
          g_mean += gj;
          gx_mean += gj * xhat;
          if (gamma->requires_grad) {
            gamma->grad[static_cast<std::size_t>(j)] += static_cast<float>(dy[j] * xhat);
          }
          if (beta->requires_grad) beta->grad[static_cast<std::size_t>(j)] += dy[j];
        }
        g_mean /= static_cast<double>(d);
        gx_mean /= static_cast<double>(d);
        if (x->requires_grad) {
          for (std::int64_t j = 0; j < d; ++j) {
            double xhat = (xr[j] - mu) * inv;
            x->grad[static_cast<std::size_t>(r * d + j)] += static_cast<float>(
                inv * (g[static_cast<std::size_t>(j)] - g_mean - xhat * gx_mean));
          }
        }
      }
    });
  }
  return out;
}

TensorPtr slice_rows(const TensorPtr& x, int start, int n) {
  require_2d(x, "slice_rows");
  const std::int64_t m = x->dim(0);
  const std::int64_t cols = x->dim(1);
  if (start < 0 || n <= 0 || start + n > m) {
    fail(Errc::index_out_of_range, "slice_rows: range out of bounds");
  }
  auto out = Tensor::zeros({n, static_cast<int>(cols)});
  std::copy_n(x->data.begin() + start * cols, static_cast<std::size_t>(n) * cols,
              out->data.begin());
  if (precise_mode()) {
    auto wx = widen(*x);
    out->shadow.assign(wx.begin() + start * cols, wx.begin() + (start + n) * cols);
    cast_shadow(*out);
  }
  if (grad_wanted({x})) {
    prep_record(out, {x}, [x, out, start, n, cols] {
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * cols; ++i) {
        x->grad[static_cast<std::size_t>(start * cols + i)] += out->grad[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

TensorPtr slice_cols(const TensorPtr& x, int start, int n) {
  require_2d(x, "slice_cols");
  const std::int64_t m = x->dim(0);
  const std::int64_t cols = x->dim(1);
  if (start < 0 || n <= 0 || start + n > cols) {
    fail(Errc::index_out_of_range, "slice_cols: range out of bounds");
  }
  auto out = Tensor::zeros({static_cast<int>(m), n});
  for (std::int64_t r = 0; r < m; ++r) {
    std::copy_n(x->data.begin() + r * cols + start, n, out->data.begin() + r * n);
  }
  if (precise_mode()) {
    auto wx = widen(*x);
    out->shadow.resize(out->data.size());
    for (std::int64_t r = 0; r < m; ++r) {
      std::copy_n(wx.begin() + r * cols + start, n, out->shadow.begin() + r * n);
    }
    cast_shadow(*out);
  }
  if (grad_wanted({x})) {
    prep_record(out, {x}, [x, out, start, n, m, cols] {
      for (std::int64_t r = 0; r < m; ++r) {
        for (std::int64_t c = 0; c < n; ++c) {
          x->grad[static_cast<std::size_t>(r * cols + start + c)] +=
              out->grad[static_cast<std::size_t>(r * n + c)];
        }
      }
    });
  }
  return out;
}

TensorPtr concat_rows(std::span<const TensorPtr> parts) {
  if (parts.empty()) fail(Errc::shape_mismatch, "concat_rows: no parts");
  // rank-1 parts act as single rows
  auto cols_of = [](const TensorPtr& p) {
    return p->rank() == 2 ? static_cast<std::int64_t>(p->dim(1)) : p->numel();
  };
  auto rows_of = [](const TensorPtr& p) {
    return p->rank() == 2 ? static_cast<std::int64_t>(p->dim(0)) : std::int64_t{1};
  };
  const std::int64_t cols = cols_of(parts[0]);
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    if (p->rank() > 2) fail(Errc::shape_mismatch, "concat_rows: parts must be rank 1 or 2");
    if (cols_of(p) != cols) fail(Errc::shape_mismatch, "concat_rows: column count mismatch");
    rows += rows_of(p);
  }
  auto out = Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols)});
  const bool precise = precise_mode();
  if (precise) out->shadow.resize(out->data.size());
  std::int64_t at = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + at);
    if (precise) {
      auto wp = widen(*p);
      std::copy(wp.begin(), wp.end(), out->shadow.begin() + at);
    }
    at += p->numel();
  }
  if (precise) cast_shadow(*out);
  std::vector<TensorPtr> held(parts.begin(), parts.end());
  bool wants = false;
  Tape* tape = Tape::current();
  if (tape != nullptr && tape->recording()) {
    for (const auto& p : held) wants = wants || p->requires_grad;
  }
  if (wants) {
    out->requires_grad = true;
    out->ensure_grad();
    for (const auto& p : held) {
      if (p->requires_grad) p->ensure_grad();
    }
    tape->record([held, out] {
      std::int64_t at = 0;
      for (const auto& p : held) {
        if (p->requires_grad) {
          for (std::int64_t i = 0; i < p->numel(); ++i) {
            p->grad[static_cast<std::size_t>(i)] += out->grad[static_cast<std::size_t>(at + i)];
          }
        }
        at += p->numel();
      }
    });
  }
  return out;
}

TensorPtr concat_cols(std::span<const TensorPtr> parts) {
  if (parts.empty()) fail(Errc::shape_mismatch, "concat_cols: no parts");
  const std::int64_t rows = parts[0]->dim(0);
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p->dim(0) != rows) fail(Errc::shape_mismatch, "concat_cols: row count mismatch");
    cols += p->dim(1);
  }
  auto out = Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols)});
  const bool precise = precise_mode();
  if (precise) out->shadow.resize(out->data.size());
  std::int64_t col_at = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p->dim(1);
    for (std::int64_t r = 0; r < rows; ++r) {
      std::copy_n(p->data.begin() + r * pc, pc, out->data.begin() + r * cols + col_at);
    }
    if (precise) {
      auto wp = widen(*p);
      for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(wp.begin() + r * pc, pc, out->shadow.begin() + r * cols + col_at);
      }
    }
    col_at += pc;
  }
  if (precise) cast_shadow(*out);
  std::vector<TensorPtr> held(parts.begin(), parts.end());
  Tape* tape = Tape::current();
  bool wants = false;
  if (tape != nullptr && tape->recording()) {
    for (const auto& p : held) wants = wants || p->requires_grad;
  }
  if (wants) {
    out->requires_grad = true;
    out->ensure_grad();
    for (const auto& p : held) {
      if (p->requires_grad) p->ensure_grad();
    }
    tape->record([held, out, rows, cols] {
      std::int64_t col_at = 0;
      for (const auto& p : held) {
        const std::int64_t pc = p->dim(1);
        if (p->requires_grad) {
          for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < pc; ++c) {
              p->grad[static_cast<std::size_t>(r * pc + c)] +=
                  out->grad[static_cast<std::size_t>(r * cols + col_at + c)];
            }
          }
        }
        col_at += pc;
      }
    });
  }
  return out;
}

TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_lookup");
  const std::int64_t v = table->dim(0);
  const std::int64_t d = table->dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      fail(Errc::index_out_of_range, "embedding id " + std::to_string(id) + " outside [0, " +
                                         std::to_string(v) + ")");
    }
  }
  const auto n = static_cast<std::int64_t>(ids.size());
  auto out = Tensor::zeros({static_cast<int>(n), static_cast<int>(d)});
  if (n == 0) return out;
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(table->data.begin() + ids[static_cast<std::size_t>(i)] * d, d,
                out->data.begin() + i * d);
  }
  if (precise_mode()) {
    auto wt = widen(*table);
    out->shadow.resize(out->data.size());
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(wt.begin() + ids[static_cast<std::size_t>(i)] * d, d, out->shadow.begin() + i * d);
    }
    cast_shadow(*out);
  }
  if (grad_wanted({table})) {
    prep_record(out, {table}, [table, out, ids, d] {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
          table->grad[static_cast<std::size_t>(ids[i] * d + j)] +=
              out->grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
        }
      }
    });
  }
  return out;
}

TensorPtr mask_rows(const TensorPtr& x, const std::vector<int>& rows,
                    const TensorPtr& fill_row) {
  require_2d(x, "mask_rows");
  const std::int64_t m = x->dim(0);
  const std::int64_t d = x->dim(1);
  if (fill_row->numel() != d) fail(Errc::shape_mismatch, "mask_rows: fill row length mismatch");
  for (int r : rows) {
    if (r < 0 || r >= m) fail(Errc::index_out_of_range, "mask_rows: row out of range");
  }
  auto out = Tensor::zeros(x->shape);
  out->data = x->data;
  for (int r : rows) {
    std::copy_n(fill_row->data.begin(), d, out->data.begin() + static_cast<std::int64_t>(r) * d);
  }
  if (precise_mode()) {
    out->shadow = widen(*x);
    auto wf = widen(*fill_row);
    for (int r : rows) {
      std::copy_n(wf.begin(), d, out->shadow.begin() + static_cast<std::int64_t>(r) * d);
    }
    cast_shadow(*out);
  }
  if (grad_wanted({x, fill_row})) {
    prep_record(out, {x, fill_row}, [x, fill_row, out, rows, m, d] {
      std::vector<bool> masked(static_cast<std::size_t>(m), false);
      for (int r : rows) masked[static_cast<std::size_t>(r)] = true;
      for (std::int64_t r = 0; r < m; ++r) {
        const float* g = out->grad.data() + r * d;
        if (masked[static_cast<std::size_t>(r)]) {
          if (fill_row->requires_grad) {
            for (std::int64_t j = 0; j < d; ++j) fill_row->grad[static_cast<std::size_t>(j)] += g[j];
          }
        } else if (x->requires_grad) {
          for (std::int64_t j = 0; j < d; ++j) {
            x->grad[static_cast<std::size_t>(r * d + j)] += g[j];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr stop_gradient(const TensorPtr& a) {
  auto out = Tensor::zeros(a->shape);
  out->data = a->data;
  if (precise_mode()) {
    out->shadow = widen(*a);
  }
  return out;
}

TensorPtr sum(const TensorPtr& a) {
  auto out = Tensor::zeros({1});
  double acc = 0.0;
  for (float v : a->data) acc += v;
  out->data[0] = static_cast<float>(acc);
  if (precise_mode()) {
    auto wa = widen(*a);
    double s = 0.0;
    for (double v : wa) s += v;
    out->shadow = {s};
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out] {
      const float g = out->grad[0];
      for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
  }
  return out;
}

TensorPtr mean(const TensorPtr& a) {
  const auto n = static_cast<double>(a->numel());
  auto out = Tensor::zeros({1});
  double acc = 0.0;
  for (float v : a->data) acc += v;
  out->data[0] = static_cast<float>(acc / n);
  if (precise_mode()) {
    auto wa = widen(*a);
    double s = 0.0;
    for (double v : wa) s += v;
    out->shadow = {s / n};
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, n] {
      const float g = static_cast<float>(out->grad[0] / n);
      for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
  }
  return out;
}

TensorPtr pick(const TensorPtr& a, std::int64_t flat_index) {
  if (flat_index < 0 || flat_index >= a->numel()) {
    fail(Errc::index_out_of_range, "pick: index out of range");
  }
  auto out = Tensor::zeros({1});
  out->data[0] = a->data[static_cast<std::size_t>(flat_index)];
  if (precise_mode()) {
    auto wa = widen(*a);
    out->shadow = {wa[static_cast<std::size_t>(flat_index)]};
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, flat_index] {
      a->grad[static_cast<std::size_t>(flat_index)] += out->grad[0];
    });
  }
  return out;
}

TensorPtr softmax(const TensorPtr& a, int axis) {
  AxisLanes l = resolve_axis(*a, axis);
  auto out = Tensor::zeros(a->shape);
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t i = 0; i < l.inner; ++i) {
      const std::int64_t base = o * l.n * l.inner + i;
      softmax_lane<float>(a->data.data() + base, out->data.data() + base, l.n, l.inner);
    }
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    out->shadow.resize(out->data.size());
    for (std::int64_t o = 0; o < l.outer; ++o) {
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const std::int64_t base = o * l.n * l.inner + i;
        softmax_lane<double>(wa.data() + base, out->shadow.data() + base, l.n, l.inner);
      }
    }
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, l] {
      for (std::int64_t o = 0; o < l.outer; ++o) {
        for (std::int64_t i = 0; i < l.inner; ++i) {
          const std::int64_t base = o * l.n * l.inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < l.n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(base + j * l.inner);
            dot += static_cast<double>(out->grad[idx]) * out->data[idx];
          }
          for (std::int64_t j = 0; j < l.n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(base + j * l.inner);
            a->grad[idx] += static_cast<float>(
                out->data[idx] * (static_cast<double>(out->grad[idx]) - dot));
          }
        }
      }
    });
  }
  return out;
}

TensorPtr log_softmax(const TensorPtr& a, int axis) {
  AxisLanes l = resolve_axis(*a, axis);
  auto out = Tensor::zeros(a->shape);
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t i = 0; i < l.inner; ++i) {
      const std::int64_t base = o * l.n * l.inner + i;
      log_softmax_lane<float>(a->data.data() + base, out->data.data() + base, l.n, l.inner);
    }
  }
  if (precise_mode()) {
    auto wa = widen(*a);
    out->shadow.resize(out->data.size());
    for (std::int64_t o = 0; o < l.outer; ++o) {
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const std::int64_t base = o * l.n * l.inner + i;
        log_softmax_lane<double>(wa.data() + base, out->shadow.data() + base, l.n, l.inner);
      }
    }
    cast_shadow(*out);
  }
  if (grad_wanted({a})) {
    prep_record(out, {a}, [a, out, l] {
      for (std::int64_t o = 0; o < l.outer; ++o) {
        for (std::int64_t i = 0; i < l.inner; ++i) {
          const std::int64_t base = o * l.n * l.inner + i;
          double gsum = 0.0;
          for (std::int64_t j = 0; j < l.n; ++j) {
            gsum += out->grad[static_cast<std::size_t>(base + j * l.inner)];
          }
          for (std::int64_t j = 0; j < l.n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(base + j * l.inner);
            a->grad[idx] += static_cast<float>(
                static_cast<double>(out->grad[idx]) -
                std::exp(static_cast<double>(out->data[idx])) * gsum);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace w2e
