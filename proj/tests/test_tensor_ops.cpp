#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "w2e/error.hpp"
#include "w2e/nn.hpp"
#include "w2e/ops.hpp"
#include "w2e/rng.hpp"
#include "w2e/tensor.hpp"

using namespace w2e;

namespace {

TensorPtr random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0,
                        bool needs_grad = false) {
  auto t = Tensor::zeros(std::move(shape));
  for (auto& v : t->data) v = static_cast<float>(rng.normal() * scale);
  if (needs_grad) {
    t->requires_grad = true;
    t->ensure_grad();
  }
  return t;
}

// Oracle: naive triple-loop matrix product in double.
std::vector<double> naive_matmul(const std::vector<float>& a, const std::vector<float>& b,
                                 int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int x = 0; x < k; ++x) acc += static_cast<double>(a[i * k + x]) * b[x * n + j];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
  return c;
}

// Oracle: direct nested-loop convolution (valid, strided, optionally dilated
// with symmetric padding).
std::vector<double> loop_conv(const std::vector<float>& x, int c_in, int T,
                              const std::vector<float>& w, int c_out, int k, int stride,
                              int dilation, bool same_pad, const std::vector<float>* bias) {
  int pad_left = same_pad ? (k - 1) * dilation / 2 : 0;
  int t_out = same_pad ? T : (T - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(c_out) * t_out, 0.0);
  for (int co = 0; co < c_out; ++co) {
    for (int t = 0; t < t_out; ++t) {
      double acc = bias != nullptr ? (*bias)[static_cast<std::size_t>(co)] : 0.0;
      for (int ci = 0; ci < c_in; ++ci) {
        for (int kk = 0; kk < k; ++kk) {
          int pos = t * stride + kk * dilation - pad_left;
          if (pos >= 0 && pos < T) {
            acc += static_cast<double>(w[(co * c_in + ci) * k + kk]) * x[ci * T + pos];
          }
        }
      }
      out[static_cast<std::size_t>(co * t_out + t)] = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul against identity and hand arithmetic") {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto ai = matmul(a, eye);
  CHECK(ai->data == a->data);

  auto ones = Tensor::from({2, 1}, {1, 1});
  auto r = matmul(a, ones);
  CHECK(r->data[0] == doctest::Approx(3));
  CHECK(r->data[1] == doctest::Approx(7));
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(3);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto c = matmul(a, b);
  auto expect = naive_matmul(a->data, b->data, 3, 4, 2);
  for (std::size_t i = 0; i < c->data.size(); ++i) {
    CHECK(std::abs(c->data[i] - expect[i]) < 1e-6);
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
}

TEST_CASE("conv1d with k=1 stride=1 unit kernel is the identity per channel") {
  Rng rng(5);
  auto x = random_tensor({2, 6}, rng);
  auto w = Tensor::from({2, 2, 1}, {1, 0, 0, 1});  // channel-preserving
  auto y = conv1d(x, w, nullptr, 1);
  REQUIRE(y->shape == x->shape);
  for (std::size_t i = 0; i < x->data.size(); ++i) {
    CHECK(y->data[i] == doctest::Approx(x->data[i]));
  }
}

TEST_CASE("conv1d sliding sums: x=[1,2,3,4], kernel=[1,1], stride=2") {
  auto x = Tensor::from({1, 4}, {1, 2, 3, 4});
  auto w = Tensor::from({1, 1, 2}, {1, 1});
  auto y = conv1d(x, w, nullptr, 2);
  REQUIRE(y->numel() == 2);
  CHECK(y->data[0] == doctest::Approx(3));
  CHECK(y->data[1] == doctest::Approx(7));
}

TEST_CASE("conv1d matches the loop oracle on a random case") {
  Rng rng(17);
  auto x = random_tensor({2, 9}, rng);
  auto w = random_tensor({3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = conv1d(x, w, b, 2);
  auto expect = loop_conv(x->data, 2, 9, w->data, 3, 3, 2, 1, false, &b->data);
  REQUIRE(y->data.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(y->data[i] - expect[i]) < 1e-6);
  }
}

TEST_CASE("conv1d rejects inputs shorter than the kernel") {
  auto x = Tensor::zeros({1, 2});
  auto w = Tensor::zeros({1, 1, 3});
  try {
    conv1d(x, w, nullptr, 1);
    FAIL("expected InputTooShort");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::input_too_short);
  }
}

TEST_CASE("dilated_conv1d with d=1 equals a plain padded convolution") {
  Rng rng(23);
  auto x = random_tensor({2, 8}, rng);
  auto w = random_tensor({2, 2, 3}, rng);
  auto d1 = dilated_conv1d(x, w, nullptr, 1);
  // manual pad by one frame each side, then valid conv
  auto padded = Tensor::zeros({2, 10});
  for (int c = 0; c < 2; ++c) {
    for (int t = 0; t < 8; ++t) padded->data[c * 10 + t + 1] = x->data[c * 8 + t];
  }
  auto ref = conv1d(padded, w, nullptr, 1);
  REQUIRE(d1->data.size() == ref->data.size());
  for (std::size_t i = 0; i < ref->data.size(); ++i) {
    CHECK(d1->data[i] == doctest::Approx(ref->data[i]));
  }
}

TEST_CASE("dilated_conv1d sums taps d apart: hand-checked two-tap case") {
  auto x = Tensor::from({1, 5}, {1, 0, 0, 0, 1});
  auto w = Tensor::from({1, 1, 2}, {1, 1});
  auto y = dilated_conv1d(x, w, nullptr, 4);
  // pad_left = 2: out[t] = x[t-2] + x[t+2]
  std::vector<float> expect = {0, 0, 2, 0, 0};
  REQUIRE(y->data.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(y->data[i] == doctest::Approx(expect[i]));
  }
}

TEST_CASE("dilated_conv1d matches the loop oracle") {
  Rng rng(29);
  auto x = random_tensor({3, 12}, rng);
  auto w = random_tensor({3, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  for (int d : {1, 2, 4}) {
    auto y = dilated_conv1d(x, w, b, d);
    auto expect = loop_conv(x->data, 3, 12, w->data, 3, 3, 1, d, true, &b->data);
    REQUIRE(y->data.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(y->data[i] - expect[i]) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm maps constant rows to beta") {
  auto x = Tensor::from({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
  auto gamma = Tensor::full({4}, 1.0f);
  auto beta = Tensor::zeros({4});
  auto y = layer_norm(x, gamma, beta);
  for (float v : y->data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("layer_norm output rows have mean 0 and variance 1 pre-affine") {
  Rng rng(31);
  auto x = random_tensor({3, 16}, rng, 2.0);
  auto gamma = Tensor::full({16}, 1.0f);
  auto beta = Tensor::zeros({16});
  auto y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += y->data[r * 16 + j];
    mean /= 16.0;
    for (int j = 0; j < 16; ++j) {
      double d = y->data[r * 16 + j] - mean;
      var += d * d;
    }
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("activation closed forms") {
  auto x = Tensor::from({5}, {0.0f, -1.0f, -20.0f, 1.0f, 2.0f});
  auto e = elu(x);
  CHECK(e->data[0] == doctest::Approx(0.0));
  CHECK(e->data[1] == doctest::Approx(std::exp(-1.0) - 1.0));
  CHECK(e->data[2] == doctest::Approx(-1.0).epsilon(1e-6));  // asymptote at -alpha
  CHECK(e->data[3] == doctest::Approx(1.0));

  auto g = gelu(x);
  CHECK(g->data[0] == doctest::Approx(0.0));

  auto r = relu(x);
  CHECK(r->data[1] == 0.0f);
  CHECK(r->data[3] == 1.0f);
}

TEST_CASE("softmax of a constant row is uniform") {
  auto x = Tensor::from({3}, {0, 0, 0});
  auto y = softmax(x, -1);
  for (float v : y->data) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax is shift invariant and rows sum to one") {
  Rng rng(37);
  auto x = random_tensor({4, 7}, rng, 3.0);
  auto shifted = add_scalar(x, 13.5);
  auto y1 = softmax(x, -1);
  auto y2 = softmax(shifted, -1);
  for (std::size_t i = 0; i < y1->data.size(); ++i) {
    CHECK(std::abs(y1->data[i] - y2->data[i]) < 1e-6);
  }
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += y1->data[r * 7 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("log_softmax equals log of softmax and is non-positive") {
  Rng rng(41);
  auto x = random_tensor({3, 9}, rng, 2.0);
  auto ls = log_softmax(x, -1);
  auto s = softmax(x, -1);
  for (std::size_t i = 0; i < ls->data.size(); ++i) {
    CHECK(std::abs(ls->data[i] - std::log(static_cast<double>(s->data[i]))) < 1e-5);
    CHECK(ls->data[i] <= 0.0f);
  }
}

TEST_CASE("softmax works along axis 0") {
  auto x = Tensor::from({2, 2}, {0, 10, 0, 10});
  auto y = softmax(x, 0);
  CHECK(y->data[0] == doctest::Approx(0.5));
  CHECK(y->data[2] == doctest::Approx(0.5));
}

TEST_CASE("embedding_lookup basics") {
  auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});

  SUBCASE("empty id list gives a [0, d] tensor") {
    auto y = embedding_lookup(table, {});
    CHECK(y->shape == std::vector<int>{0, 2});
    CHECK(y->numel() == 0);
  }
  SUBCASE("one-hot equivalence") {
    auto y = embedding_lookup(table, {1});
    auto onehot = Tensor::from({1, 3}, {0, 1, 0});
    auto ref = matmul(onehot, table);
    CHECK(y->data == ref->data);
  }
  SUBCASE("out-of-range id") {
    try {
      embedding_lookup(table, {3});
      FAIL("expected IndexOutOfRange");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::index_out_of_range);
    }
  }
  SUBCASE("gradient scatters into rows") {
    table->requires_grad = true;
    table->ensure_grad();
    Tape tape;
    auto y = embedding_lookup(table, {2, 2});
    auto loss = sum(y);
    tape.backward(loss);
    CHECK(table->grad[0] == 0.0f);
    CHECK(table->grad[2] == 0.0f);
    CHECK(table->grad[4] == doctest::Approx(2.0));
    CHECK(table->grad[5] == doctest::Approx(2.0));
  }
}

TEST_CASE("backward: closed forms for sum and sum of squares") {
  Rng rng(43);
  auto x = random_tensor({4, 3}, rng, 1.0, true);

  SUBCASE("loss = sum(x) gives all-ones gradient") {
    Tape tape;
    auto loss = sum(x);
    tape.backward(loss);
    for (float g : x->grad) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("loss = sum(x*x) gives 2x") {
    Tape tape;
    auto loss = sum(mul(x, x));
    tape.backward(loss);
    for (std::size_t i = 0; i < x->data.size(); ++i) {
      CHECK(x->grad[i] == doctest::Approx(2.0 * x->data[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor::zeros({2, 2});
  x->requires_grad = true;
  Tape tape;
  try {
    tape.backward(x);
    FAIL("expected NotScalar");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::not_scalar);
  }
}

TEST_CASE("grad_check: linear and quadratic functions are near-exact") {
  Rng rng(47);
  auto x = random_tensor({8, 8}, rng, 1.0, true);
  auto w = random_tensor({8, 8}, rng, 1.0, true);

  std::vector<TensorPtr> params = {x};
  double lin_err = grad_check([&] { return sum(scale(x, 3.0)); }, params);
  CHECK(lin_err < 1e-6);

  double quad_err = grad_check([&] { return sum(mul(x, x)); }, params);
  CHECK(quad_err < 1e-4);

  std::vector<TensorPtr> both = {x, w};
  double mm_err = grad_check([&] { return sum(matmul(x, w)); }, both);
  CHECK(mm_err < 1e-4);
}

TEST_CASE("gradient suite: per-op grad_check below 1e-3") {
  Rng rng(53);

  SUBCASE("layer_norm") {
    auto x = random_tensor({4, 12}, rng, 1.0, true);
    auto gamma = random_tensor({12}, rng, 1.0, true);
    auto beta = random_tensor({12}, rng, 1.0, true);
    auto mixer = random_tensor({4, 12}, rng);
    std::vector<TensorPtr> params = {x, gamma, beta};
    double err = grad_check([&] { return sum(mul(layer_norm(x, gamma, beta), mixer)); }, params);
    CHECK(err < 1e-3);
  }
  SUBCASE("conv1d") {
    auto x = random_tensor({2, 11}, rng, 1.0, true);
    auto w = random_tensor({3, 2, 3}, rng, 1.0, true);
    auto b = random_tensor({3}, rng, 1.0, true);
    auto mixer = random_tensor({3, 5}, rng);
    std::vector<TensorPtr> params = {x, w, b};
    double err = grad_check([&] { return sum(mul(conv1d(x, w, b, 2), mixer)); }, params);
    CHECK(err < 1e-3);
  }
  SUBCASE("dilated_conv1d") {
    auto x = random_tensor({2, 10}, rng, 1.0, true);
    auto w = random_tensor({2, 2, 3}, rng, 1.0, true);
    auto b = random_tensor({2}, rng, 1.0, true);
    auto mixer = random_tensor({2, 10}, rng);
    std::vector<TensorPtr> params = {x, w, b};
    double err =
        grad_check([&] { return sum(mul(dilated_conv1d(x, w, b, 2), mixer)); }, params);
    CHECK(err < 1e-3);
  }
  SUBCASE("activations") {
    auto x = random_tensor({6, 9}, rng, 1.0, true);
    auto mixer = random_tensor({6, 9}, rng);
    std::vector<TensorPtr> params = {x};
    CHECK(grad_check([&] { return sum(mul(gelu(x), mixer)); }, params) < 1e-3);
    CHECK(grad_check([&] { return sum(mul(elu(x), mixer)); }, params) < 1e-3);
    CHECK(grad_check([&] { return sum(mul(tanh_op(x), mixer)); }, params) < 1e-3);
    CHECK(grad_check([&] { return sum(mul(sigmoid(x), mixer)); }, params) < 1e-3);
  }
  SUBCASE("softmax and log_softmax") {
    auto x = random_tensor({5, 8}, rng, 1.0, true);
    auto mixer = random_tensor({5, 8}, rng);
    std::vector<TensorPtr> params = {x};
    CHECK(grad_check([&] { return sum(mul(softmax(x, -1), mixer)); }, params) < 1e-3);
    CHECK(grad_check([&] { return sum(mul(log_softmax(x, -1), mixer)); }, params) < 1e-3);
  }
  SUBCASE("attention block") {
    Rng init(7);
    auto block = make_transformer_block(16, init);
    auto x = random_tensor({6, 16}, rng, 1.0, true);
    auto mixer = random_tensor({6, 16}, rng);
    std::vector<TensorPtr> params = {x};
    collect(block, params);
    double err =
        grad_check([&] { return sum(mul(transformer_block(x, block, 4), mixer)); }, params, 1e-3,
                   80);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("transformer_block preserves shape and zero weights give the identity") {
  Rng rng(59);
  auto block = make_transformer_block(8, rng);
  auto x = random_tensor({5, 8}, rng);
  auto y = transformer_block(x, block, 2);
  CHECK(y->shape == x->shape);

  // zero every linear weight and bias; residual path must pass x through
  for (auto& p : {block.q, block.k, block.v, block.o, block.ff1, block.ff2}) {
    std::fill(p.w->data.begin(), p.w->data.end(), 0.0f);
    std::fill(p.b->data.begin(), p.b->data.end(), 0.0f);
  }
  auto y0 = transformer_block(x, block, 2);
  for (std::size_t i = 0; i < x->data.size(); ++i) {
    CHECK(y0->data[i] == doctest::Approx(x->data[i]));
  }
}

TEST_CASE("attention weights per query sum to one") {
  Rng rng(61);
  auto block = make_transformer_block(8, rng);
  auto x = random_tensor({7, 8}, rng);
  AttentionTrace trace;
  transformer_block(x, block, 2, &trace);
  REQUIRE(trace.head_probs.size() == 2);
  for (const auto& probs : trace.head_probs) {
    for (int r = 0; r < 7; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += probs->data[r * 7 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("adam_step behaviors") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    auto p = Tensor::from({3}, {1.0f, -2.0f, 0.5f});
    p->requires_grad = true;
    p->ensure_grad();
    auto before = p->data;
    AdamState state;
    std::vector<TensorPtr> params = {p};
    adam_step(params, state, 0.1f);
    CHECK(p->data == before);
  }
  SUBCASE("first step moves by about -lr * sign(g)") {
    auto p = Tensor::from({2}, {1.0f, 1.0f});
    p->requires_grad = true;
    p->ensure_grad();
    p->grad = {0.3f, -0.7f};
    AdamState state;
    std::vector<TensorPtr> params = {p};
    adam_step(params, state, 0.01f);
    CHECK(p->data[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-3));
    CHECK(p->data[1] == doctest::Approx(1.0 + 0.01).epsilon(1e-3));
  }
  SUBCASE("ten steps on f(theta)=theta^2 shrink |theta| monotonically") {
    auto p = Tensor::from({1}, {1.0f});
    p->requires_grad = true;
    p->ensure_grad();
    AdamState state;
    std::vector<TensorPtr> params = {p};
    float prev = 1.0f;
    for (int i = 0; i < 10; ++i) {
      zero_grads(params);
      Tape tape;
      auto loss = sum(mul(p, p));
      tape.backward(loss);
      adam_step(params, state, 0.05f);
      CHECK(std::abs(p->data[0]) < prev);
      prev = std::abs(p->data[0]);
    }
  }
}

TEST_CASE("identical seeds give bit-identical forward values and gradients") {
  auto run = [](std::vector<float>& values, std::vector<float>& grads) {
    Rng rng(1234);
    auto x = random_tensor({6, 8}, rng, 1.0, true);
    auto block = make_transformer_block(8, rng);
    Tape tape;
    auto y = transformer_block(x, block, 2);
    auto loss = sum(mul(y, y));
    tape.backward(loss);
    values = y->data;
    grads = x->grad;
  };
  std::vector<float> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("slice and concat round trips") {
  Rng rng(67);
  auto x = random_tensor({4, 6}, rng);
  auto top = slice_rows(x, 0, 2);
  auto bottom = slice_rows(x, 2, 2);
  std::vector<TensorPtr> parts = {top, bottom};
  auto back = concat_rows(parts);
  CHECK(back->data == x->data);

  auto left = slice_cols(x, 0, 3);
  auto right = slice_cols(x, 3, 3);
  std::vector<TensorPtr> cparts = {left, right};
  auto cback = concat_cols(cparts);
  CHECK(cback->data == x->data);
}

TEST_CASE("mask_rows routes gradients by mask membership") {
  Rng rng(71);
  auto x = random_tensor({4, 3}, rng, 1.0, true);
  auto fill = random_tensor({3}, rng, 1.0, true);
  Tape tape;
  auto y = mask_rows(x, {1, 3}, fill);
  auto loss = sum(y);
  tape.backward(loss);
  // masked rows hold the fill values exactly
  for (int j = 0; j < 3; ++j) {
    CHECK(y->data[1 * 3 + j] == fill->data[j]);
    CHECK(y->data[3 * 3 + j] == fill->data[j]);
    CHECK(y->data[0 * 3 + j] == x->data[0 * 3 + j]);
  }
  for (int j = 0; j < 3; ++j) {
    CHECK(x->grad[0 * 3 + j] == 1.0f);
    CHECK(x->grad[1 * 3 + j] == 0.0f);
    CHECK(fill->grad[j] == doctest::Approx(2.0));
  }
}
