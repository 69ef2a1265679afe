#include "w2e/tensor.hpp"

#include <algorithm>
#include <utility>

#include "w2e/error.hpp"

namespace w2e {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) fail(Errc::shape_mismatch, "negative dimension " + std::to_string(d));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
}

TensorPtr Tensor::zeros(std::vector<int> shape) {
  return std::make_shared<Tensor>(std::move(shape));
}

TensorPtr Tensor::full(std::vector<int> shape, float value) {
  auto t = std::make_shared<Tensor>(std::move(shape));
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<float> values) {
  auto t = std::make_shared<Tensor>(std::move(shape));
  if (static_cast<std::int64_t>(values.size()) != t->numel()) {
    fail(Errc::shape_mismatch, "value count does not match shape");
  }
  t->data = std::move(values);
  return t;
}

TensorPtr Tensor::scalar(double v) {
  auto t = std::make_shared<Tensor>(std::vector<int>{1});
  t->data[0] = static_cast<float>(v);
  return t;
}

double Tensor::value() const {
  if (numel() != 1) fail(Errc::not_scalar, "value() on non-scalar tensor");
  return shadow.empty() ? static_cast<double>(data[0]) : shadow[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0f);
}

Tape::Tape(bool precise, bool record) : precise_(precise), record_(record) {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_step) {
  if (record_) steps_.push_back(std::move(backward_step));
}

void Tape::backward(const TensorPtr& loss) {
  if (!loss || loss->numel() != 1) {
    fail(Errc::not_scalar, "backward requires a scalar loss");
  }
  loss->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void backward(const TensorPtr& loss) {
  Tape* t = Tape::current();
  if (t == nullptr) fail(Errc::not_scalar, "backward called with no active tape");
  t->backward(loss);
}

void zero_grads(const std::vector<TensorPtr>& params) {
  for (const auto& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
}

}  // namespace w2e
