#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace w2e {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

std::int64_t shape_numel(const std::vector<int>& shape);

// Shaped array of 32-bit floats taking part in a differentiable computation.
// `shadow` holds a double-precision image of `data`, filled only while a
// precise Tape is active; the gradient checker reads it to keep central
// differences out of float32 quantization noise.
class Tensor {
 public:
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;     // same size as data once allocated
  std::vector<double> shadow;  // set on op outputs in precise mode only
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static TensorPtr zeros(std::vector<int> shape);
  static TensorPtr full(std::vector<int> shape, float value);
  static TensorPtr from(std::vector<int> shape, std::vector<float> values);
  static TensorPtr scalar(double v);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool is_scalar() const { return numel() == 1; }

  // Scalar read; prefers the double shadow when present.
  double value() const;

  void ensure_grad();
  void zero_grad();
};

// Ordered record of executed operations (the reverse-mode tape). Ops append
// their adjoint steps in execution order, so replaying the record backwards
// visits every operation after all of its consumers. Confined to one thread.
class Tape {
 public:
  explicit Tape(bool precise = false, bool record = true);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  bool precise() const { return precise_; }
  bool recording() const { return record_; }
  void record(std::function<void()> backward_step);
  std::size_t size() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the record in reverse, accumulating
  // gradients into every requires_grad tensor reachable from the loss.
  // Errors: NotScalar.
  void backward(const TensorPtr& loss);

 private:
  std::vector<std::function<void()>> steps_;
  Tape* prev_ = nullptr;
  bool precise_ = false;
  bool record_ = true;
};

// Runs backward on the innermost active tape. Errors: NotScalar.
void backward(const TensorPtr& loss);

// Clears gradients on a parameter set.
void zero_grads(const std::vector<TensorPtr>& params);

}  // namespace w2e
