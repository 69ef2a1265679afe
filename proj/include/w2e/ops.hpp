#pragma once

#include <span>
#include <vector>

#include "w2e/tensor.hpp"

namespace w2e {

// Differentiable free functions over tensors. Every op runs in float32; when
// a precise Tape is active it additionally propagates a float64 shadow.
// All ops record their adjoints on the innermost tape when any input
// requires a gradient.

// ---- elementwise / arithmetic ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_scalar(const TensorPtr& a, double c);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr neg(const TensorPtr& a);
TensorPtr sqrt_op(const TensorPtr& a);
TensorPtr log_op(const TensorPtr& a);
TensorPtr exp_op(const TensorPtr& a);
// x * log(x) with the 0 log 0 = 0 convention (entropy terms)
TensorPtr xlogx(const TensorPtr& a);

// Broadcasts a length-n bias over the rows of an [m, n] tensor.
TensorPtr add_rows(const TensorPtr& x, const TensorPtr& bias);

// ---- activations ----
TensorPtr relu(const TensorPtr& a);
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
TensorPtr gelu(const TensorPtr& a);
// x for x > 0, alpha*(exp(x) - 1) otherwise
TensorPtr elu(const TensorPtr& a, double alpha = 1.0);
TensorPtr tanh_op(const TensorPtr& a);
TensorPtr sigmoid(const TensorPtr& a);

// ---- linear algebra ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);  // [m,k]x[k,n]
TensorPtr transpose(const TensorPtr& a);                   // 2-d

// Valid cross-correlation of x[c_in, T] with kernels[c_out, c_in, k];
// T' = floor((T - k) / stride) + 1. Optional per-channel bias [c_out].
// Errors: InputTooShort, ShapeMismatch.
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernels,
                 const TensorPtr& bias, int stride);

// Same-length dilated convolution (stride 1) with symmetric zero padding;
// taps are spaced `dilation` apart. d=1 equals padded conv1d.
TensorPtr dilated_conv1d(const TensorPtr& x, const TensorPtr& kernels,
                         const TensorPtr& bias, int dilation);

// Normalizes the last dimension with eps = 1e-5, then applies gamma/beta.
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta);

// ---- shape ops ----
TensorPtr slice_rows(const TensorPtr& x, int start, int n);
TensorPtr slice_cols(const TensorPtr& x, int start, int n);
TensorPtr concat_rows(std::span<const TensorPtr> parts);
TensorPtr concat_cols(std::span<const TensorPtr> parts);

// Row gather from table[V, d]; gradients scatter-add back into the rows.
// Errors: IndexOutOfRange.
TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids);

// Replaces the listed rows of x[T, d] with fill_row[d] (or [1, d]).
// Gradients flow to fill_row at masked rows and to x elsewhere.
TensorPtr mask_rows(const TensorPtr& x, const std::vector<int>& rows,
                    const TensorPtr& fill_row);

// Value copy with no gradient path.
TensorPtr stop_gradient(const TensorPtr& a);

// ---- reductions / distributions ----
TensorPtr sum(const TensorPtr& a);   // 64-bit accumulation
TensorPtr mean(const TensorPtr& a);  // 64-bit accumulation
TensorPtr pick(const TensorPtr& a, std::int64_t flat_index);

// Max-subtracted softmax along `axis` (negative counts from the back).
TensorPtr softmax(const TensorPtr& a, int axis);
TensorPtr log_softmax(const TensorPtr& a, int axis);

}  // namespace w2e
