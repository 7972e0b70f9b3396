#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rfcnet/autograd.hpp"

namespace rfcnet::ops {

// Elementwise.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);

/// Sum of x * weights over all elements; weights is a constant of the same shape.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

// Structural.
template <typename T> Var<T> concat_channels(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_channels(const Var<T>& x, int start, int count);
template <typename T> Var<T> concat_batch(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_batch(const Var<T>& x, int start, int count);

/// 2-D cross-correlation, stride 1, "same" zero padding; weight is
/// (out, in, k, k) with odd k. bias may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Stride-2 transposed convolution doubling H and W (kernel 3, padding 1,
/// output padding 1). weight is (in, out, 3, 3).
template <typename T>
Var<T> conv_transpose2d_up(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// 2x2 max pooling with stride 2; H and W must be even.
template <typename T> Var<T> max_pool2(const Var<T>& x);

/// Batch normalization over (N, H, W) per channel. In training mode batch
/// statistics are used and the running buffers are updated in place with the
/// given momentum; otherwise the running statistics are used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                  T momentum = T(0.1), T eps = T(1e-5));

/// Inverted dropout; identity when !training or p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, std::mt19937_64& rng);

/// Mean per-pixel softmax cross-entropy. scores (B, K, H, W), labels B*H*W
/// class ids in row-major (b, y, x) order. Throws LabelOutOfRange.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& scores, std::span<const std::uint8_t> labels);

class LabelOutOfRange : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace rfcnet::ops
