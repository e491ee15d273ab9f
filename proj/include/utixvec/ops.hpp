#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "utixvec/tensor.hpp"

namespace utixvec {

using Dims3 = std::array<std::size_t, 3>;

/// Strides and dilation along (time, height, width). Padding is always valid
/// (none); kernels are applied as cross-correlation without a flip.
struct Conv3dOptions {
  Dims3 strides{1, 1, 1};
  Dims3 dilation{1, 1, 1};
};

/// Output extent of a valid convolution along one axis.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                               std::size_t dilation = 1);

// input [N,T,H,W,Cin], kernel [kt,kh,kw,Cin,Cout], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const Conv3dOptions& options = {});

// Spatial-only stage (kernel [1,kh,kw,Cin,Cm], no bias) followed by a
// temporal-only stage (kernel [kt,1,1,Cm,Cout] plus bias). Height/width
// strides and dilation go to the spatial stage, the time components to the
// temporal stage.
template <typename T>
Tensor<T> conv2plus1d(const Tensor<T>& input, const Tensor<T>& spatial_kernel,
                      const Tensor<T>& temporal_kernel, const Tensor<T>& bias,
                      const Conv3dOptions& options = {});

// Non-overlapping max pooling over [N,T,H,W,C]; trailing remainders dropped.
// Gradient goes to the first maximum in scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, const Dims3& window);

// Affine map over the last axis: [..., Din] x [Din, Dout] + [Dout].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> swish(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct SoftmaxXent {
  Tensor<T> loss;           // scalar mean negative log-likelihood
  Tensor<T> probabilities;  // [N,K], not part of the graph
};

template <typename T>
SoftmaxXent<T> softmax_xent(const Tensor<T>& logits, std::span<const std::size_t> labels);

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
T sigmoid(T x);

// Row-wise softmax of [N,K] logits; a plain value, never recorded.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace utixvec
