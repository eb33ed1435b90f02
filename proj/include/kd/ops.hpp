#pragma once

// Forward and backward kernels for the tensor operations. These are pure
// functions; the autodiff layer (autodiff.hpp) records them on a tape.

#include <cstdint>
#include <vector>

#include "kd/tensor.hpp"

namespace kd::ops {

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Output extent of a convolution or pooling window along one axis.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                            const char* axis);

// input NCHW, kernel OIKhKw, bias O.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      Conv2dParams p);

/// Accumulates into whichever of grad_input/grad_kernel/grad_bias are non-null.
template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& grad_out,
                     Conv2dParams p, BasicTensor<T>* grad_input, BasicTensor<T>* grad_kernel,
                     BasicTensor<T>* grad_bias);

// input NCHW, kernel C1KhKw, bias C.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, Conv2dParams p);

template <typename T>
void depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& grad_out, Conv2dParams p, BasicTensor<T>* grad_input,
                               BasicTensor<T>* grad_kernel, BasicTensor<T>* grad_bias);

// input N×F, weight F×G, bias G.
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
void dense_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& grad_out,
                    BasicTensor<T>* grad_input, BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Max pooling without padding. `argmax` receives, for each output
/// element, the flat input index that won (first in row-major order on ties).
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t window, std::size_t stride,
                          std::vector<std::size_t>* argmax = nullptr);

template <typename T>
BasicTensor<T> global_avg_pool2d(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Channels [begin, end) of an NCHW tensor.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t end);

/// Row-wise log-softmax of an N×K tensor (max-subtracted).
template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& logits);

/// Inverted-dropout keep mask: 0 or 1/(1-rate) per element.
template <typename T>
BasicTensor<T> dropout_mask(const Shape& shape, double rate, std::uint64_t seed);

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, bool training, std::uint64_t seed);

}  // namespace kd::ops
