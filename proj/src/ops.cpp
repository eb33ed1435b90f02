#include "kd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "kd/rng.hpp"

namespace kd {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template bool all_finite(const BasicTensor<float>&);
template bool all_finite(const BasicTensor<double>&);

}  // namespace kd

namespace kd::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
    }
}

void require_axis(const char* op, const char* a_name, std::size_t a, const char* b_name, std::size_t b) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": " + a_name + " = " + std::to_string(a) + " but " + b_name + " = " +
                         std::to_string(b));
    }
}

struct ConvGeometry {
    std::size_t n, c, h, w, kh, kw, oh, ow;
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, Conv2dParams p, T* col) {
    // col is (c*kh*kw) x (oh*ow), row-major.
    const auto pad = static_cast<std::ptrdiff_t>(p.padding);
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((ci * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kj) - pad;
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.w);
                        row[oy * g.ow + ox] = inside ? img[(ci * g.h + iy) * g.w + ix] : T{0};
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, Conv2dParams p, T* img) {
    const auto pad = static_cast<std::ptrdiff_t>(p.padding);
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kj) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const BasicTensor<T>& kernel, Conv2dParams p,
                           bool depthwise) {
    const char* op = depthwise ? "depthwise_conv2d" : "conv2d";
    require_rank(input.shape(), 4, op, "input");
    require_rank(kernel.shape(), 4, op, "kernel");
    if (p.stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
    if (depthwise) {
        require_axis(op, "input channels (axis 1)", input.dim(1), "kernel channels (axis 0)", kernel.dim(0));
        require_axis(op, "kernel multiplier (axis 1)", kernel.dim(1), "expected", 1);
    } else {
        require_axis(op, "input channels (axis 1)", input.dim(1), "kernel input channels (axis 1)", kernel.dim(1));
    }
    ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), 0, 0};
    g.oh = conv_out_extent(g.h, g.kh, p.stride, p.padding, "height (axis 2)");
    g.ow = conv_out_extent(g.w, g.kw, p.stride, p.padding, "width (axis 3)");
    return g;
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                            const char* axis) {
    if (in + 2 * padding < kernel) {
        throw ShapeError(std::string(axis) + ": padded extent " + std::to_string(in + 2 * padding) +
                         " smaller than window " + std::to_string(kernel));
    }
    return (in + 2 * padding - kernel) / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      Conv2dParams p) {
    const auto g = conv_geometry(input, kernel, p, false);
    const std::size_t out_c = kernel.dim(0);
    require_axis("conv2d", "bias length", bias.size(), "kernel output channels (axis 0)", out_c);

    const std::size_t patch = g.c * g.kh * g.kw;
    const std::size_t pixels = g.oh * g.ow;
    BasicTensor<T> out({g.n, out_c, g.oh, g.ow});
    std::vector<T> col(patch * pixels);
    CMapMat<T> k(kernel.raw(), out_c, patch);
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(input.raw() + n * g.c * g.h * g.w, g, p, col.data());
        MapMat<T> y(out.raw() + n * out_c * pixels, out_c, pixels);
        y.noalias() = k * CMapMat<T>(col.data(), patch, pixels);
        for (std::size_t o = 0; o < out_c; ++o) y.row(o).array() += bias[o];
    }
    return out;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& grad_out,
                     Conv2dParams p, BasicTensor<T>* grad_input, BasicTensor<T>* grad_kernel,
                     BasicTensor<T>* grad_bias) {
    const auto g = conv_geometry(input, kernel, p, false);
    const std::size_t out_c = kernel.dim(0);
    const std::size_t patch = g.c * g.kh * g.kw;
    const std::size_t pixels = g.oh * g.ow;
    std::vector<T> col(patch * pixels);
    CMapMat<T> k(kernel.raw(), out_c, patch);
    for (std::size_t n = 0; n < g.n; ++n) {
        CMapMat<T> dy(grad_out.raw() + n * out_c * pixels, out_c, pixels);
        if (grad_bias) {
            for (std::size_t o = 0; o < out_c; ++o) (*grad_bias)[o] += dy.row(o).sum();
        }
        if (grad_kernel) {
            im2col(input.raw() + n * g.c * g.h * g.w, g, p, col.data());
            MapMat<T> dk(grad_kernel->raw(), out_c, patch);
            dk.noalias() += dy * CMapMat<T>(col.data(), patch, pixels).transpose();
        }
        if (grad_input) {
            MapMat<T> dcol(col.data(), patch, pixels);
            dcol.noalias() = k.transpose() * dy;
            col2im(col.data(), g, p, grad_input->raw() + n * g.c * g.h * g.w);
        }
    }
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, Conv2dParams p) {
    const auto g = conv_geometry(input, kernel, p, true);
    require_axis("depthwise_conv2d", "bias length", bias.size(), "channels", g.c);
    const auto pad = static_cast<std::ptrdiff_t>(p.padding);
    BasicTensor<T> out({g.n, g.c, g.oh, g.ow});
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t c = 0; c < g.c; ++c) {
            const T* img = input.raw() + (n * g.c + c) * g.h * g.w;
            const T* ker = kernel.raw() + c * g.kh * g.kw;
            T* dst = out.raw() + (n * g.c + c) * g.oh * g.ow;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                    T acc = bias[c];
                    for (std::size_t ki = 0; ki < g.kh; ++ki) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        for (std::size_t kj = 0; kj < g.kw; ++kj) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kj) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                            acc += img[iy * g.w + ix] * ker[ki * g.kw + kj];
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    return out;
}

template <typename T>
void depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& grad_out, Conv2dParams p, BasicTensor<T>* grad_input,
                               BasicTensor<T>* grad_kernel, BasicTensor<T>* grad_bias) {
    const auto g = conv_geometry(input, kernel, p, true);
    const auto pad = static_cast<std::ptrdiff_t>(p.padding);
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t c = 0; c < g.c; ++c) {
            const T* img = input.raw() + (n * g.c + c) * g.h * g.w;
            const T* ker = kernel.raw() + c * g.kh * g.kw;
            const T* dy = grad_out.raw() + (n * g.c + c) * g.oh * g.ow;
            T* dimg = grad_input ? grad_input->raw() + (n * g.c + c) * g.h * g.w : nullptr;
            T* dker = grad_kernel ? grad_kernel->raw() + c * g.kh * g.kw : nullptr;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                    const T d = dy[oy * g.ow + ox];
                    if (grad_bias) (*grad_bias)[c] += d;
                    for (std::size_t ki = 0; ki < g.kh; ++ki) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        for (std::size_t kj = 0; kj < g.kw; ++kj) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kj) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                            if (dker) dker[ki * g.kw + kj] += d * img[iy * g.w + ix];
                            if (dimg) dimg[iy * g.w + ix] += d * ker[ki * g.kw + kj];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    require_rank(input.shape(), 2, "dense", "input");
    require_rank(weight.shape(), 2, "dense", "weight");
    require_axis("dense", "input features (axis 1)", input.dim(1), "weight rows (axis 0)", weight.dim(0));
    require_axis("dense", "bias length", bias.size(), "weight columns (axis 1)", weight.dim(1));
    const std::size_t n = input.dim(0), f = input.dim(1), g = weight.dim(1);
    BasicTensor<T> out({n, g});
    MapMat<T> y(out.raw(), n, g);
    y.noalias() = CMapMat<T>(input.raw(), n, f) * CMapMat<T>(weight.raw(), f, g);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < g; ++j) y(i, j) += bias[j];
    }
    return out;
}

template <typename T>
void dense_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& grad_out,
                    BasicTensor<T>* grad_input, BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias) {
    const std::size_t n = input.dim(0), f = input.dim(1), g = weight.dim(1);
    CMapMat<T> dy(grad_out.raw(), n, g);
    if (grad_input) MapMat<T>(grad_input->raw(), n, f).noalias() += dy * CMapMat<T>(weight.raw(), f, g).transpose();
    if (grad_weight) MapMat<T>(grad_weight->raw(), f, g).noalias() += CMapMat<T>(input.raw(), n, f).transpose() * dy;
    if (grad_bias) {
        for (std::size_t j = 0; j < g; ++j) (*grad_bias)[j] += dy.col(j).sum();
    }
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
    return out;
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t window, std::size_t stride,
                          std::vector<std::size_t>* argmax) {
    require_rank(input.shape(), 4, "max_pool2d", "input");
    if (window == 0 || stride == 0) throw ShapeError("max_pool2d: window and stride must be positive");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t oh = conv_out_extent(h, window, stride, 0, "max_pool2d height (axis 2)");
    const std::size_t ow = conv_out_extent(w, window, stride, 0, "max_pool2d width (axis 3)");
    BasicTensor<T> out({n, c, oh, ow});
    if (argmax) argmax->assign(out.size(), 0);
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
                std::size_t best = base + (oy * stride) * w + ox * stride;
                for (std::size_t i = 0; i < window; ++i) {
                    for (std::size_t j = 0; j < window; ++j) {
                        const std::size_t idx = base + (oy * stride + i) * w + ox * stride + j;
                        if (input[idx] > input[best]) best = idx;
                    }
                }
                out[o] = input[best];
                if (argmax) (*argmax)[o] = best;
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> global_avg_pool2d(const BasicTensor<T>& input) {
    require_rank(input.shape(), 4, "global_avg_pool2d", "input");
    const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    BasicTensor<T> out({n, c});
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += input[plane * hw + i];
        out[plane] = acc / static_cast<T>(hw);
    }
    return out;
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input) {
    if (input.rank() < 2) throw ShapeError("flatten: input must have rank >= 2, got " + shape_str(input.shape()));
    return input.reshaped({input.dim(0), input.size() / input.dim(0)});
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank(a.shape(), 4, "concat_channels", "first input");
    require_rank(b.shape(), 4, "concat_channels", "second input");
    require_axis("concat_channels", "batch (axis 0) of first", a.dim(0), "batch of second", b.dim(0));
    require_axis("concat_channels", "height (axis 2) of first", a.dim(2), "height of second", b.dim(2));
    require_axis("concat_channels", "width (axis 3) of first", a.dim(3), "width of second", b.dim(3));
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    BasicTensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.raw() + i * ca * hw, ca * hw, out.raw() + i * (ca + cb) * hw);
        std::copy_n(b.raw() + i * cb * hw, cb * hw, out.raw() + i * (ca + cb) * hw + ca * hw);
    }
    return out;
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t end) {
    require_rank(input.shape(), 4, "slice_channels", "input");
    if (begin >= end || end > input.dim(1)) throw ShapeError("slice_channels: bad channel range");
    const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    BasicTensor<T> out({n, end - begin, input.dim(2), input.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(input.raw() + (i * c + begin) * hw, (end - begin) * hw, out.raw() + i * (end - begin) * hw);
    }
    return out;
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& logits) {
    require_rank(logits.shape(), 2, "log_softmax", "logits");
    if (logits.dim(1) < 2) throw ShapeError("log_softmax: need at least 2 classes");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    BasicTensor<T> out(logits.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits.raw() + i * k;
        const T m = *std::max_element(z, z + k);
        T s{0};
        for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
        const T lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = z[j] - lse;
    }
    return out;
}

template <typename T>
BasicTensor<T> dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error(ExitCode::config, "dropout rate must lie in [0, 1)");
    BasicTensor<T> mask(shape);
    CounterRng rng(seed);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask.data()) m = rng.uniform() < rate ? T{0} : keep;
    return mask;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, bool training, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error(ExitCode::config, "dropout rate must lie in [0, 1)");
    if (!training || rate == 0.0) return input;
    auto out = dropout_mask<T>(input.shape(), rate, seed);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= input[i];
    return out;
}

#define KD_INSTANTIATE_OPS(T)                                                                                      \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                   Conv2dParams);                                                                  \
    template void conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,            \
                                  Conv2dParams, BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);               \
    template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                             Conv2dParams);                                                        \
    template void depthwise_conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                            Conv2dParams, BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);     \
    template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);           \
    template void dense_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,             \
                                 BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);                              \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t, std::size_t, std::vector<std::size_t>*); \
    template BasicTensor<T> global_avg_pool2d(const BasicTensor<T>&);                                             \
    template BasicTensor<T> flatten(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);                      \
    template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> dropout_mask(const Shape&, double, std::uint64_t);                                    \
    template BasicTensor<T> dropout(const BasicTensor<T>&, double, bool, std::uint64_t);

KD_INSTANTIATE_OPS(float)
KD_INSTANTIATE_OPS(double)

#undef KD_INSTANTIATE_OPS

}  // namespace kd::ops
