#pragma once

#include <type_traits>

#include <Eigen/Core>

#include "qmm/nn/tensor.hpp"
#include "qmm/rng.hpp"

namespace qmm::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

inline int conv_out_dim(int in, int kernel, int pad, int stride) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// One convolution; weight layout [out_ch][in_ch*k*k] row-major so the
// forward pass is a single GEMM against the im2col matrix.
template <typename T>
struct ConvLayer {
    int in_ch = 0, out_ch = 0, kernel = 3, pad = 1, stride = 1;
    std::vector<T> weight;
    std::vector<T> bias;

    ConvLayer() = default;
    ConvLayer(int in_ch_, int out_ch_, int kernel_, int pad_, int stride_)
        : in_ch(in_ch_), out_ch(out_ch_), kernel(kernel_), pad(pad_), stride(stride_),
          weight(static_cast<size_t>(out_ch_) * in_ch_ * kernel_ * kernel_, T(0)),
          bias(static_cast<size_t>(out_ch_), T(0)) {}

    size_t fan_in() const { return static_cast<size_t>(in_ch) * kernel * kernel; }
    size_t parameter_count() const { return weight.size() + bias.size(); }

    // He-style normal init; gain 2 for ReLU-family layers, 1 for linear heads.
    void init(Rng& rng, double gain = 2.0) {
        double std_dev = std::sqrt(gain / static_cast<double>(fan_in()));
        for (T& v : weight) v = static_cast<T>(rng.normal() * std_dev);
        std::fill(bias.begin(), bias.end(), T(0));
    }
};

template <typename T>
struct ConvGrads {
    std::vector<T> dweight;
    std::vector<T> dbias;

    ConvGrads() = default;
    explicit ConvGrads(const ConvLayer<T>& layer)
        : dweight(layer.weight.size(), T(0)), dbias(layer.bias.size(), T(0)) {}
    void zero() {
        std::fill(dweight.begin(), dweight.end(), T(0));
        std::fill(dbias.begin(), dbias.end(), T(0));
    }
};

namespace detail {

// cols: [in_ch*k*k][ho*wo] row-major
template <typename T>
void im2col(const T* x, int c, int h, int w, int kernel, int pad, int stride,
            int ho, int wo, T* cols) {
    const size_t out_hw = static_cast<size_t>(ho) * wo;
    for (int ic = 0; ic < c; ++ic) {
        const T* xc = x + static_cast<size_t>(ic) * h * w;
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                T* row = cols + (static_cast<size_t>(ic) * kernel * kernel +
                                 static_cast<size_t>(ky) * kernel + kx) * out_hw;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    T* dst = row + static_cast<size_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<size_t>(iy) * w;
                    if (stride == 1) {
                        int ox0 = std::max(0, pad - kx);
                        int ox1 = std::min(wo, w + pad - kx);
                        for (int ox = 0; ox < ox0; ++ox) dst[ox] = T(0);
                        if (ox1 > ox0)
                            std::copy(src + (ox0 - pad + kx), src + (ox1 - pad + kx), dst + ox0);
                        for (int ox = ox1; ox < wo; ++ox) dst[ox] = T(0);
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, int c, int h, int w, int kernel, int pad, int stride,
                int ho, int wo, T* x) {
    const size_t out_hw = static_cast<size_t>(ho) * wo;
    for (int ic = 0; ic < c; ++ic) {
        T* xc = x + static_cast<size_t>(ic) * h * w;
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const T* row = cols + (static_cast<size_t>(ic) * kernel * kernel +
                                       static_cast<size_t>(ky) * kernel + kx) * out_hw;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + static_cast<size_t>(oy) * wo;
                    T* dst = xc + static_cast<size_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// Scratch shared by conv calls; sized for the largest layer it meets.
template <typename T>
struct ConvScratch {
    std::vector<T> cols;
    std::vector<T> dcols;

    T* cols_for(size_t need) {
        if (cols.size() < need) cols.resize(need);
        return cols.data();
    }
    T* dcols_for(size_t need) {
        if (dcols.size() < need) dcols.resize(need);
        return dcols.data();
    }
};

template <typename T>
void conv_forward(const ConvLayer<T>& layer, const Tensor<T>& x, Tensor<T>& y,
                  ConvScratch<T>& scratch) {
    if (x.c != layer.in_ch)
        throw DimensionError("conv: input has " + std::to_string(x.c) +
                             " channels, layer expects " + std::to_string(layer.in_ch));
    const int ho = conv_out_dim(x.h, layer.kernel, layer.pad, layer.stride);
    const int wo = conv_out_dim(x.w, layer.kernel, layer.pad, layer.stride);
    if (ho < 1 || wo < 1)
        throw DimensionError("conv: output would be empty");
    y.resize(x.n, layer.out_ch, ho, wo);

    const size_t rows = layer.fan_in();
    const size_t out_hw = static_cast<size_t>(ho) * wo;
    T* cols = scratch.cols_for(rows * out_hw);
    CMapRM<T> w_m(layer.weight.data(), layer.out_ch, static_cast<Eigen::Index>(rows));

    for (int i = 0; i < x.n; ++i) {
        detail::im2col(x.sample(i), x.c, x.h, x.w, layer.kernel, layer.pad,
                       layer.stride, ho, wo, cols);
        CMapRM<T> c_m(cols, static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(out_hw));
        MapRM<T> y_m(y.sample(i), layer.out_ch, static_cast<Eigen::Index>(out_hw));
        y_m.noalias() = w_m * c_m;
        for (int oc = 0; oc < layer.out_ch; ++oc)
            y_m.row(oc).array() += layer.bias[static_cast<size_t>(oc)];
    }
}

// dx may be null when input gradients are not needed (first layer);
// grads may be null when only input gradients are needed (GAN generator step
// back through a frozen discriminator).
template <typename T>
void conv_backward(const ConvLayer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                   std::type_identity_t<Tensor<T>*> dx,
                   std::type_identity_t<ConvGrads<T>*> grads, ConvScratch<T>& scratch) {
    const int ho = dy.h, wo = dy.w;
    const size_t rows = layer.fan_in();
    const size_t out_hw = static_cast<size_t>(ho) * wo;
    T* cols = scratch.cols_for(rows * out_hw);

    if (dx) {
        dx->resize(x.n, x.c, x.h, x.w);
        dx->zero();
    }
    CMapRM<T> w_m(layer.weight.data(), layer.out_ch, static_cast<Eigen::Index>(rows));

    for (int i = 0; i < x.n; ++i) {
        CMapRM<T> dy_m(dy.sample(i), layer.out_ch, static_cast<Eigen::Index>(out_hw));
        if (grads) {
            detail::im2col(x.sample(i), x.c, x.h, x.w, layer.kernel, layer.pad,
                           layer.stride, ho, wo, cols);
            CMapRM<T> c_m(cols, static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(out_hw));
            MapRM<T> dw_m(grads->dweight.data(), layer.out_ch,
                          static_cast<Eigen::Index>(rows));
            dw_m.noalias() += dy_m * c_m.transpose();
            // scalar accumulation: vectorized redux would order the sum by
            // pointer alignment, breaking run-to-run bitwise reproducibility
            for (int oc = 0; oc < layer.out_ch; ++oc) {
                const T* row = dy.sample(i) + static_cast<size_t>(oc) * out_hw;
                T s = T(0);
                for (size_t k = 0; k < out_hw; ++k) s += row[k];
                grads->dbias[static_cast<size_t>(oc)] += s;
            }
        }
        if (dx) {
            T* dcols = scratch.dcols_for(rows * out_hw);
            MapRM<T> dc_m(dcols, static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(out_hw));
            dc_m.noalias() = w_m.transpose() * dy_m;
            detail::col2im_add(dcols, x.c, x.h, x.w, layer.kernel, layer.pad,
                               layer.stride, ho, wo, dx->sample(i));
        }
    }
}

// 2x2 max pooling, stride 2; ties go to the first cell in scan order.
template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<int>& argmax) {
    if (x.h % 2 != 0 || x.w % 2 != 0)
        throw DimensionError("maxpool2: dims must be even, got " + std::to_string(x.h) +
                             "x" + std::to_string(x.w));
    y.resize(x.n, x.c, x.h / 2, x.w / 2);
    argmax.assign(y.size(), 0);
    size_t o = 0;
    for (int i = 0; i < x.n; ++i) {
        const T* xs = x.sample(i);
        for (int ic = 0; ic < x.c; ++ic) {
            const T* plane = xs + static_cast<size_t>(ic) * x.hw();
            for (int oy = 0; oy < y.h; ++oy) {
                for (int ox = 0; ox < y.w; ++ox) {
                    int base = (2 * oy) * x.w + 2 * ox;
                    int idx[4] = {base, base + 1, base + x.w, base + x.w + 1};
                    int best = idx[0];
                    for (int k = 1; k < 4; ++k)
                        if (plane[idx[k]] > plane[best]) best = idx[k];
                    y.v[o] = plane[best];
                    argmax[o] = static_cast<int>(static_cast<size_t>(ic) * x.hw()) + best;
                    ++o;
                }
            }
        }
    }
}

template <typename T>
void maxpool2_backward(const std::vector<int>& argmax, const Tensor<T>& dy,
                       int in_h, int in_w, Tensor<T>& dx) {
    dx.resize(dy.n, dy.c, in_h, in_w);
    dx.zero();
    size_t o = 0;
    for (int i = 0; i < dy.n; ++i) {
        T* dxs = dx.sample(i);
        for (size_t k = 0; k < dy.chw(); ++k, ++o)
            dxs[argmax[o]] += dy.v[o];
    }
}

// Nearest-neighbour 2x upsampling.
template <typename T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y) {
    y.resize(x.n, x.c, x.h * 2, x.w * 2);
    for (int i = 0; i < x.n; ++i) {
        const T* xs = x.sample(i);
        T* ys = y.sample(i);
        for (int ic = 0; ic < x.c; ++ic)
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix) {
                    T v = xs[(static_cast<size_t>(ic) * x.h + iy) * x.w + ix];
                    size_t base = (static_cast<size_t>(ic) * y.h + 2 * iy) * y.w + 2 * ix;
                    ys[base] = v;
                    ys[base + 1] = v;
                    ys[base + y.w] = v;
                    ys[base + y.w + 1] = v;
                }
    }
}

template <typename T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
    dx.resize(dy.n, dy.c, dy.h / 2, dy.w / 2);
    for (int i = 0; i < dy.n; ++i) {
        const T* dys = dy.sample(i);
        T* dxs = dx.sample(i);
        for (int ic = 0; ic < dx.c; ++ic)
            for (int iy = 0; iy < dx.h; ++iy)
                for (int ix = 0; ix < dx.w; ++ix) {
                    size_t base = (static_cast<size_t>(ic) * dy.h + 2 * iy) * dy.w + 2 * ix;
                    dxs[(static_cast<size_t>(ic) * dx.h + iy) * dx.w + ix] =
                        dys[base] + dys[base + 1] + dys[base + dy.w] + dys[base + dy.w + 1];
                }
    }
}

// In-place; backward recovers the mask from the activated output.
template <typename T>
void leaky_relu_forward(Tensor<T>& x, T slope) {
    for (T& v : x.v)
        if (v < T(0)) v *= slope;
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& y, Tensor<T>& dy, T slope) {
    for (size_t i = 0; i < y.size(); ++i)
        if (!(y.v[i] > T(0))) dy.v[i] *= slope;
}

template <typename T>
void relu_forward(Tensor<T>& x) {
    leaky_relu_forward(x, T(0));
}

template <typename T>
void relu_backward(const Tensor<T>& y, Tensor<T>& dy) {
    leaky_relu_backward(y, dy, T(0));
}

// y = (tanh(x) + 1) / 2, the [0,1]-mapped generator output.
template <typename T>
void tanh01_forward(Tensor<T>& x) {
    for (T& v : x.v)
        v = (std::tanh(v) + T(1)) / T(2);
}

template <typename T>
void tanh01_backward(const Tensor<T>& y, Tensor<T>& dy) {
    for (size_t i = 0; i < y.size(); ++i)
        dy.v[i] *= T(2) * y.v[i] * (T(1) - y.v[i]);
}

template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw DimensionError("concat: spatial/batch shape mismatch");
    out.resize(a.n, a.c + b.c, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.sample(i), a.sample(i) + a.chw(), out.sample(i));
        std::copy(b.sample(i), b.sample(i) + b.chw(), out.sample(i) + a.chw());
    }
}

template <typename T>
void split_channels(const Tensor<T>& dout, Tensor<T>& da, Tensor<T>& db, int a_channels) {
    da.resize(dout.n, a_channels, dout.h, dout.w);
    db.resize(dout.n, dout.c - a_channels, dout.h, dout.w);
    for (int i = 0; i < dout.n; ++i) {
        std::copy(dout.sample(i), dout.sample(i) + da.chw(), da.sample(i));
        std::copy(dout.sample(i) + da.chw(), dout.sample(i) + dout.chw(), db.sample(i));
    }
}

// Named view of one parameter array; networks expose these in a fixed order
// shared by the optimizer, the checkpoint container, and gradient reduction.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<T>* values = nullptr;
};

template <typename T>
void append_conv_params(std::vector<ParamRef<T>>& out, const std::string& prefix,
                        ConvLayer<T>& layer) {
    out.push_back({prefix + ".w", &layer.weight});
    out.push_back({prefix + ".b", &layer.bias});
}

template <typename T>
void append_conv_grads(std::vector<std::vector<T>*>& out, ConvGrads<T>& grads) {
    out.push_back(&grads.dweight);
    out.push_back(&grads.dbias);
}

// dst += src, slot by slot.
template <typename T>
void accumulate_grads(const std::vector<std::vector<T>*>& dst,
                      const std::vector<std::vector<T>*>& src) {
    for (size_t s = 0; s < dst.size(); ++s) {
        auto& d = *dst[s];
        const auto& a = *src[s];
        for (size_t i = 0; i < d.size(); ++i) d[i] += a[i];
    }
}

} // namespace qmm::nn
