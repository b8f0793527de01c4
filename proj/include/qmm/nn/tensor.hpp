#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "qmm/core.hpp"
#include "qmm/error.hpp"

namespace qmm::nn {

// Dense NCHW activation block. Templated on the scalar so the same layer
// code runs in float for training and double for finite-difference checks.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<size_t>(n_) * c_ * h_ * w_, T(0)) {}

    size_t size() const { return v.size(); }
    size_t chw() const { return static_cast<size_t>(c) * h * w; }
    size_t hw() const { return static_cast<size_t>(h) * w; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T* sample(int i) { return v.data() + chw() * static_cast<size_t>(i); }
    const T* sample(int i) const { return v.data() + chw() * static_cast<size_t>(i); }

    T& at(int in, int ic, int iy, int ix) {
        return v[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    T at(int in, int ic, int iy, int ix) const {
        return v[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
    }

    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    void resize(int n_, int c_, int h_, int w_) {
        n = n_; c = c_; h = h_; w = w_;
        v.assign(static_cast<size_t>(n_) * c_ * h_ * w_, T(0));
    }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

// Copies one image (values already in [0,1]) into batch slot i.
template <typename T>
void load_image(Tensor<T>& batch, int i, const ImageBuffer& img) {
    if (img.channels != batch.c || img.height != batch.h || img.width != batch.w)
        throw DimensionError("load_image: image " + std::to_string(img.channels) + "x" +
                             std::to_string(img.height) + "x" + std::to_string(img.width) +
                             " does not fit batch " + std::to_string(batch.c) + "x" +
                             std::to_string(batch.h) + "x" + std::to_string(batch.w));
    T* dst = batch.sample(i);
    for (size_t k = 0; k < batch.chw(); ++k)
        dst[k] = static_cast<T>(img.values[k]);
}

template <typename T>
ImageBuffer to_image(const Tensor<T>& batch, int i) {
    ImageBuffer img(batch.h, batch.w, batch.c);
    const T* src = batch.sample(i);
    for (size_t k = 0; k < batch.chw(); ++k)
        img.values[k] = static_cast<float>(src[k]);
    return img;
}

template <typename T>
Grid2D to_grid(const Tensor<T>& batch, int i, int channel = 0) {
    Grid2D g(batch.h, batch.w);
    const T* src = batch.sample(i) + batch.hw() * static_cast<size_t>(channel);
    for (size_t k = 0; k < batch.hw(); ++k)
        g.values[k] = static_cast<double>(src[k]);
    return g;
}

} // namespace qmm::nn
