#pragma once

#include <cmath>
#include <vector>

#include "qmm/error.hpp"
#include "qmm/nn/layers.hpp"

namespace qmm::nn {

// Standard Adam with bias correction; moments kept in double.
template <typename T>
class AdamOptimizer {
public:
    AdamOptimizer(double lr, double beta1, double beta2, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef<T>>& params,
              const std::vector<std::vector<T>*>& grads) {
        if (params.size() != grads.size())
            throw ParameterError("adam: param/grad slot count mismatch");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t s = 0; s < params.size(); ++s) {
                m_[s].assign(params[s].values->size(), 0.0);
                v_[s].assign(params[s].values->size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t s = 0; s < params.size(); ++s) {
            auto& p = *params[s].values;
            const auto& g = *grads[s];
            auto& m = m_[s];
            auto& v = v_[s];
            for (size_t i = 0; i < p.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                      lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    long step_count() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace qmm::nn
