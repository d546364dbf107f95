#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "octpipe/nn/layers.hpp"

namespace oct::nn {

// Adam with the usual bias correction. Skips frozen params and buffers.
template <typename S>
class Adam {
public:
    explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Param<S>*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto* p : params) {
            if (!p->trainable || p->is_buffer) continue;
            auto& st = state_[p];
            if (st.m.size() != p->value.numel()) {
                st.m.assign(p->value.numel(), 0.0);
                st.v.assign(p->value.numel(), 0.0);
            }
            p->ensure_grad();
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad.data[i];
                st.m[i] = beta1_ * st.m[i] + (1 - beta1_) * g;
                st.v[i] = beta2_ * st.v[i] + (1 - beta2_) * g * g;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                p->value.data[i] -= static_cast<S>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    double lr() const { return lr_; }

private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::unordered_map<const Param<S>*, State> state_;
};

// SGD with Nesterov momentum (PyTorch formulation):
//   buf = mu * buf + g;  p -= lr * (g + mu * buf)
template <typename S>
class SgdNesterov {
public:
    explicit SgdNesterov(double lr = 0.01, double momentum = 0.05)
        : lr_(lr), momentum_(momentum) {}

    void step(const std::vector<Param<S>*>& params) {
        for (auto* p : params) {
            if (!p->trainable || p->is_buffer) continue;
            auto& buf = state_[p];
            if (buf.size() != p->value.numel()) buf.assign(p->value.numel(), 0.0);
            p->ensure_grad();
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad.data[i];
                buf[i] = momentum_ * buf[i] + g;
                p->value.data[i] -= static_cast<S>(lr_ * (g + momentum_ * buf[i]));
            }
        }
    }

    double lr() const { return lr_; }

private:
    double lr_, momentum_;
    std::unordered_map<const Param<S>*, std::vector<double>> state_;
};

}  // namespace oct::nn
