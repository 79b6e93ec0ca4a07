#pragma once

#include <map>
#include <string>
#include <vector>

#include "nn/modules.hpp"

namespace tsyn::nn {

class Adam {
public:
    Adam(ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : store_(&store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void zero_grad() { store_->zero_grad(); }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& [name, p] : const_cast<std::map<std::string, Tensor>&>(store_->all())) {
            auto& st = state_[name];
            if (st.m.size() != static_cast<size_t>(p.size())) {
                st.m.assign(p.size(), 0.0);
                st.v.assign(p.size(), 0.0);
            }
            auto& g = p.grad();
            double* val = p.data();
            for (std::int64_t i = 0; i < p.size(); ++i) {
                st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
                st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    struct State {
        std::vector<double> m, v;
    };
    ParamStore* store_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::map<std::string, State> state_;
};

}  // namespace tsyn::nn
