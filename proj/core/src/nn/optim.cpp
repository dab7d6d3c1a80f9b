#include "echoreg/nn/optim.hpp"

#include <cmath>

#include "echoreg/error.hpp"

namespace echoreg::nn {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    require(opt_.lr > 0.0, "Adam: learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] + opt_.weight_decay * p.value[i];
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

double gradient_norm(const std::vector<Parameter*>& params) {
    double acc = 0.0;
    for (const auto* p : params)
        for (double g : p->grad) acc += g * g;
    return std::sqrt(acc);
}

}  // namespace echoreg::nn
