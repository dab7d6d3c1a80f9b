#pragma once

#include <vector>

#include "echoreg/nn/layers.hpp"

namespace echoreg::nn {

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 term added to the gradient (no AMSGrad)
};

class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamOptions options);

    void step();
    void zero_grad();
    long steps() const noexcept { return t_; }
    const AdamOptions& options() const noexcept { return opt_; }

private:
    std::vector<Parameter*> params_;
    AdamOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

/// Euclidean norm of all gradients; used in tests and logging.
double gradient_norm(const std::vector<Parameter*>& params);

}  // namespace echoreg::nn
