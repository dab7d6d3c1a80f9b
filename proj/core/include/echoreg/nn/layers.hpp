#pragma once

// Layers with hand-written backward passes. Each layer caches what it needs
// from the most recent forward(); backward() consumes that cache, so a
// forward/backward pair must not be interleaved with another forward on the
// same layer.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "echoreg/nn/tensor.hpp"

namespace echoreg::nn {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

/// Trainable array with its gradient accumulator.
struct Parameter {
    std::string name;
    AlignedVector value;
    AlignedVector grad;

    Parameter() = default;
    Parameter(std::string n, std::size_t size) : name(std::move(n)), value(size, 0.0), grad(size, 0.0) {}
    void zero_grad();
};

/// Non-trainable persistent array (e.g. running statistics).
struct Buffer {
    std::string name;
    AlignedVector value;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
void init_uniform_fan_in(Parameter& weight, Parameter& bias, int fan_in, Rng& rng);

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

    void init(Rng& rng);
    void zero_init();
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
    int out_size(int in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }
    int in_channels() const { return cin_; }
    int out_channels() const { return cout_; }
    std::size_t parameter_count() const { return weight_.value.size() + bias_.value.size(); }

private:
    int cin_ = 0, cout_ = 0, kernel_ = 0, stride_ = 1, padding_ = 0;
    Parameter weight_;  // cout x (cin * k * k)
    Parameter bias_;
    Tensor input_;
};

class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding,
                    int output_padding);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

    void init(Rng& rng);
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
    int out_size(int in) const { return (in - 1) * stride_ - 2 * padding_ + kernel_ + output_padding_; }
    std::size_t parameter_count() const { return weight_.value.size() + bias_.value.size(); }

private:
    int cin_ = 0, cout_ = 0, kernel_ = 0, stride_ = 1, padding_ = 0, output_padding_ = 0;
    Parameter weight_;  // cin x (cout * k * k)
    Parameter bias_;
    Tensor input_;
};

class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in_features, int out_features);

    /// Accepts any tensor whose sample size equals in_features; output is n x out x 1 x 1.
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

    void init(Rng& rng);
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
    int in_features() const { return in_; }
    int out_features() const { return out_; }
    std::size_t parameter_count() const { return weight_.value.size() + bias_.value.size(); }

private:
    int in_ = 0, out_ = 0;
    Parameter weight_;  // out x in
    Parameter bias_;
    Tensor input_;
    int in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

class LeakyRelu {
public:
    explicit LeakyRelu(double slope = 0.01) : slope_(slope) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    double slope_;
    Tensor input_;
};

/// LeakyRelu with zero slope.
class Relu : public LeakyRelu {
public:
    Relu() : LeakyRelu(0.0) {}
};

class Sigmoid {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    Tensor output_;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& grad_out);

    std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }
    std::vector<Buffer*> buffers() { return {&running_mean_, &running_var_}; }
    std::size_t parameter_count() const { return gamma_.value.size() + beta_.value.size(); }

private:
    int channels_ = 0;
    double momentum_ = 0.1, eps_ = 1e-5;
    Parameter gamma_, beta_;
    Buffer running_mean_, running_var_;
    Mode mode_ = Mode::eval;
    Tensor xhat_;
    std::vector<double> inv_std_;
};

/// Per-sample, per-channel normalisation without affine parameters; uses
/// instance statistics in both modes.
class InstanceNorm2d {
public:
    explicit InstanceNorm2d(double eps = 1e-5) : eps_(eps) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    double eps_;
    Tensor xhat_;
    std::vector<double> inv_std_;
};

/// Inverted dropout; identity in eval mode.
class Dropout {
public:
    explicit Dropout(double p = 0.1) : p_(p) {}
    Tensor forward(const Tensor& x, Mode mode, Rng& rng);
    Tensor backward(const Tensor& grad_out);

private:
    double p_;
    std::vector<double> mask_;  // empty when last forward ran in eval mode
};

/// 2x2 average pooling with stride 2.
class AvgPool2 {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    int in_h_ = 0, in_w_ = 0;
};

}  // namespace echoreg::nn
