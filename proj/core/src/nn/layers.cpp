#include "echoreg/nn/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "echoreg/error.hpp"

namespace echoreg::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

// col has (channels * k * k) rows and (out_h * out_w) columns.
void im2col(const double* x, int channels, int h, int w, int k, int stride, int pad, int out_h, int out_w,
            double* col) {
    const std::size_t ncol = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        const double* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ncol;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= h) {
                        std::fill_n(dst, out_w, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates col into x.
void col2im(const double* col, int channels, int h, int w, int k, int stride, int pad, int out_h, int out_w,
            double* x) {
    const std::size_t ncol = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        double* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ncol;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* src = row + static_cast<std::size_t>(oy) * out_w;
                    double* dst = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void init_uniform_fan_in(Parameter& weight, Parameter& bias, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : weight.value) v = dist(rng);
    for (auto& v : bias.value) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding)
    : cin_(in_channels), cout_(out_channels), kernel_(kernel), stride_(stride), padding_(padding),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {
    require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0 && padding >= 0,
            "Conv2d: invalid geometry");
}

void Conv2d::init(Rng& rng) { init_uniform_fan_in(weight_, bias_, cin_ * kernel_ * kernel_, rng); }

void Conv2d::zero_init() {
    std::fill(weight_.value.begin(), weight_.value.end(), 0.0);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x) {
    require(x.c() == cin_, "Conv2d " + weight_.name + ": expected " + std::to_string(cin_) + " channels, got " +
                               x.shape_string());
    const int oh = out_size(x.h()), ow = out_size(x.w());
    require(oh > 0 && ow > 0, "Conv2d: input too small");
    input_ = x;
    Tensor out(x.n(), cout_, oh, ow);
    const int rows = cin_ * kernel_ * kernel_;
    const int ncol = oh * ow;
    RowMatrix col(rows, ncol);
    ConstMatMap W(weight_.value.data(), cout_, rows);
    const Eigen::Map<const Eigen::VectorXd> b(bias_.value.data(), cout_);
    for (int n = 0; n < x.n(); ++n) {
        im2col(x.sample(n), cin_, x.h(), x.w(), kernel_, stride_, padding_, oh, ow, col.data());
        MatMap y(out.sample(n), cout_, ncol);
        y.noalias() = W * col;
        y.colwise() += b;
    }
    return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
    const Tensor& x = input_;
    const int oh = grad_out.h(), ow = grad_out.w();
    require(grad_out.c() == cout_ && grad_out.n() == x.n(), "Conv2d backward: gradient shape mismatch");
    const int rows = cin_ * kernel_ * kernel_;
    const int ncol = oh * ow;
    RowMatrix col(rows, ncol);
    RowMatrix dcol(rows, ncol);
    ConstMatMap W(weight_.value.data(), cout_, rows);
    MatMap dW(weight_.grad.data(), cout_, rows);
    VecMap db(bias_.grad.data(), cout_);
    Tensor dx(x.n(), cin_, x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
        im2col(x.sample(n), cin_, x.h(), x.w(), kernel_, stride_, padding_, oh, ow, col.data());
        ConstMatMap g(grad_out.sample(n), cout_, ncol);
        dW.noalias() += g * col.transpose();
        db += g.rowwise().sum();
        dcol.noalias() = W.transpose() * g;
        col2im(dcol.data(), cin_, x.h(), x.w(), kernel_, stride_, padding_, oh, ow, dx.sample(n));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
                                 int padding, int output_padding)
    : cin_(in_channels), cout_(out_channels), kernel_(kernel), stride_(stride), padding_(padding),
      output_padding_(output_padding),
      weight_(name + ".weight", static_cast<std::size_t>(in_channels) * out_channels * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {
    require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0 && padding >= 0 && output_padding >= 0,
            "ConvTranspose2d: invalid geometry");
}

void ConvTranspose2d::init(Rng& rng) { init_uniform_fan_in(weight_, bias_, cout_ * kernel_ * kernel_, rng); }

Tensor ConvTranspose2d::forward(const Tensor& x) {
    require(x.c() == cin_, "ConvTranspose2d " + weight_.name + ": channel mismatch " + x.shape_string());
    input_ = x;
    const int oh = out_size(x.h()), ow = out_size(x.w());
    const int rows = cout_ * kernel_ * kernel_;
    const int ncol = x.h() * x.w();
    Tensor out(x.n(), cout_, oh, ow);
    RowMatrix col(rows, ncol);
    ConstMatMap W(weight_.value.data(), cin_, rows);
    for (int n = 0; n < x.n(); ++n) {
        ConstMatMap in(x.sample(n), cin_, ncol);
        col.noalias() = W.transpose() * in;
        col2im(col.data(), cout_, oh, ow, kernel_, stride_, padding_, x.h(), x.w(), out.sample(n));
        MatMap y(out.sample(n), cout_, static_cast<Eigen::Index>(oh) * ow);
        y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias_.value.data(), cout_);
    }
    return out;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
    const Tensor& x = input_;
    const int oh = grad_out.h(), ow = grad_out.w();
    require(grad_out.c() == cout_ && grad_out.n() == x.n(), "ConvTranspose2d backward: gradient shape mismatch");
    const int rows = cout_ * kernel_ * kernel_;
    const int ncol = x.h() * x.w();
    RowMatrix col(rows, ncol);
    ConstMatMap W(weight_.value.data(), cin_, rows);
    MatMap dW(weight_.grad.data(), cin_, rows);
    VecMap db(bias_.grad.data(), cout_);
    Tensor dx(x.n(), cin_, x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
        im2col(grad_out.sample(n), cout_, oh, ow, kernel_, stride_, padding_, x.h(), x.w(), col.data());
        ConstMatMap in(x.sample(n), cin_, ncol);
        dW.noalias() += in * col.transpose();
        MatMap dxn(dx.sample(n), cin_, ncol);
        dxn.noalias() = W * col;
        ConstMatMap g(grad_out.sample(n), cout_, static_cast<Eigen::Index>(oh) * ow);
        db += g.rowwise().sum();
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in_features, int out_features)
    : in_(in_features), out_(out_features),
      weight_(name + ".weight", static_cast<std::size_t>(in_features) * out_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features)) {
    require(in_features > 0 && out_features > 0, "Linear: invalid size");
}

void Linear::init(Rng& rng) { init_uniform_fan_in(weight_, bias_, in_, rng); }

Tensor Linear::forward(const Tensor& x) {
    require(x.sample_size() == static_cast<std::size_t>(in_),
            "Linear " + weight_.name + ": expected " + std::to_string(in_) + " features, got " + x.shape_string());
    input_ = x;
    in_c_ = x.c();
    in_h_ = x.h();
    in_w_ = x.w();
    Tensor out(x.n(), out_, 1, 1);
    ConstMatMap X(x.data(), x.n(), in_);
    ConstMatMap W(weight_.value.data(), out_, in_);
    MatMap Y(out.data(), x.n(), out_);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), out_);
    return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
    require(grad_out.n() == input_.n() && grad_out.sample_size() == static_cast<std::size_t>(out_),
            "Linear backward: gradient shape mismatch");
    ConstMatMap G(grad_out.data(), grad_out.n(), out_);
    ConstMatMap X(input_.data(), input_.n(), in_);
    ConstMatMap W(weight_.value.data(), out_, in_);
    MatMap dW(weight_.grad.data(), out_, in_);
    dW.noalias() += G.transpose() * X;
    Eigen::Map<Eigen::RowVectorXd>(bias_.grad.data(), out_) += G.colwise().sum();
    Tensor dx(input_.n(), in_c_, in_h_, in_w_);
    MatMap DX(dx.data(), input_.n(), in_);
    DX.noalias() = G * W;
    return dx;
}

// ---------------------------------------------------------------------------
// Pointwise

Tensor LeakyRelu::forward(const Tensor& x) {
    input_ = x;
    Tensor out = x;
    for (auto& v : out.values()) v = v > 0.0 ? v : slope_ * v;
    return out;
}

Tensor LeakyRelu::backward(const Tensor& grad_out) {
    require(grad_out.same_shape(input_), "LeakyRelu backward: gradient shape mismatch");
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!(input_[i] > 0.0)) dx[i] *= slope_;
    }
    return dx;
}

Tensor Sigmoid::forward(const Tensor& x) {
    output_ = x;
    for (auto& v : output_.values()) v = 1.0 / (1.0 + std::exp(-v));
    return output_;
}

Tensor Sigmoid::backward(const Tensor& grad_out) {
    require(grad_out.same_shape(output_), "Sigmoid backward: gradient shape mismatch");
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= output_[i] * (1.0 - output_[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// Normalisation

namespace {

// Shared backward for normalisation over a group of m values with unit affine.
void normalize_backward(const double* g, const double* xhat, double inv_std, std::size_t m, double* dx) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xhat[i];
    }
    const double mean_g = sum_g / m;
    const double mean_gx = sum_gx / m;
    for (std::size_t i = 0; i < m; ++i) dx[i] = inv_std * (g[i] - mean_g - xhat[i] * mean_gx);
}

}  // namespace

BatchNorm2d::BatchNorm2d(std::string name, int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps), gamma_(name + ".gamma", channels),
      beta_(name + ".beta", channels), running_mean_{name + ".running_mean", AlignedVector(channels, 0.0)},
      running_var_{name + ".running_var", AlignedVector(channels, 1.0)} {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
    require(x.c() == channels_, "BatchNorm2d: channel mismatch " + x.shape_string());
    mode_ = mode;
    const std::size_t plane = x.plane_size();
    const std::size_t m = plane * x.n();
    Tensor out(x.n(), x.c(), x.h(), x.w());
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(channels_, 0.0);
    for (int c = 0; c < channels_; ++c) {
        double mean, var;
        if (mode == Mode::train) {
            double s = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const double* p = x.sample(n) + c * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            mean = s / m;
            double ss = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const double* p = x.sample(n) + c * plane;
                for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
            }
            var = ss / m;
            const double unbiased = m > 1 ? ss / (m - 1) : var;
            running_mean_.value[c] = (1 - momentum_) * running_mean_.value[c] + momentum_ * mean;
            running_var_.value[c] = (1 - momentum_) * running_var_.value[c] + momentum_ * unbiased;
        } else {
            mean = running_mean_.value[c];
            var = running_var_.value[c];
        }
        const double inv_std = 1.0 / std::sqrt(var + eps_);
        inv_std_[c] = inv_std;
        for (int n = 0; n < x.n(); ++n) {
            const double* p = x.sample(n) + c * plane;
            double* xh = xhat_.sample(n) + c * plane;
            double* o = out.sample(n) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mean) * inv_std;
                o[i] = gamma_.value[c] * xh[i] + beta_.value[c];
            }
        }
    }
    return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
    require(grad_out.same_shape(xhat_), "BatchNorm2d backward: gradient shape mismatch");
    const std::size_t plane = grad_out.plane_size();
    const std::size_t m = plane * grad_out.n();
    Tensor dx(grad_out.n(), grad_out.c(), grad_out.h(), grad_out.w());
    std::vector<double> g(m), xh(m), d(m);
    for (int c = 0; c < channels_; ++c) {
        for (int n = 0; n < grad_out.n(); ++n) {
            std::copy_n(grad_out.sample(n) + c * plane, plane, g.begin() + n * plane);
            std::copy_n(xhat_.sample(n) + c * plane, plane, xh.begin() + n * plane);
        }
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
        }
        gamma_.grad[c] += sum_gx;
        beta_.grad[c] += sum_g;
        const double gamma = gamma_.value[c];
        for (auto& v : g) v *= gamma;
        if (mode_ == Mode::train) {
            normalize_backward(g.data(), xh.data(), inv_std_[c], m, d.data());
        } else {
            for (std::size_t i = 0; i < m; ++i) d[i] = g[i] * inv_std_[c];
        }
        for (int n = 0; n < grad_out.n(); ++n) std::copy_n(d.begin() + n * plane, plane, dx.sample(n) + c * plane);
    }
    return dx;
}

Tensor InstanceNorm2d::forward(const Tensor& x) {
    const std::size_t plane = x.plane_size();
    Tensor out(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(static_cast<std::size_t>(x.n()) * x.c(), 0.0);
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const double* p = x.sample(n) + c * plane;
            double* o = out.sample(n) + c * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            const double mean = s / plane;
            double ss = 0.0;
            for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
            const double inv_std = 1.0 / std::sqrt(ss / plane + eps_);
            inv_std_[static_cast<std::size_t>(n) * x.c() + c] = inv_std;
            for (std::size_t i = 0; i < plane; ++i) o[i] = (p[i] - mean) * inv_std;
        }
    }
    xhat_ = out;
    return out;
}

Tensor InstanceNorm2d::backward(const Tensor& grad_out) {
    require(grad_out.same_shape(xhat_), "InstanceNorm2d backward: gradient shape mismatch");
    const std::size_t plane = grad_out.plane_size();
    Tensor dx(grad_out.n(), grad_out.c(), grad_out.h(), grad_out.w());
    for (int n = 0; n < grad_out.n(); ++n) {
        for (int c = 0; c < grad_out.c(); ++c) {
            const std::size_t off = static_cast<std::size_t>(c) * plane;
            normalize_backward(grad_out.sample(n) + off, xhat_.sample(n) + off,
                               inv_std_[static_cast<std::size_t>(n) * grad_out.c() + c], plane, dx.sample(n) + off);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Dropout, pooling

Tensor Dropout::forward(const Tensor& x, Mode mode, Rng& rng) {
    if (mode == Mode::eval || p_ <= 0.0) {
        mask_.clear();
        return x;
    }
    mask_.resize(x.size());
    std::bernoulli_distribution keep(1.0 - p_);
    const double scale = 1.0 / (1.0 - p_);
    Tensor out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask_[i] = keep(rng) ? scale : 0.0;
        out[i] *= mask_[i];
    }
    return out;
}

Tensor Dropout::backward(const Tensor& grad_out) {
    if (mask_.empty()) return grad_out;
    require(grad_out.size() == mask_.size(), "Dropout backward: gradient shape mismatch");
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
    return dx;
}

Tensor AvgPool2::forward(const Tensor& x) {
    require(x.h() % 2 == 0 && x.w() % 2 == 0, "AvgPool2: spatial size must be even, got " + x.shape_string());
    in_h_ = x.h();
    in_w_ = x.w();
    Tensor out(x.n(), x.c(), x.h() / 2, x.w() / 2);
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c)
            for (int y = 0; y < out.h(); ++y)
                for (int xx = 0; xx < out.w(); ++xx)
                    out(n, c, y, xx) = 0.25 * (x(n, c, 2 * y, 2 * xx) + x(n, c, 2 * y, 2 * xx + 1) +
                                               x(n, c, 2 * y + 1, 2 * xx) + x(n, c, 2 * y + 1, 2 * xx + 1));
    return out;
}

Tensor AvgPool2::backward(const Tensor& grad_out) {
    Tensor dx(grad_out.n(), grad_out.c(), in_h_, in_w_);
    for (int n = 0; n < grad_out.n(); ++n)
        for (int c = 0; c < grad_out.c(); ++c)
            for (int y = 0; y < in_h_; ++y)
                for (int x = 0; x < in_w_; ++x) dx(n, c, y, x) = 0.25 * grad_out(n, c, y / 2, x / 2);
    return dx;
}

}  // namespace echoreg::nn
