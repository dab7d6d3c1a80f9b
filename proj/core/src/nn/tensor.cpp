#include "echoreg/nn/tensor.hpp"

#include <algorithm>

#include "echoreg/error.hpp"

namespace echoreg::nn {

Tensor::Tensor(int n, int c, int h, int w, double fill) : n_(n), c_(c), h_(h), w_(w) {
    require(n > 0 && c > 0 && h > 0 && w > 0, "tensor dimensions must be positive");
    data_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

Tensor Tensor::reshaped(int n, int c, int h, int w) const {
    require(static_cast<std::size_t>(n) * c * h * w == data_.size(), "reshape changes element count");
    Tensor t = *this;
    t.n_ = n;
    t.c_ = c;
    t.h_ = h;
    t.w_ = w;
    return t;
}

std::string Tensor::shape_string() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" + std::to_string(w_);
}

Tensor& Tensor::operator+=(const Tensor& o) {
    require(same_shape(o), "tensor add: shape mismatch " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(), "concat: incompatible tensors");
    Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
    for (int n = 0; n < a.n(); ++n) {
        std::copy_n(a.sample(n), a.sample_size(), out.sample(n));
        std::copy_n(b.sample(n), b.sample_size(), out.sample(n) + a.sample_size());
    }
    return out;
}

void split_channels(const Tensor& grad, int channels_a, Tensor& grad_a, Tensor& grad_b) {
    require(channels_a > 0 && channels_a < grad.c(), "split: invalid channel split");
    grad_a = Tensor(grad.n(), channels_a, grad.h(), grad.w());
    grad_b = Tensor(grad.n(), grad.c() - channels_a, grad.h(), grad.w());
    for (int n = 0; n < grad.n(); ++n) {
        std::copy_n(grad.sample(n), grad_a.sample_size(), grad_a.sample(n));
        std::copy_n(grad.sample(n) + grad_a.sample_size(), grad_b.sample_size(), grad_b.sample(n));
    }
}

}  // namespace echoreg::nn
