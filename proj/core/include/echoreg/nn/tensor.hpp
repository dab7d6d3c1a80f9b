#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace echoreg::nn {

/// Cache-line aligned allocation. Vectorised reductions peel leading
/// elements according to the runtime address, so a fixed alignment keeps
/// results bit-identical between runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dense NCHW tensor of doubles. Fully connected activations use h = w = 1.
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w, double fill = 0.0);

    int n() const noexcept { return n_; }
    int c() const noexcept { return c_; }
    int h() const noexcept { return h_; }
    int w() const noexcept { return w_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c_) * h_ * w_; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(h_) * w_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    double operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    double* sample(int n) noexcept { return data_.data() + n * sample_size(); }
    const double* sample(int n) const noexcept { return data_.data() + n * sample_size(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    /// Same data, new shape; element count must match.
    Tensor reshaped(int n, int c, int h, int w) const;
    bool same_shape(const Tensor& o) const noexcept {
        return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }
    std::string shape_string() const;

    Tensor& operator+=(const Tensor& o);
    bool operator==(const Tensor&) const = default;

private:
    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
    }

    int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    AlignedVector data_;
};

/// Concatenate along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Split dL/d(concat) back into the two inputs' gradients.
void split_channels(const Tensor& grad, int channels_a, Tensor& grad_a, Tensor& grad_b);

}  // namespace echoreg::nn
