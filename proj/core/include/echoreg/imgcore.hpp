#pragma once

// Raster types shared by every stage of the pipeline, plus the differentiable
// warping used to resample a moving image into the fixed image's frame.
//
// Conventions:
//   * rows are y, columns are x; storage is row-major.
//   * displacements are (dy, dx) in pixels at the raster's own resolution.
//   * warping is a pull-back: out(y, x) = in(y + dy(y, x), x + dx(y, x)),
//     sampled bilinearly with coordinates clamped to the image border.

#include <cstdint>
#include <span>
#include <vector>

#include "echoreg/error.hpp"

namespace echoreg {

/// Physical size of a pixel in millimetres.
struct Spacing {
    double y = 1.0;
    double x = 1.0;

    bool operator==(const Spacing&) const = default;
};

/// Dense row-major grid. Base for the intensity and label rasters.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols) {
        require(rows > 0 && cols > 0, "grid dimensions must be positive");
        data_.assign(static_cast<std::size_t>(rows) * cols, fill);
    }
    Grid(int rows, int cols, std::vector<T> values) : rows_(rows), cols_(cols), data_(std::move(values)) {
        require(rows > 0 && cols > 0, "grid dimensions must be positive");
        require(data_.size() == static_cast<std::size_t>(rows) * cols, "grid data size mismatch");
    }

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * cols_ + x]; }
    const T& operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * cols_ + x]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(int rows, int cols) const noexcept { return rows_ == rows && cols_ == cols; }
    template <class U>
    bool same_shape(const Grid<U>& other) const noexcept {
        return rows_ == other.rows() && cols_ == other.cols();
    }

    bool operator==(const Grid&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

/// Single-channel intensity raster (I_F, I_M, I_W).
class Image2D : public Grid<double> {
public:
    Image2D() = default;
    Image2D(int rows, int cols, double fill = 0.0, Spacing spacing = {});
    Image2D(int rows, int cols, std::vector<double> values, Spacing spacing = {});

    const Spacing& spacing() const noexcept { return spacing_; }
    void set_spacing(Spacing s);

    double min() const;
    double max() const;
    double mean() const;

    bool operator==(const Image2D&) const = default;

private:
    Spacing spacing_;
};

enum Label : std::uint8_t { background = 0, myocardium = 1, ventricle = 2 };
inline constexpr int kNumLabels = 3;

/// Integer label raster (M_F, M_M, M_W) over {0 background, 1 MYO, 2 LV}.
class LabelMask : public Grid<std::uint8_t> {
public:
    LabelMask() = default;
    LabelMask(int rows, int cols, std::uint8_t fill = 0, Spacing spacing = {});
    LabelMask(int rows, int cols, std::vector<std::uint8_t> values, Spacing spacing = {});

    const Spacing& spacing() const noexcept { return spacing_; }
    void set_spacing(Spacing s);

    std::size_t count(std::uint8_t label) const;
    /// Throws ContractError if any label lies outside {0,1,2}.
    void validate() const;

    bool operator==(const LabelMask&) const = default;

private:
    Spacing spacing_;
};

/// Per-pixel displacement u(x); the warp is phi(x) = x + u(x).
class DisplacementField {
public:
    DisplacementField() = default;
    DisplacementField(int rows, int cols);
    DisplacementField(Grid<double> dy, Grid<double> dx);

    int rows() const noexcept { return dy_.rows(); }
    int cols() const noexcept { return dy_.cols(); }
    std::size_t size() const noexcept { return dy_.size(); }

    Grid<double>& dy() noexcept { return dy_; }
    Grid<double>& dx() noexcept { return dx_; }
    const Grid<double>& dy() const noexcept { return dy_; }
    const Grid<double>& dx() const noexcept { return dx_; }

    bool all_finite() const;
    /// Mean Euclidean displacement length in pixels.
    double mean_magnitude() const;

    bool operator==(const DisplacementField&) const = default;

private:
    Grid<double> dy_;
    Grid<double> dx_;
};

/// K soft channels over an H x W grid, channel-major.
class ProbMaps {
public:
    ProbMaps() = default;
    ProbMaps(int channels, int rows, int cols, double fill = 0.0);

    int channels() const noexcept { return channels_; }
    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }

    double& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
    double operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

    std::span<double> channel(int c);
    std::span<const double> channel(int c) const;
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    /// Copy of channels [first, first + count).
    ProbMaps slice(int first, int count) const;

    bool operator==(const ProbMaps&) const = default;

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * rows_ + y) * cols_ + x;
    }

    int channels_ = 0;
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Warping

/// Bilinear sample with border clamping.
double sample_bilinear(const Grid<double>& image, double y, double x);

Image2D warp_intensity(const Image2D& image, const DisplacementField& field);

struct IntensityWarpGrad {
    Grid<double> image;        // dL/d(image)
    DisplacementField field;   // dL/d(field)
};

/// Adjoint of warp_intensity given dL/d(output).
IntensityWarpGrad warp_intensity_backward(const Image2D& image, const DisplacementField& field,
                                          const Grid<double>& grad_output);

/// One-hot, bilinear warp per channel, argmax (ties go to the lower label).
LabelMask warp_mask(const LabelMask& mask, const DisplacementField& field);

/// Per-channel bilinear warp followed by per-pixel renormalisation.
ProbMaps soft_warp_probmaps(const ProbMaps& maps, const DisplacementField& field);

struct ProbWarpGrad {
    ProbMaps maps;
    DisplacementField field;
};

ProbWarpGrad soft_warp_probmaps_backward(const ProbMaps& maps, const DisplacementField& field,
                                         const ProbMaps& grad_output);

// ---------------------------------------------------------------------------
// Resampling, normalisation, encoding

inline constexpr int kMinRasterSide = 8;

/// Bicubic resize with half-pixel centres, clamped to [0, 1]; spacing is
/// rescaled so the physical extent is preserved.
Image2D resize(const Image2D& image, int rows, int cols);
/// Nearest-neighbour resize; never introduces new labels.
LabelMask resize(const LabelMask& mask, int rows, int cols);
/// Bilinear resize of each component, scaled by the resolution ratio so the
/// displacement stays in pixel units of the new grid.
DisplacementField resize(const DisplacementField& field, int rows, int cols);

/// Affine map to [0, 1]; a constant image maps to all zeros.
Image2D normalize(const Image2D& image);

ProbMaps one_hot(const LabelMask& mask, int num_classes);
/// Per-pixel argmax; ties resolve to the lowest channel index.
LabelMask argmax(const ProbMaps& maps, Spacing spacing = {});

Image2D flip_horizontal(const Image2D& image);
LabelMask flip_horizontal(const LabelMask& mask);

}  // namespace echoreg
