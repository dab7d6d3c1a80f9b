#include <algorithm>
#include <cmath>

#include "echoreg/imgcore.hpp"

namespace echoreg {

namespace {

constexpr double kCubicA = -0.75;

double cubic_weight(double t) {
    t = std::abs(t);
    if (t <= 1.0) return ((kCubicA + 2.0) * t - (kCubicA + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((kCubicA * t - 5.0 * kCubicA) * t + 8.0 * kCubicA) * t - 4.0 * kCubicA;
    return 0.0;
}

// Source coordinate of a destination pixel centre (half-pixel convention).
double source_coord(int dst, int src_len, int dst_len) {
    return (dst + 0.5) * static_cast<double>(src_len) / dst_len - 0.5;
}

void check_target(int rows, int cols) {
    if (rows < kMinRasterSide || cols < kMinRasterSide) {
        throw ContractError("resize: target " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " is below the minimum side of " + std::to_string(kMinRasterSide));
    }
}

Spacing rescale(Spacing s, int src_rows, int src_cols, int rows, int cols) {
    return {s.y * src_rows / rows, s.x * src_cols / cols};
}

// Separable 1D taps: four indices and weights per destination coordinate.
struct CubicTaps {
    int idx[4];
    double w[4];
};

std::vector<CubicTaps> cubic_taps(int src_len, int dst_len) {
    std::vector<CubicTaps> taps(dst_len);
    for (int d = 0; d < dst_len; ++d) {
        const double s = source_coord(d, src_len, dst_len);
        const int base = static_cast<int>(std::floor(s));
        const double frac = s - base;
        for (int k = 0; k < 4; ++k) {
            taps[d].idx[k] = std::clamp(base - 1 + k, 0, src_len - 1);
            taps[d].w[k] = cubic_weight(frac - (k - 1));
        }
    }
    return taps;
}

Grid<double> bilinear_resize(const Grid<double>& src, int rows, int cols) {
    Grid<double> out(rows, cols, 0.0);
    for (int y = 0; y < rows; ++y) {
        const double sy = std::clamp(source_coord(y, src.rows(), rows), 0.0, src.rows() - 1.0);
        for (int x = 0; x < cols; ++x) {
            const double sx = std::clamp(source_coord(x, src.cols(), cols), 0.0, src.cols() - 1.0);
            out(y, x) = sample_bilinear(src, sy, sx);
        }
    }
    return out;
}

}  // namespace

Image2D resize(const Image2D& image, int rows, int cols) {
    check_target(rows, cols);
    const Spacing spacing = rescale(image.spacing(), image.rows(), image.cols(), rows, cols);
    if (image.same_shape(rows, cols)) return image;

    const auto ty = cubic_taps(image.rows(), rows);
    const auto tx = cubic_taps(image.cols(), cols);

    // Horizontal pass then vertical pass.
    Grid<double> tmp(image.rows(), cols, 0.0);
    for (int y = 0; y < image.rows(); ++y) {
        for (int x = 0; x < cols; ++x) {
            double v = 0.0;
            for (int k = 0; k < 4; ++k) v += tx[x].w[k] * image(y, tx[x].idx[k]);
            tmp(y, x) = v;
        }
    }
    Image2D out(rows, cols, 0.0, spacing);
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            double v = 0.0;
            for (int k = 0; k < 4; ++k) v += ty[y].w[k] * tmp(ty[y].idx[k], x);
            out(y, x) = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

LabelMask resize(const LabelMask& mask, int rows, int cols) {
    check_target(rows, cols);
    LabelMask out(rows, cols, 0, rescale(mask.spacing(), mask.rows(), mask.cols(), rows, cols));
    for (int y = 0; y < rows; ++y) {
        const int sy = std::min(static_cast<int>(std::floor((y + 0.5) * mask.rows() / rows)), mask.rows() - 1);
        for (int x = 0; x < cols; ++x) {
            const int sx = std::min(static_cast<int>(std::floor((x + 0.5) * mask.cols() / cols)), mask.cols() - 1);
            out(y, x) = mask(sy, sx);
        }
    }
    return out;
}

DisplacementField resize(const DisplacementField& field, int rows, int cols) {
    require(rows > 0 && cols > 0, "resize: target dimensions must be positive");
    if (field.rows() == rows && field.cols() == cols) return field;
    Grid<double> dy = bilinear_resize(field.dy(), rows, cols);
    Grid<double> dx = bilinear_resize(field.dx(), rows, cols);
    const double ky = static_cast<double>(rows) / field.rows();
    const double kx = static_cast<double>(cols) / field.cols();
    for (auto& v : dy.storage()) v *= ky;
    for (auto& v : dx.storage()) v *= kx;
    return DisplacementField(std::move(dy), std::move(dx));
}

}  // namespace echoreg
