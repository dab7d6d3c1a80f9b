#include "echoreg/imgcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace echoreg {

// ---------------------------------------------------------------------------
// Types

Image2D::Image2D(int rows, int cols, double fill, Spacing spacing) : Grid<double>(rows, cols, fill) {
    set_spacing(spacing);
}

Image2D::Image2D(int rows, int cols, std::vector<double> values, Spacing spacing)
    : Grid<double>(rows, cols, std::move(values)) {
    set_spacing(spacing);
}

void Image2D::set_spacing(Spacing s) {
    require(s.y > 0.0 && s.x > 0.0, "pixel spacing must be positive");
    spacing_ = s;
}

double Image2D::min() const { return *std::min_element(storage().begin(), storage().end()); }
double Image2D::max() const { return *std::max_element(storage().begin(), storage().end()); }
double Image2D::mean() const {
    return std::accumulate(storage().begin(), storage().end(), 0.0) / static_cast<double>(size());
}

LabelMask::LabelMask(int rows, int cols, std::uint8_t fill, Spacing spacing)
    : Grid<std::uint8_t>(rows, cols, fill) {
    set_spacing(spacing);
}

LabelMask::LabelMask(int rows, int cols, std::vector<std::uint8_t> values, Spacing spacing)
    : Grid<std::uint8_t>(rows, cols, std::move(values)) {
    set_spacing(spacing);
}

void LabelMask::set_spacing(Spacing s) {
    require(s.y > 0.0 && s.x > 0.0, "pixel spacing must be positive");
    spacing_ = s;
}

std::size_t LabelMask::count(std::uint8_t label) const {
    return static_cast<std::size_t>(std::count(storage().begin(), storage().end(), label));
}

void LabelMask::validate() const {
    for (auto v : storage()) {
        if (v >= kNumLabels) throw ContractError("label value " + std::to_string(v) + " outside {0,1,2}");
    }
}

DisplacementField::DisplacementField(int rows, int cols) : dy_(rows, cols, 0.0), dx_(rows, cols, 0.0) {}

DisplacementField::DisplacementField(Grid<double> dy, Grid<double> dx) : dy_(std::move(dy)), dx_(std::move(dx)) {
    require(dy_.same_shape(dx_), "displacement components differ in shape");
}

bool DisplacementField::all_finite() const {
    auto finite = [](double v) { return std::isfinite(v); };
    return std::all_of(dy_.storage().begin(), dy_.storage().end(), finite) &&
           std::all_of(dx_.storage().begin(), dx_.storage().end(), finite);
}

double DisplacementField::mean_magnitude() const {
    double acc = 0.0;
    for (std::size_t i = 0; i < size(); ++i) acc += std::hypot(dy_[i], dx_[i]);
    return size() ? acc / static_cast<double>(size()) : 0.0;
}

ProbMaps::ProbMaps(int channels, int rows, int cols, double fill)
    : channels_(channels), rows_(rows), cols_(cols) {
    require(channels > 0 && rows > 0 && cols > 0, "probability map dimensions must be positive");
    data_.assign(static_cast<std::size_t>(channels) * rows * cols, fill);
}

std::span<double> ProbMaps::channel(int c) {
    return std::span<double>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
}

std::span<const double> ProbMaps::channel(int c) const {
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
}

ProbMaps ProbMaps::slice(int first, int count) const {
    require(first >= 0 && count > 0 && first + count <= channels_, "channel slice out of range");
    ProbMaps out(count, rows_, cols_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * plane_size()), count * plane_size(),
                out.data_.begin());
    return out;
}

// ---------------------------------------------------------------------------
// Bilinear taps

namespace {

// Four-neighbour bilinear stencil for one (clamped) sample location, with the
// derivatives of each weight with respect to the unclamped coordinates.
struct Taps {
    std::size_t idx[4];
    double w[4];
    double dwdy[4];
    double dwdx[4];
};

Taps make_taps(int rows, int cols, double y, double x) {
    const double hi_y = rows - 1;
    const double hi_x = cols - 1;
    // Clamped coordinates carry no gradient.
    const bool clamp_y = !(y > 0.0 && y < hi_y);
    const bool clamp_x = !(x > 0.0 && x < hi_x);
    const double cy = std::clamp(y, 0.0, hi_y);
    const double cx = std::clamp(x, 0.0, hi_x);
    const int y0 = std::min(static_cast<int>(std::floor(cy)), rows - 1);
    const int x0 = std::min(static_cast<int>(std::floor(cx)), cols - 1);
    const int y1 = std::min(y0 + 1, rows - 1);
    const int x1 = std::min(x0 + 1, cols - 1);
    const double fy = cy - y0;
    const double fx = cx - x0;

    Taps t{};
    t.idx[0] = static_cast<std::size_t>(y0) * cols + x0;
    t.idx[1] = static_cast<std::size_t>(y0) * cols + x1;
    t.idx[2] = static_cast<std::size_t>(y1) * cols + x0;
    t.idx[3] = static_cast<std::size_t>(y1) * cols + x1;
    t.w[0] = (1 - fy) * (1 - fx);
    t.w[1] = (1 - fy) * fx;
    t.w[2] = fy * (1 - fx);
    t.w[3] = fy * fx;
    const double gy = clamp_y ? 0.0 : 1.0;
    const double gx = clamp_x ? 0.0 : 1.0;
    t.dwdy[0] = -(1 - fx) * gy;
    t.dwdy[1] = -fx * gy;
    t.dwdy[2] = (1 - fx) * gy;
    t.dwdy[3] = fx * gy;
    t.dwdx[0] = -(1 - fy) * gx;
    t.dwdx[1] = (1 - fy) * gx;
    t.dwdx[2] = -fy * gx;
    t.dwdx[3] = fy * gx;
    return t;
}

Taps taps_at(const DisplacementField& field, int y, int x) {
    return make_taps(field.rows(), field.cols(), y + field.dy()(y, x), x + field.dx()(y, x));
}

void require_same_shape(int rows, int cols, const DisplacementField& field, const char* what) {
    if (rows != field.rows() || cols != field.cols()) {
        throw ContractError(std::string(what) + ": raster " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " does not match field " + std::to_string(field.rows()) + "x" +
                            std::to_string(field.cols()));
    }
}

}  // namespace

double sample_bilinear(const Grid<double>& image, double y, double x) {
    const Taps t = make_taps(image.rows(), image.cols(), y, x);
    double v = 0.0;
    for (int k = 0; k < 4; ++k) v += t.w[k] * image[t.idx[k]];
    return v;
}

Image2D warp_intensity(const Image2D& image, const DisplacementField& field) {
    require_same_shape(image.rows(), image.cols(), field, "warp_intensity");
    Image2D out(image.rows(), image.cols(), 0.0, image.spacing());
    for (int y = 0; y < image.rows(); ++y) {
        for (int x = 0; x < image.cols(); ++x) {
            const Taps t = taps_at(field, y, x);
            double v = 0.0;
            for (int k = 0; k < 4; ++k) v += t.w[k] * image[t.idx[k]];
            out(y, x) = v;
        }
    }
    return out;
}

IntensityWarpGrad warp_intensity_backward(const Image2D& image, const DisplacementField& field,
                                          const Grid<double>& grad_output) {
    require_same_shape(image.rows(), image.cols(), field, "warp_intensity_backward");
    require(grad_output.same_shape(image), "warp_intensity_backward: gradient shape mismatch");
    IntensityWarpGrad g{Grid<double>(image.rows(), image.cols(), 0.0), DisplacementField(image.rows(), image.cols())};
    for (int y = 0; y < image.rows(); ++y) {
        for (int x = 0; x < image.cols(); ++x) {
            const double go = grad_output(y, x);
            if (go == 0.0) continue;
            const Taps t = taps_at(field, y, x);
            double dy = 0.0, dx = 0.0;
            for (int k = 0; k < 4; ++k) {
                const double v = image[t.idx[k]];
                g.image[t.idx[k]] += go * t.w[k];
                dy += t.dwdy[k] * v;
                dx += t.dwdx[k] * v;
            }
            g.field.dy()(y, x) = go * dy;
            g.field.dx()(y, x) = go * dx;
        }
    }
    return g;
}

LabelMask warp_mask(const LabelMask& mask, const DisplacementField& field) {
    require_same_shape(mask.rows(), mask.cols(), field, "warp_mask");
    mask.validate();
    LabelMask out(mask.rows(), mask.cols(), 0, mask.spacing());
    for (int y = 0; y < mask.rows(); ++y) {
        for (int x = 0; x < mask.cols(); ++x) {
            const Taps t = taps_at(field, y, x);
            double score[kNumLabels] = {0.0, 0.0, 0.0};
            for (int k = 0; k < 4; ++k) score[mask[t.idx[k]]] += t.w[k];
            int best = 0;
            for (int c = 1; c < kNumLabels; ++c) {
                if (score[c] > score[best]) best = c;
            }
            out(y, x) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

ProbMaps soft_warp_probmaps(const ProbMaps& maps, const DisplacementField& field) {
    require_same_shape(maps.rows(), maps.cols(), field, "soft_warp_probmaps");
    const int K = maps.channels();
    ProbMaps out(K, maps.rows(), maps.cols());
    const std::size_t plane = maps.plane_size();
    const auto in = maps.values();
    auto dst = out.values();
    for (int y = 0; y < maps.rows(); ++y) {
        for (int x = 0; x < maps.cols(); ++x) {
            const Taps t = taps_at(field, y, x);
            const std::size_t p = static_cast<std::size_t>(y) * maps.cols() + x;
            double sum = 0.0;
            for (int c = 0; c < K; ++c) {
                const std::size_t base = c * plane;
                double v = 0.0;
                for (int k = 0; k < 4; ++k) v += t.w[k] * in[base + t.idx[k]];
                dst[base + p] = v;
                sum += v;
            }
            if (sum > 0.0) {
                for (int c = 0; c < K; ++c) dst[c * plane + p] /= sum;
            }
        }
    }
    return out;
}

ProbWarpGrad soft_warp_probmaps_backward(const ProbMaps& maps, const DisplacementField& field,
                                         const ProbMaps& grad_output) {
    require_same_shape(maps.rows(), maps.cols(), field, "soft_warp_probmaps_backward");
    require(grad_output.channels() == maps.channels() && grad_output.rows() == maps.rows() &&
                grad_output.cols() == maps.cols(),
            "soft_warp_probmaps_backward: gradient shape mismatch");
    const int K = maps.channels();
    const std::size_t plane = maps.plane_size();
    ProbWarpGrad g{ProbMaps(K, maps.rows(), maps.cols()), DisplacementField(maps.rows(), maps.cols())};
    const auto in = maps.values();
    const auto go = grad_output.values();
    auto gin = g.maps.values();
    std::vector<double> raw(K), graw(K);
    for (int y = 0; y < maps.rows(); ++y) {
        for (int x = 0; x < maps.cols(); ++x) {
            const Taps t = taps_at(field, y, x);
            const std::size_t p = static_cast<std::size_t>(y) * maps.cols() + x;
            double sum = 0.0;
            for (int c = 0; c < K; ++c) {
                double v = 0.0;
                for (int k = 0; k < 4; ++k) v += t.w[k] * in[c * plane + t.idx[k]];
                raw[c] = v;
                sum += v;
            }
            // Backprop through q_c = raw_c / sum.
            if (sum > 0.0) {
                double dot = 0.0;
                for (int c = 0; c < K; ++c) dot += go[c * plane + p] * raw[c];
                dot /= sum;
                for (int c = 0; c < K; ++c) graw[c] = (go[c * plane + p] - dot) / sum;
            } else {
                for (int c = 0; c < K; ++c) graw[c] = go[c * plane + p];
            }
            double dy = 0.0, dx = 0.0;
            for (int c = 0; c < K; ++c) {
                if (graw[c] == 0.0) continue;
                const std::size_t base = c * plane;
                for (int k = 0; k < 4; ++k) {
                    const double v = in[base + t.idx[k]];
                    gin[base + t.idx[k]] += graw[c] * t.w[k];
                    dy += graw[c] * t.dwdy[k] * v;
                    dx += graw[c] * t.dwdx[k] * v;
                }
            }
            g.field.dy()(y, x) = dy;
            g.field.dx()(y, x) = dx;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Normalisation and encoding

Image2D normalize(const Image2D& image) {
    Image2D out(image.rows(), image.cols(), 0.0, image.spacing());
    const double lo = image.min();
    const double hi = image.max();
    if (!(hi > lo)) return out;
    const double scale = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = std::clamp((image[i] - lo) * scale, 0.0, 1.0);
    return out;
}

ProbMaps one_hot(const LabelMask& mask, int num_classes) {
    require(num_classes > 0, "one_hot: class count must be positive");
    ProbMaps out(num_classes, mask.rows(), mask.cols(), 0.0);
    const std::size_t plane = out.plane_size();
    auto dst = out.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const int label = mask[i];
        if (label >= num_classes) {
            throw ContractError("one_hot: label " + std::to_string(label) + " >= class count " +
                                std::to_string(num_classes));
        }
        dst[label * plane + i] = 1.0;
    }
    return out;
}

LabelMask argmax(const ProbMaps& maps, Spacing spacing) {
    require(maps.channels() <= 256, "argmax: too many channels for a label mask");
    LabelMask out(maps.rows(), maps.cols(), 0, spacing);
    const std::size_t plane = maps.plane_size();
    const auto v = maps.values();
    for (std::size_t i = 0; i < plane; ++i) {
        int best = 0;
        for (int c = 1; c < maps.channels(); ++c) {
            if (v[c * plane + i] > v[best * plane + i]) best = c;
        }
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Image2D flip_horizontal(const Image2D& image) {
    Image2D out(image.rows(), image.cols(), 0.0, image.spacing());
    for (int y = 0; y < image.rows(); ++y)
        for (int x = 0; x < image.cols(); ++x) out(y, x) = image(y, image.cols() - 1 - x);
    return out;
}

LabelMask flip_horizontal(const LabelMask& mask) {
    LabelMask out(mask.rows(), mask.cols(), 0, mask.spacing());
    for (int y = 0; y < mask.rows(); ++y)
        for (int x = 0; x < mask.cols(); ++x) out(y, x) = mask(y, mask.cols() - 1 - x);
    return out;
}

}  // namespace echoreg
