#include "echoreg/baseline.hpp"

#include <algorithm>
#include <cmath>

#include "echoreg/parallel.hpp"

namespace echoreg {

void PyramidConfig::validate() const {
    if (levels < 1) throw ConfigError("pyramid levels must be >= 1");
    if (iterations < 1) throw ConfigError("pyramid iterations must be >= 1");
    if (window_radius < 1) throw ConfigError("window radius must be >= 1");
    if (downscale <= 1.0) throw ConfigError("pyramid downscale must exceed 1");
    if (damping < 0.0) throw ConfigError("damping must be non-negative");
}

namespace {

// Summed-area table over a row-major plane.
class BoxSum {
public:
    BoxSum(const std::vector<double>& v, int H, int W) : W1_(W + 1), s_(static_cast<std::size_t>(H + 1) * (W + 1)) {
        for (int y = 0; y < H; ++y) {
            double row = 0.0;
            for (int x = 0; x < W; ++x) {
                row += v[static_cast<std::size_t>(y) * W + x];
                s_[(y + 1) * W1_ + x + 1] = s_[y * W1_ + x + 1] + row;
            }
        }
    }
    double sum(int y0, int x0, int y1, int x1) const {
        return s_[y1 * W1_ + x1] - s_[y0 * W1_ + x1] - s_[y1 * W1_ + x0] + s_[y0 * W1_ + x0];
    }

private:
    std::size_t W1_;
    std::vector<double> s_;
};

}  // namespace

DisplacementField lucas_kanade_step(const Image2D& fixed, const Image2D& moving, const DisplacementField& field,
                                    int window_radius, double damping) {
    require(fixed.same_shape(moving) && fixed.rows() == field.rows() && fixed.cols() == field.cols(),
            "lucas_kanade_step: shape mismatch");
    const int H = fixed.rows(), W = fixed.cols();
    const Image2D warped = warp_intensity(moving, field);
    const std::size_t n = fixed.size();
    std::vector<double> gyy(n), gxx(n), gxy(n), gyt(n), gxt(n);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double gy = 0.5 * (warped(std::min(y + 1, H - 1), x) - warped(std::max(y - 1, 0), x));
            const double gx = 0.5 * (warped(y, std::min(x + 1, W - 1)) - warped(y, std::max(x - 1, 0)));
            // Residual linearised around the current field, so each window
            // solves for the whole displacement rather than an increment.
            const double e = gy * field.dy()(y, x) + gx * field.dx()(y, x) + fixed(y, x) - warped(y, x);
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            gyy[i] = gy * gy;
            gxx[i] = gx * gx;
            gxy[i] = gx * gy;
            gyt[i] = gy * e;
            gxt[i] = gx * e;
        }
    }
    const BoxSum syy(gyy, H, W), sxx(gxx, H, W), sxy(gxy, H, W), syt(gyt, H, W), sxt(gxt, H, W);
    DisplacementField out(H, W);
    const int r = window_radius;
    parallel_for(static_cast<std::size_t>(H), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        const int y0 = std::max(0, y - r), y1 = std::min(H, y + r + 1);
        for (int x = 0; x < W; ++x) {
            const int x0 = std::max(0, x - r), x1 = std::min(W, x + r + 1);
            const double a = syy.sum(y0, x0, y1, x1) + damping;
            const double b = sxy.sum(y0, x0, y1, x1);
            const double d = sxx.sum(y0, x0, y1, x1) + damping;
            const double by = syt.sum(y0, x0, y1, x1);
            const double bx = sxt.sum(y0, x0, y1, x1);
            const double det = a * d - b * b;
            if (det <= 0.0) continue;
            out.dy()(y, x) = (d * by - b * bx) / det;
            out.dx()(y, x) = (a * bx - b * by) / det;
        }
    });
    return out;
}

DisplacementField lucas_kanade_flow(const Image2D& fixed, const Image2D& moving, const PyramidConfig& cfg) {
    cfg.validate();
    require(fixed.same_shape(moving), "lucas_kanade_flow: shape mismatch");
    const int side = 2 * cfg.window_radius + 1;
    if (fixed.rows() < side || fixed.cols() < side) {
        throw ContractError("lucas_kanade_flow: image " + std::to_string(fixed.rows()) + "x" +
                            std::to_string(fixed.cols()) + " is smaller than the " + std::to_string(side) +
                            "-pixel window");
    }

    // Build the pyramid, stopping before a level drops below the raster minimum.
    std::vector<std::pair<Image2D, Image2D>> pyramid{{fixed, moving}};
    for (int l = 1; l < cfg.levels; ++l) {
        const double f = std::pow(cfg.downscale, l);
        const int h = static_cast<int>(std::lround(fixed.rows() / f));
        const int w = static_cast<int>(std::lround(fixed.cols() / f));
        if (h < kMinRasterSide || w < kMinRasterSide) break;
        pyramid.emplace_back(resize(fixed, h, w), resize(moving, h, w));
    }

    DisplacementField u;
    for (auto level = pyramid.rbegin(); level != pyramid.rend(); ++level) {
        const Image2D& f = level->first;
        const Image2D& m = level->second;
        u = u.size() == 0 ? DisplacementField(f.rows(), f.cols()) : resize(u, f.rows(), f.cols());
        for (int it = 0; it < cfg.iterations; ++it) u = lucas_kanade_step(f, m, u, cfg.window_radius, cfg.damping);
    }
    return u;
}

}  // namespace echoreg
