#include "echoreg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace echoreg {

namespace {

// Half-sample symmetric reflection: ... b a | a b c ... c | c b ...
int reflect(int i, int n) {
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

Image2D clamp01(Image2D img) {
    for (auto& v : img.storage()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

}  // namespace

Image2D convolve_reflect(const Image2D& image, const Grid<double>& kernel) {
    require(kernel.rows() % 2 == 1 && kernel.cols() % 2 == 1, "convolve_reflect: kernel sides must be odd");
    const int ry = kernel.rows() / 2, rx = kernel.cols() / 2;
    Image2D out(image.rows(), image.cols(), 0.0, image.spacing());
    for (int y = 0; y < image.rows(); ++y) {
        for (int x = 0; x < image.cols(); ++x) {
            double acc = 0.0;
            for (int ky = -ry; ky <= ry; ++ky) {
                const int sy = reflect(y + ky, image.rows());
                for (int kx = -rx; kx <= rx; ++kx) {
                    const double w = kernel(ky + ry, kx + rx);
                    if (w != 0.0) acc += w * image(sy, reflect(x + kx, image.cols()));
                }
            }
            out(y, x) = acc;
        }
    }
    return clamp01(std::move(out));
}

Image2D gaussian_blur(const Image2D& image, double sigma) {
    require(sigma > 0.0, "gaussian_blur: sigma must be positive");
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;

    // Separable: rows then columns, unclamped in between.
    Image2D tmp(image.rows(), image.cols(), 0.0, image.spacing());
    for (int y = 0; y < image.rows(); ++y)
        for (int x = 0; x < image.cols(); ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * image(y, reflect(x + i, image.cols()));
            tmp(y, x) = acc;
        }
    Image2D out(image.rows(), image.cols(), 0.0, image.spacing());
    for (int y = 0; y < image.rows(); ++y)
        for (int x = 0; x < image.cols(); ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(reflect(y + i, image.rows()), x);
            out(y, x) = acc;
        }
    return clamp01(std::move(out));
}

Image2D motion_blur(const Image2D& image, int length, double angle) {
    require(length >= 1, "motion_blur: length must be positive");
    if (length == 1) return image;
    const int r = length / 2 + 1;
    Grid<double> k(2 * r + 1, 2 * r + 1, 0.0);
    // Splat evenly spaced points along the segment with bilinear weights.
    const int samples = 4 * length;
    const double half = 0.5 * (length - 1);
    for (int s = 0; s < samples; ++s) {
        const double t = -half + 2.0 * half * s / (samples - 1);
        const double py = r + t * std::sin(angle), px = r + t * std::cos(angle);
        const int y0 = static_cast<int>(std::floor(py)), x0 = static_cast<int>(std::floor(px));
        const double fy = py - y0, fx = px - x0;
        k(y0, x0) += (1 - fy) * (1 - fx);
        k(y0, x0 + 1) += (1 - fy) * fx;
        k(y0 + 1, x0) += fy * (1 - fx);
        k(y0 + 1, x0 + 1) += fy * fx;
    }
    double sum = 0.0;
    for (double v : k.storage()) sum += v;
    for (auto& v : k.storage()) v /= sum;
    return convolve_reflect(image, k);
}

Image2D defocus_blur(const Image2D& image, int radius) {
    require(radius >= 1, "defocus_blur: radius must be positive");
    Grid<double> k(2 * radius + 1, 2 * radius + 1, 0.0);
    double sum = 0.0;
    for (int y = -radius; y <= radius; ++y)
        for (int x = -radius; x <= radius; ++x)
            if (y * y + x * x <= radius * radius) sum += k(y + radius, x + radius) = 1.0;
    for (auto& v : k.storage()) v /= sum;
    return convolve_reflect(image, k);
}

Image2D clahe(const Image2D& image, int tiles, double clip_limit, int bins) {
    require(tiles >= 1 && bins >= 2 && clip_limit > 0.0, "clahe: invalid parameters");
    const int H = image.rows(), W = image.cols();
    const int ty = std::min(tiles, H), tx = std::min(tiles, W);
    auto bin_of = [bins](double v) { return std::clamp(static_cast<int>(v * bins), 0, bins - 1); };
    auto edge = [](int t, int n, int count) { return t * n / count; };

    // maps[t][b]: equalised output level of bin b in tile t.
    std::vector<std::vector<double>> maps(static_cast<std::size_t>(ty) * tx, std::vector<double>(bins));
    for (int j = 0; j < ty; ++j) {
        for (int i = 0; i < tx; ++i) {
            const int y0 = edge(j, H, ty), y1 = edge(j + 1, H, ty);
            const int x0 = edge(i, W, tx), x1 = edge(i + 1, W, tx);
            std::vector<double> hist(bins, 0.0);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) hist[bin_of(image(y, x))] += 1.0;
            const double area = static_cast<double>(y1 - y0) * (x1 - x0);
            const double limit = std::max(1.0, clip_limit * area / bins);
            double excess = 0.0;
            for (auto& h : hist) {
                if (h > limit) {
                    excess += h - limit;
                    h = limit;
                }
            }
            const double share = excess / bins;
            double cdf = 0.0;
            auto& map = maps[static_cast<std::size_t>(j) * tx + i];
            for (int b = 0; b < bins; ++b) {
                cdf += hist[b] + share;
                map[b] = std::clamp(cdf / area, 0.0, 1.0);
            }
        }
    }

    Image2D out(H, W, 0.0, image.spacing());
    const double th = static_cast<double>(H) / ty, tw = static_cast<double>(W) / tx;
    for (int y = 0; y < H; ++y) {
        const double gy = std::clamp((y + 0.5) / th - 0.5, 0.0, ty - 1.0);
        const int j0 = static_cast<int>(gy), j1 = std::min(j0 + 1, ty - 1);
        const double wy = gy - j0;
        for (int x = 0; x < W; ++x) {
            const double gx = std::clamp((x + 0.5) / tw - 0.5, 0.0, tx - 1.0);
            const int i0 = static_cast<int>(gx), i1 = std::min(i0 + 1, tx - 1);
            const double wx = gx - i0;
            const int b = bin_of(image(y, x));
            auto m = [&](int j, int i) { return maps[static_cast<std::size_t>(j) * tx + i][b]; };
            out(y, x) = (1 - wy) * ((1 - wx) * m(j0, i0) + wx * m(j0, i1)) + wy * ((1 - wx) * m(j1, i0) + wx * m(j1, i1));
        }
    }
    return clamp01(std::move(out));
}

IntensityAugment sample_intensity_augment(const AugmentOptions& o, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    IntensityAugment a;
    // Draw every variate regardless of toggles so the stream stays aligned.
    const double pm = u(rng), pg = u(rng), pd = u(rng), pc = u(rng);
    const double lm = u(rng), am = u(rng), sg = u(rng), rd = u(rng);
    a.motion = o.motion_blur && pm < o.probability;
    a.motion_length = 3 + 2 * static_cast<int>(lm * 3.0);  // 3, 5 or 7
    a.motion_angle = am * std::numbers::pi;
    a.gaussian = o.gaussian_blur && pg < o.probability;
    a.gaussian_sigma = 0.5 + sg;
    a.defocus = o.defocus && pd < o.probability;
    a.defocus_radius = 1 + static_cast<int>(rd * 2.0);
    a.clahe = o.clahe && pc < o.probability;
    return a;
}

Image2D apply_intensity_augment(const Image2D& image, const IntensityAugment& a) {
    Image2D out = image;
    if (a.motion) out = motion_blur(out, a.motion_length, a.motion_angle);
    if (a.gaussian) out = gaussian_blur(out, a.gaussian_sigma);
    if (a.defocus) out = defocus_blur(out, a.defocus_radius);
    if (a.clahe) out = clahe(out);
    return clamp01(std::move(out));
}

std::pair<Image2D, LabelMask> augment_pair(const Image2D& image, const LabelMask& mask, std::mt19937_64& rng,
                                           const AugmentOptions& options) {
    require(image.same_shape(mask), "augment_pair: image and mask shapes differ");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool flip = options.flip && u(rng) < options.probability;
    const IntensityAugment a = sample_intensity_augment(options, rng);
    Image2D img = apply_intensity_augment(image, a);
    if (!flip) return {std::move(img), mask};
    return {flip_horizontal(img), flip_horizontal(mask)};
}

AugmentedPair augment_registration_pair(const Image2D& fixed, const Image2D& moving, const LabelMask& fixed_mask,
                                        const LabelMask& moving_mask, std::mt19937_64& rng,
                                        const AugmentOptions& options) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool flip = options.flip && u(rng) < options.probability;
    const IntensityAugment af = sample_intensity_augment(options, rng);
    const IntensityAugment am = sample_intensity_augment(options, rng);
    AugmentedPair p{apply_intensity_augment(fixed, af), apply_intensity_augment(moving, am), fixed_mask,
                    moving_mask};
    if (flip) {
        p.fixed = flip_horizontal(p.fixed);
        p.moving = flip_horizontal(p.moving);
        p.fixed_mask = flip_horizontal(p.fixed_mask);
        p.moving_mask = flip_horizontal(p.moving_mask);
    }
    return p;
}

}  // namespace echoreg
