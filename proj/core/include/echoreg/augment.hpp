#pragma once

// Training-time image augmentation. Geometric transforms (horizontal flip)
// touch both image and mask; the blur family and CLAHE touch the image only.

#include <random>

#include "echoreg/imgcore.hpp"

namespace echoreg {

struct AugmentOptions {
    double probability = 0.3;  // per transform, independently
    bool flip = true;
    bool motion_blur = true;
    bool gaussian_blur = true;
    bool defocus = true;
    bool clahe = true;

    bool operator==(const AugmentOptions&) const = default;
};

/// Intensity transforms drawn for one image.
struct IntensityAugment {
    bool motion = false;
    int motion_length = 0;      // pixels, odd
    double motion_angle = 0.0;  // radians
    bool gaussian = false;
    double gaussian_sigma = 0.0;
    bool defocus = false;
    int defocus_radius = 0;
    bool clahe = false;
};

IntensityAugment sample_intensity_augment(const AugmentOptions& options, std::mt19937_64& rng);
Image2D apply_intensity_augment(const Image2D& image, const IntensityAugment& aug);

/// Independent random subset of transforms applied to one (image, mask).
std::pair<Image2D, LabelMask> augment_pair(const Image2D& image, const LabelMask& mask, std::mt19937_64& rng,
                                           const AugmentOptions& options = {});

/// Registration sample: the flip decision is shared so fixed and moving stay
/// in correspondence; intensity transforms are drawn per image.
struct AugmentedPair {
    Image2D fixed, moving;
    LabelMask fixed_mask, moving_mask;
};

AugmentedPair augment_registration_pair(const Image2D& fixed, const Image2D& moving, const LabelMask& fixed_mask,
                                        const LabelMask& moving_mask, std::mt19937_64& rng,
                                        const AugmentOptions& options = {});

// Individual filters. All pad by half-sample symmetric reflection, which
// keeps the image sum unchanged under any normalised symmetric kernel, and
// clamp the result to [0, 1].

Image2D convolve_reflect(const Image2D& image, const Grid<double>& kernel);
Image2D gaussian_blur(const Image2D& image, double sigma);
/// Line kernel of `length` pixels at `angle` radians.
Image2D motion_blur(const Image2D& image, int length, double angle);
/// Uniform disk kernel.
Image2D defocus_blur(const Image2D& image, int radius);
/// Contrast-limited adaptive histogram equalisation with bilinear blending
/// between tile mappings.
Image2D clahe(const Image2D& image, int tiles = 8, double clip_limit = 2.0, int bins = 256);

}  // namespace echoreg
