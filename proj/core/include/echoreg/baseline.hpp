#pragma once

// Non-learned control: pyramidal iterative Lucas-Kanade optical flow, and
// the binary field format used to exchange displacement fields with other
// tools.

#include <filesystem>

#include "echoreg/imgcore.hpp"

namespace echoreg {

struct PyramidConfig {
    int levels = 3;
    int iterations = 8;     // per level
    int window_radius = 7;  // box window of side 2r+1, truncated at the border
    double downscale = 2.0;
    double damping = 1e-4;  // Tikhonov term added to the structure tensor

    void validate() const;
};

/// Field u such that warp_intensity(moving, u) approximates fixed.
DisplacementField lucas_kanade_flow(const Image2D& fixed, const Image2D& moving, const PyramidConfig& config = {});

/// One Lucas-Kanade update at a single resolution: returns the per-pixel
/// solution of (sum g g^T + damping I) u' = sum g (g.u + fixed - warped)
/// over the window, where g is the central-difference gradient of the
/// moving image warped by the current field u.
DisplacementField lucas_kanade_step(const Image2D& fixed, const Image2D& moving, const DisplacementField& field,
                                    int window_radius, double damping);

// ---------------------------------------------------------------------------
// DDF1 field files: "DDF1", u32 rows, u32 cols, rows*cols*(dy, dx) float32,
// all little-endian, row-major.

void write_field(const std::filesystem::path& path, const DisplacementField& field);
/// Throws FormatError on bad magic, truncated payload or non-finite values.
DisplacementField read_field(const std::filesystem::path& path);
/// Alias kept for callers scoring fields produced by external tools.
inline DisplacementField import_external_field(const std::filesystem::path& path) { return read_field(path); }

}  // namespace echoreg
