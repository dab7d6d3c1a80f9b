#pragma once

// Evaluation metrics: intensity MSE, per-class Dice, boundary distance,
// myocardial thickness uniformity and ejection-fraction estimation.

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "echoreg/imgcore.hpp"

namespace echoreg {

double mse(const Image2D& fixed, const Image2D& warped);

struct DiceReport {
    std::array<double, kNumLabels> per_class{};  // background, MYO, LV
    double mean = 0.0;                           // unweighted mean over the three classes
    double foreground_mean() const { return 0.5 * (per_class[1] + per_class[2]); }
};

/// Hard Dice of one label. A label absent from both masks scores 1.
double dsc(const LabelMask& a, const LabelMask& b, int label);
DiceReport dsc(const LabelMask& a, const LabelMask& b);

enum class DistanceMode {
    mean,  // symmetric mean nearest-boundary distance (average surface distance)
    max,   // symmetric farthest nearest-boundary distance (classic Hausdorff)
};

/// Pixels of `label` with at least one in-image 4-neighbour of another label.
std::vector<std::array<int, 2>> boundary_pixels(const LabelMask& mask, int label);

/// Boundary distance in mm between the `label` regions of two masks, using
/// a's spacing. Throws UndefinedMetricError when either region is empty.
double boundary_distance(const LabelMask& a, const LabelMask& b, int label, DistanceMode mode = DistanceMode::mean);

struct TUReport {
    int lines_used = 0;
    int lines_skipped = 0;
    std::vector<double> thickness_mm;  // one per used line
    double variance = 0.0;             // mm^2
    double sqrt_mm = 0.0;              // square root of the variance
};

inline constexpr int kDefaultTuLines = 32;

/// Wall-thickness variance along horizontal scan lines over the MYO's
/// vertical extent. A line is used when it crosses the MYO in exactly two
/// runs; its thickness is the mean run length. Throws UndefinedMetricError
/// with fewer than two usable lines.
TUReport thickness_uniformity(const LabelMask& mask, int n_lines = kDefaultTuLines);

struct EfEstimate {
    double edv = 0.0;
    double esv = 0.0;
    double ef = 0.0;
    bool negative = false;  // ESV exceeds EDV
};

/// Volumes scaled by predicted/true LV pixel-count ratios.
EfEstimate ef_estimate(double true_edv, double true_esv, double pxl_ed_true, double pxl_es_true, double pxl_ed_pred,
                       double pxl_es_pred);

// ---------------------------------------------------------------------------
// Perceptual plug-in

using PerceptualMetric = std::function<double(const Image2D&, const Image2D&)>;

/// Registers the metric used by evaluate_case; an empty function clears it.
void set_perceptual_metric(PerceptualMetric metric);
bool has_perceptual_metric();

// ---------------------------------------------------------------------------
// Case evaluation

struct EvaluateOptions {
    DistanceMode distance = DistanceMode::mean;
    int tu_lines = kDefaultTuLines;
};

struct CaseMetrics {
    DiceReport dsc;
    std::array<std::optional<double>, kNumLabels> hd;  // mm; empty when undefined
    std::optional<double> hd_mean;                     // empty unless every class is defined
    std::optional<TUReport> tu;                        // of the warped mask
    double mse = 0.0;
    std::optional<double> perceptual;
};

CaseMetrics evaluate_case(const Image2D& fixed, const LabelMask& fixed_mask, const Image2D& warped,
                          const LabelMask& warped_mask, const EvaluateOptions& options = {});

struct Summary {
    double mean = 0.0;
    double std = 0.0;  // population
    std::size_t count = 0;
};

Summary summarize(const std::vector<double>& values);

/// Pearson correlation. Throws UndefinedMetricError when either series is
/// constant or the lengths differ.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Column names of the per-case CSV report.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& case_id, const std::string& frame_pair, const CaseMetrics& m);

}  // namespace echoreg
