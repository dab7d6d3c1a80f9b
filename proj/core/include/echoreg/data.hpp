#pragma once

// Data sources: the synthetic cardiac phantom (with analytic ground-truth
// motion), CAMUS-style header+raw cases, and patient-disjoint splits.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "echoreg/imgcore.hpp"

namespace echoreg {

// ---------------------------------------------------------------------------
// MetaImage (.mhd + .raw)

struct MhdImage {
    int rows = 0;
    int cols = 0;
    Spacing spacing;
    std::vector<double> values;  // row-major, converted to double
};

/// Reads a 2D image, or a 3D one whose third dimension is 1. Supported
/// element types: MET_UCHAR, MET_USHORT, MET_SHORT, MET_FLOAT, MET_DOUBLE.
MhdImage read_mhd(const std::filesystem::path& header);

enum class MhdType { uchar, float32 };

/// Writes `name.mhd` plus `name.raw` next to it. uchar values are rounded
/// and must already lie in [0, 255].
void write_mhd(const std::filesystem::path& header, int rows, int cols, Spacing spacing,
               const std::vector<double>& values, MhdType type);

// ---------------------------------------------------------------------------
// Case records

struct Frame {
    Image2D image;
    LabelMask mask;
};

struct CaseRecord {
    std::string id;
    std::string view;  // "A2C", "A4C" or "phantom"
    std::vector<Frame> frames;
    int ed_index = 0;
    int es_index = 0;
    std::optional<double> edv_ml;
    std::optional<double> esv_ml;
    /// Ground truth per frame t: u with warp(frame_t, u) == frame_ED. Empty
    /// when unknown; otherwise one field per frame.
    std::vector<DisplacementField> gt_fields;

    const Frame& ed() const { return frames.at(ed_index); }
    const Frame& es() const { return frames.at(es_index); }
    /// Throws ContractError when frames disagree in shape or spacing.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Phantom

struct PhantomParams {
    int size = 128;              // square image side
    double lv_radius_x = 22.0;   // LV semi-axes at ED (px)
    double lv_radius_y = 32.0;
    double wall = 10.0;          // MYO thickness at ED (px)
    double center_y = 0.0;       // offset of the LV centre from the image centre (px)
    double center_x = 0.0;
    double amplitude = 0.3;      // fractional LV radius reduction at ES, in [0, 1)
    int frames = 10;             // frames per cycle; ES is frame frames/2
    double speckle = 0.25;       // multiplicative noise level
    double spacing_mm = 0.3;
    double long_axis_mm = 80.0;  // fixed ED long-axis length used for volume
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
};

/// Radial displacement scale b(t) = a * sin^2(pi t / T).
double phantom_contraction(const PhantomParams& p, int frame);

/// Maps a material point (frame-0 pixel coordinates) to its position in `frame`.
std::array<double, 2> phantom_forward_map(const PhantomParams& p, int frame, double y, double x);

CaseRecord generate_phantom(const PhantomParams& params, const std::string& id = "phantom");

/// Analytic EF of the phantom: 1 - (1 - b_ES)^2.
double phantom_true_ef(const PhantomParams& p);

/// Phantom parameters for case `index` of a randomised set.
PhantomParams phantom_variant(const PhantomParams& base, std::uint64_t seed, int index);

std::vector<CaseRecord> generate_phantom_set(const PhantomParams& base, int count, std::uint64_t seed);

/// Writes a case in the CAMUS layout (2CH ED/ES image + _gt mask, Info_2CH.cfg)
/// plus phantom.json and the ES ground-truth field as `<id>_ES_to_ED.ddf`.
void export_phantom_case(const CaseRecord& rec, const PhantomParams& params, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// CAMUS

struct CamusOptions {
    std::string view = "2CH";
    /// CAMUS masks carry label 3 (left atrium). By default it aborts the load;
    /// with this set it becomes background.
    bool drop_atrium = false;
};

/// Loads ED/ES images and masks of one patient directory. CAMUS labels
/// (1 LV, 2 MYO) are remapped to (2 LV, 1 MYO); images are normalised.
CaseRecord load_camus_case(const std::filesystem::path& dir, const CamusOptions& options = {});

/// Every sub-directory of `root` holding the requested view's Info file, sorted by name.
std::vector<std::filesystem::path> list_camus_cases(const std::filesystem::path& root,
                                                    const CamusOptions& options = {});

// ---------------------------------------------------------------------------
// Splits

struct Splits {
    std::vector<std::size_t> train, val, test;  // indices into the input list
};

/// Patient id of a case id: the text before the first '_'.
std::string patient_of(const std::string& case_id);

/// Seeded shuffle of patients, then n_val = round(r_val * n), n_test =
/// round(r_test * n), train gets the rest. Ratios are (train, val, test).
Splits make_splits(const std::vector<std::string>& case_ids, std::array<double, 3> ratios, std::uint64_t seed);

}  // namespace echoreg
