#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "echoreg/baseline.hpp"
#include "echoreg/data.hpp"

namespace echoreg {

namespace {

constexpr double kLevelLv = 0.08;
constexpr double kLevelMyo = 0.75;
constexpr double kLevelBackground = 0.35;

struct Geometry {
    double cy, cx, ry, rx, wall;
    double beta;  // shape of the radial profile; large enough for a monotone map
};

Geometry geometry_of(const PhantomParams& p) {
    const double a = p.amplitude;
    return Geometry{0.5 * (p.size - 1) + p.center_y, 0.5 * (p.size - 1) + p.center_x, p.lv_radius_y, p.lv_radius_x,
                    p.wall, std::max(3.0, 2.0 * a / (1.0 - a))};
}

// Normalised LV radius of a point; 1 on the ED endocardial border.
double rho(const Geometry& g, double y, double x) {
    const double ny = (y - g.cy) / g.ry, nx = (x - g.cx) / g.rx;
    return std::sqrt(ny * ny + nx * nx);
}

// Radial scale factor applied to a material point at normalised radius r.
double radial_scale(const Geometry& g, double b, double r) {
    return 1.0 - b * (1.0 + g.beta) / (g.beta + r * r);
}

std::uint8_t tissue(const Geometry& g, double y, double x) {
    if (rho(g, y, x) < 1.0) return Label::ventricle;
    const double ny = (y - g.cy) / (g.ry + g.wall), nx = (x - g.cx) / (g.rx + g.wall);
    return ny * ny + nx * nx < 1.0 ? Label::myocardium : Label::background;
}

// Material point whose image under the frame map is (y, x).
std::array<double, 2> inverse_map(const Geometry& g, double b, double y, double x) {
    const double r_out = rho(g, y, x);
    if (b == 0.0 || r_out == 0.0) return {y, x};
    double lo = r_out;
    double hi = r_out / radial_scale(g, b, 0.0);
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid * radial_scale(g, b, mid) < r_out) lo = mid;
        else hi = mid;
    }
    const double f = 0.5 * (lo + hi) / r_out;
    return {g.cy + (y - g.cy) * f, g.cx + (x - g.cx) * f};
}

// Smoothed unit-variance Gaussian texture on a grid twice the image side, so
// material points pushed outside the image still find texture.
struct Speckle {
    int n = 0;
    double offset = 0.0;
    std::vector<double> v;

    Speckle(int size, std::uint64_t seed) : n(2 * size), offset(0.5 * size) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> raw(static_cast<std::size_t>(n) * n);
        for (auto& r : raw) r = normal(rng);
        const double k[3] = {0.25, 0.5, 0.25};
        std::vector<double> tmp(raw.size());
        v.assign(raw.size(), 0.0);
        auto at = [this](int i) { return std::clamp(i, 0, n - 1); };
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int d = -1; d <= 1; ++d) tmp[y * n + x] += k[d + 1] * raw[y * n + at(x + d)];
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int d = -1; d <= 1; ++d) v[y * n + x] += k[d + 1] * tmp[at(y + d) * n + x];
        double s2 = 0.0;
        for (double e : v) s2 += e * e;
        const double inv = 1.0 / std::sqrt(s2 / v.size());
        for (auto& e : v) e *= inv;
    }

    double at(double y, double x) const {
        const double gy = std::clamp(y + offset, 0.0, n - 1.0), gx = std::clamp(x + offset, 0.0, n - 1.0);
        const int y0 = std::min(static_cast<int>(gy), n - 2), x0 = std::min(static_cast<int>(gx), n - 2);
        const double fy = gy - y0, fx = gx - x0;
        auto p = [this](int yy, int xx) { return v[static_cast<std::size_t>(yy) * n + xx]; };
        return (1 - fy) * ((1 - fx) * p(y0, x0) + fx * p(y0, x0 + 1)) + fy * ((1 - fx) * p(y0 + 1, x0) + fx * p(y0 + 1, x0 + 1));
    }
};

}  // namespace

void PhantomParams::validate() const {
    if (size < kMinRasterSide) throw ConfigError("phantom size must be at least 8");
    if (wall < 2.0) throw ConfigError("phantom wall thickness must be at least 2 px");
    if (lv_radius_x <= 0.0 || lv_radius_y <= 0.0) throw ConfigError("phantom LV radii must be positive");
    if (amplitude < 0.0 || amplitude >= 1.0) throw ConfigError("phantom amplitude must lie in [0, 1)");
    if (frames < 2) throw ConfigError("phantom needs at least 2 frames");
    if (speckle < 0.0) throw ConfigError("phantom speckle level must be non-negative");
    if (spacing_mm <= 0.0 || long_axis_mm <= 0.0) throw ConfigError("phantom spacing and long axis must be positive");
    const Geometry g = geometry_of(*this);
    if (g.cy - g.ry - g.wall < 1.0 || g.cy + g.ry + g.wall > size - 2.0 || g.cx - g.rx - g.wall < 1.0 ||
        g.cx + g.rx + g.wall > size - 2.0) {
        throw ConfigError("phantom geometry exceeds the image bounds");
    }
}

std::string PhantomParams::to_json() const {
    return nlohmann::json{{"size", size},
                          {"lv_radius_x", lv_radius_x},
                          {"lv_radius_y", lv_radius_y},
                          {"wall", wall},
                          {"center_y", center_y},
                          {"center_x", center_x},
                          {"amplitude", amplitude},
                          {"frames", frames},
                          {"speckle", speckle},
                          {"spacing_mm", spacing_mm},
                          {"long_axis_mm", long_axis_mm},
                          {"seed", seed}}
        .dump();
}

double phantom_contraction(const PhantomParams& p, int frame) {
    const double s = std::sin(std::numbers::pi * frame / p.frames);
    return p.amplitude * s * s;
}

std::array<double, 2> phantom_forward_map(const PhantomParams& p, int frame, double y, double x) {
    const Geometry g = geometry_of(p);
    const double f = radial_scale(g, phantom_contraction(p, frame), rho(g, y, x));
    return {g.cy + (y - g.cy) * f, g.cx + (x - g.cx) * f};
}

double phantom_true_ef(const PhantomParams& p) {
    const double b = phantom_contraction(p, p.frames / 2);
    return 1.0 - (1.0 - b) * (1.0 - b);
}

CaseRecord generate_phantom(const PhantomParams& p, const std::string& id) {
    p.validate();
    const Geometry g = geometry_of(p);
    const Speckle speckle(p.size, p.seed);
    const Spacing sp{p.spacing_mm, p.spacing_mm};

    CaseRecord rec;
    rec.id = id;
    rec.view = "phantom";
    rec.ed_index = 0;
    rec.es_index = p.frames / 2;
    for (int t = 0; t < p.frames; ++t) {
        const double b = phantom_contraction(p, t);
        Frame fr{Image2D(p.size, p.size, 0.0, sp), LabelMask(p.size, p.size, 0, sp)};
        DisplacementField u(p.size, p.size);
        for (int y = 0; y < p.size; ++y) {
            for (int x = 0; x < p.size; ++x) {
                const auto X = inverse_map(g, b, y, x);
                const std::uint8_t label = tissue(g, X[0], X[1]);
                fr.mask(y, x) = label;
                const double level = label == Label::ventricle    ? kLevelLv
                                     : label == Label::myocardium ? kLevelMyo
                                                                  : kLevelBackground;
                fr.image(y, x) = std::clamp(level * (1.0 + p.speckle * speckle.at(X[0], X[1])), 0.0, 1.0);

                const double f = radial_scale(g, b, rho(g, y, x));
                u.dy()(y, x) = (g.cy + (y - g.cy) * f) - y;
                u.dx()(y, x) = (g.cx + (x - g.cx) * f) - x;
            }
        }
        rec.frames.push_back(std::move(fr));
        rec.gt_fields.push_back(std::move(u));
    }
    const double area_mm2 = std::numbers::pi * p.lv_radius_x * p.lv_radius_y * p.spacing_mm * p.spacing_mm;
    const double b_es = phantom_contraction(p, rec.es_index);
    rec.edv_ml = area_mm2 * p.long_axis_mm / 1000.0;
    rec.esv_ml = *rec.edv_ml * (1.0 - b_es) * (1.0 - b_es);
    return rec;
}

PhantomParams phantom_variant(const PhantomParams& base, std::uint64_t seed, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PhantomParams p = base;
    const double scale = base.size / 128.0;
    p.lv_radius_x = base.lv_radius_x * (0.85 + 0.3 * u(rng));
    p.lv_radius_y = base.lv_radius_y * (0.85 + 0.3 * u(rng));
    p.wall = std::max(2.0, base.wall * (0.8 + 0.4 * u(rng)));
    p.center_y = base.center_y + (u(rng) - 0.5) * 6.0 * scale;
    p.center_x = base.center_x + (u(rng) - 0.5) * 6.0 * scale;
    const double amp = u(rng);
    if (base.amplitude > 0.0) p.amplitude = std::min(0.95, base.amplitude * (0.67 + 0.66 * amp));
    p.seed = rng();
    return p;
}

std::vector<CaseRecord> generate_phantom_set(const PhantomParams& base, int count, std::uint64_t seed) {
    require(count >= 1, "generate_phantom_set: count must be positive");
    std::vector<CaseRecord> out;
    for (int i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "phantom%04d", i);
        out.push_back(generate_phantom(phantom_variant(base, seed, i), id));
    }
    return out;
}

void export_phantom_case(const CaseRecord& rec, const PhantomParams& params, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto write_frame = [&](const Frame& f, const std::string& phase) {
        std::vector<double> img(f.image.size()), mask(f.mask.size());
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::round(f.image[i] * 255.0);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            // CAMUS convention: 1 LV, 2 MYO.
            const auto l = f.mask[i];
            mask[i] = l == Label::ventricle ? 1.0 : l == Label::myocardium ? 2.0 : 0.0;
        }
        const std::string stem = rec.id + "_2CH_" + phase;
        write_mhd(dir / (stem + ".mhd"), f.image.rows(), f.image.cols(), f.image.spacing(), img, MhdType::uchar);
        write_mhd(dir / (stem + "_gt.mhd"), f.mask.rows(), f.mask.cols(), f.mask.spacing(), mask, MhdType::uchar);
    };
    write_frame(rec.ed(), "ED");
    write_frame(rec.es(), "ES");

    std::ofstream info(dir / "Info_2CH.cfg", std::ios::trunc);
    info.precision(10);
    info << "ED: " << rec.ed_index + 1 << '\n'
         << "ES: " << rec.es_index + 1 << '\n'
         << "NbFrame: " << rec.frames.size() << '\n'
         << "LVedv: " << rec.edv_ml.value_or(0.0) << '\n'
         << "LVesv: " << rec.esv_ml.value_or(0.0) << '\n'
         << "LVef: " << 100.0 * phantom_true_ef(params) << '\n';
    if (!info) throw IoError("failed writing Info_2CH.cfg in '" + dir.string() + "'");

    nlohmann::json side = nlohmann::json::parse(params.to_json());
    side["true_ef"] = phantom_true_ef(params);
    side["case_id"] = rec.id;
    std::ofstream js(dir / "phantom.json", std::ios::trunc);
    js << side.dump(2) << '\n';
    if (!js) throw IoError("failed writing phantom.json in '" + dir.string() + "'");

    if (!rec.gt_fields.empty()) write_field(dir / (rec.id + "_ES_to_ED.ddf"), rec.gt_fields.at(rec.es_index));
}

}  // namespace echoreg
