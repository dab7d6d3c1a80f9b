#include "echoreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>

namespace echoreg {

double mse(const Image2D& fixed, const Image2D& warped) {
    require(fixed.same_shape(warped), "mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < fixed.size(); ++i) {
        const double d = fixed[i] - warped[i];
        acc += d * d;
    }
    return acc / static_cast<double>(fixed.size());
}

double dsc(const LabelMask& a, const LabelMask& b, int label) {
    require(a.same_shape(b), "dsc: shape mismatch");
    if (label < 0 || label >= kNumLabels) throw ContractError("dsc: unknown class " + std::to_string(label));
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool ia = a[i] == label, ib = b[i] == label;
        na += ia;
        nb += ib;
        both += ia && ib;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

DiceReport dsc(const LabelMask& a, const LabelMask& b) {
    DiceReport r;
    for (int c = 0; c < kNumLabels; ++c) r.per_class[c] = dsc(a, b, c);
    r.mean = (r.per_class[0] + r.per_class[1] + r.per_class[2]) / 3.0;
    return r;
}

std::vector<std::array<int, 2>> boundary_pixels(const LabelMask& m, int label) {
    std::vector<std::array<int, 2>> out;
    const int H = m.rows(), W = m.cols();
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (m(y, x) != label) continue;
            const bool edge = (y > 0 && m(y - 1, x) != label) || (y + 1 < H && m(y + 1, x) != label) ||
                              (x > 0 && m(y, x - 1) != label) || (x + 1 < W && m(y, x + 1) != label);
            if (edge) out.push_back({y, x});
        }
    }
    return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas f(q) + w (p - q)^2 along one line.
void edt_1d(const double* f, double* d, int n, double w, std::vector<int>& v, std::vector<double>& z) {
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (k < 0) {
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            k = 0;
            continue;
        }
        auto meet = [&](int p) { return ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p)); };
        double s = meet(v[k]);
        while (k > 0 && s <= z[k]) {
            --k;
            s = meet(v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill(d, d + n, kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dq = q - v[j];
        d[q] = w * dq * dq + f[v[j]];
    }
}

// Exact squared Euclidean distance (in mm^2) from every pixel to the nearest
// seed pixel, with anisotropic spacing.
std::vector<double> squared_distance_map(int H, int W, const std::vector<std::array<int, 2>>& seeds, Spacing sp) {
    std::vector<double> g(static_cast<std::size_t>(H) * W, kInf);
    for (const auto& s : seeds) g[static_cast<std::size_t>(s[0]) * W + s[1]] = 0.0;
    const int n = std::max(H, W);
    std::vector<int> v(n);
    std::vector<double> z(n + 1), f(n), d(n);
    for (int x = 0; x < W; ++x) {
        for (int y = 0; y < H; ++y) f[y] = g[static_cast<std::size_t>(y) * W + x];
        edt_1d(f.data(), d.data(), H, sp.y * sp.y, v, z);
        for (int y = 0; y < H; ++y) g[static_cast<std::size_t>(y) * W + x] = d[y];
    }
    for (int y = 0; y < H; ++y) {
        double* row = g.data() + static_cast<std::size_t>(y) * W;
        std::copy(row, row + W, f.begin());
        edt_1d(f.data(), d.data(), W, sp.x * sp.x, v, z);
        std::copy(d.begin(), d.begin() + W, row);
    }
    return g;
}

struct Directed {
    double mean = 0.0;
    double max = 0.0;
};

Directed directed(const std::vector<std::array<int, 2>>& from, const std::vector<double>& to_map, int W) {
    Directed r;
    for (const auto& p : from) {
        const double d = std::sqrt(to_map[static_cast<std::size_t>(p[0]) * W + p[1]]);
        r.mean += d;
        r.max = std::max(r.max, d);
    }
    r.mean /= static_cast<double>(from.size());
    return r;
}

}  // namespace

double boundary_distance(const LabelMask& a, const LabelMask& b, int label, DistanceMode mode) {
    require(a.same_shape(b), "boundary_distance: shape mismatch");
    if (label < 0 || label >= kNumLabels) throw ContractError("boundary_distance: unknown class");
    if (a.count(static_cast<std::uint8_t>(label)) == 0 || b.count(static_cast<std::uint8_t>(label)) == 0) {
        throw UndefinedMetricError("boundary distance undefined: class " + std::to_string(label) +
                                   " is empty in at least one mask");
    }
    const auto ba = boundary_pixels(a, label);
    const auto bb = boundary_pixels(b, label);
    if (ba.empty() && bb.empty()) return 0.0;  // both regions cover the whole image
    if (ba.empty() || bb.empty()) {
        throw UndefinedMetricError("boundary distance undefined: class " + std::to_string(label) +
                                   " has no boundary in one mask");
    }
    const int H = a.rows(), W = a.cols();
    const auto da = squared_distance_map(H, W, ba, a.spacing());
    const auto db = squared_distance_map(H, W, bb, a.spacing());
    const Directed ab = directed(ba, db, W);
    const Directed ba_ = directed(bb, da, W);
    if (mode == DistanceMode::max) return std::max(ab.max, ba_.max);
    return 0.5 * (ab.mean + ba_.mean);
}

TUReport thickness_uniformity(const LabelMask& m, int n_lines) {
    require(n_lines >= 2, "thickness_uniformity: need at least two scan lines");
    int ymin = m.rows(), ymax = -1;
    for (int y = 0; y < m.rows(); ++y)
        for (int x = 0; x < m.cols(); ++x)
            if (m(y, x) == Label::myocardium) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
    if (ymax < 0) throw UndefinedMetricError("thickness uniformity undefined: mask has no myocardium");

    std::vector<int> rows;
    for (int i = 0; i < n_lines; ++i) {
        const int y = static_cast<int>(std::lround(ymin + static_cast<double>(i) * (ymax - ymin) / (n_lines - 1)));
        if (rows.empty() || rows.back() != y) rows.push_back(y);
    }

    TUReport r;
    const double sx = m.spacing().x;
    for (int y : rows) {
        std::vector<int> runs;
        int x = 0;
        while (x < m.cols()) {
            if (m(y, x) != Label::myocardium) {
                ++x;
                continue;
            }
            int len = 0;
            while (x < m.cols() && m(y, x) == Label::myocardium) {
                ++len;
                ++x;
            }
            runs.push_back(len);
        }
        if (runs.size() != 2) {
            ++r.lines_skipped;
            continue;
        }
        r.thickness_mm.push_back(0.5 * (runs[0] + runs[1]) * sx);
    }
    r.lines_used = static_cast<int>(r.thickness_mm.size());
    if (r.lines_used < 2) {
        throw UndefinedMetricError("thickness uniformity undefined: only " + std::to_string(r.lines_used) +
                                   " usable scan line(s)");
    }
    double s = 0.0, s2 = 0.0;
    for (double d : r.thickness_mm) {
        s += d;
        s2 += d * d;
    }
    const double n = static_cast<double>(r.lines_used);
    r.variance = std::max(0.0, s2 / n - (s / n) * (s / n));
    r.sqrt_mm = std::sqrt(r.variance);
    return r;
}

EfEstimate ef_estimate(double true_edv, double true_esv, double pxl_ed_true, double pxl_es_true, double pxl_ed_pred,
                       double pxl_es_pred) {
    require(pxl_ed_true > 0 && pxl_es_true > 0, "ef_estimate: true pixel counts must be positive");
    require(true_edv > 0 && true_esv > 0, "ef_estimate: true volumes must be positive");
    require(pxl_ed_pred >= 0 && pxl_es_pred >= 0, "ef_estimate: predicted pixel counts must be non-negative");
    EfEstimate e;
    e.edv = true_edv * (pxl_ed_pred / pxl_ed_true);
    e.esv = true_esv * (pxl_es_pred / pxl_es_true);
    if (e.edv <= 0.0) throw ContractError("ef_estimate: predicted EDV is zero");
    e.ef = 1.0 - e.esv / e.edv;
    e.negative = e.ef < 0.0;
    return e;
}

namespace {

std::mutex g_perceptual_mutex;
PerceptualMetric g_perceptual;

}  // namespace

void set_perceptual_metric(PerceptualMetric metric) {
    std::lock_guard lock(g_perceptual_mutex);
    g_perceptual = std::move(metric);
}

bool has_perceptual_metric() {
    std::lock_guard lock(g_perceptual_mutex);
    return static_cast<bool>(g_perceptual);
}

CaseMetrics evaluate_case(const Image2D& fixed, const LabelMask& fixed_mask, const Image2D& warped,
                          const LabelMask& warped_mask, const EvaluateOptions& options) {
    require(fixed.same_shape(fixed_mask) && fixed.same_shape(warped) && fixed.same_shape(warped_mask),
            "evaluate_case: shape mismatch");
    CaseMetrics m;
    m.mse = mse(fixed, warped);
    m.dsc = dsc(fixed_mask, warped_mask);
    bool all = true;
    double sum = 0.0;
    for (int c = 0; c < kNumLabels; ++c) {
        try {
            m.hd[c] = boundary_distance(fixed_mask, warped_mask, c, options.distance);
            sum += *m.hd[c];
        } catch (const UndefinedMetricError&) {
            all = false;
        }
    }
    if (all) m.hd_mean = sum / kNumLabels;
    try {
        m.tu = thickness_uniformity(warped_mask, options.tu_lines);
    } catch (const UndefinedMetricError&) {
    }
    PerceptualMetric metric;
    {
        std::lock_guard lock(g_perceptual_mutex);
        metric = g_perceptual;
    }
    if (metric) m.perceptual = metric(fixed, warped);
    return m;
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.count = values.size();
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw UndefinedMetricError("pearson: need two equal-length series");
    const double ma = summarize(a).mean, mb = summarize(b).mean;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw UndefinedMetricError("pearson: constant series");
    return sab / std::sqrt(saa * sbb);
}

std::string metrics_csv_header() {
    return "case_id,frame_pair,dsc_bg,dsc_myo,dsc_lv,dsc_mean,hd_bg_mm,hd_myo_mm,hd_lv_mm,tu_variance_mm2,"
           "tu_sqrt_mm,mse,perceptual,wall_lines_used";
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

std::string metrics_csv_row(const std::string& case_id, const std::string& frame_pair, const CaseMetrics& m) {
    std::ostringstream os;
    os << case_id << ',' << frame_pair;
    for (double d : m.dsc.per_class) os << ',' << fmt(d);
    os << ',' << fmt(m.dsc.mean);
    for (const auto& h : m.hd) os << ',' << fmt(h);
    os << ',' << (m.tu ? fmt(m.tu->variance) : "") << ',' << (m.tu ? fmt(m.tu->sqrt_mm) : "");
    os << ',' << fmt(m.mse) << ',' << fmt(m.perceptual) << ',' << (m.tu ? std::to_string(m.tu->lines_used) : "");
    return os.str();
}

}  // namespace echoreg
