#include <doctest.h>

#include <set>

#include "echoreg/imgcore.hpp"
#include "oracles.hpp"

using namespace echoreg;

namespace {

std::set<int> value_set(const LabelMask& m) { return {m.storage().begin(), m.storage().end()}; }

// Keys cubic kernel, a = -0.75.
double keys(double t) {
    const double a = -0.75;
    t = std::abs(t);
    if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
    if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
    return 0;
}

// Direct 2D bicubic evaluation with replicated borders and half-pixel centres.
Image2D bicubic_oracle(const Image2D& src, int rows, int cols) {
    Image2D out(rows, cols);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            const double sy = (y + 0.5) * src.rows() / rows - 0.5;
            const double sx = (x + 0.5) * src.cols() / cols - 0.5;
            double acc = 0;
            for (int i = static_cast<int>(std::floor(sy)) - 1; i <= static_cast<int>(std::floor(sy)) + 2; ++i)
                for (int j = static_cast<int>(std::floor(sx)) - 1; j <= static_cast<int>(std::floor(sx)) + 2; ++j)
                    acc += keys(sy - i) * keys(sx - j) *
                           src(std::clamp(i, 0, src.rows() - 1), std::clamp(j, 0, src.cols() - 1));
            out(y, x) = std::clamp(acc, 0.0, 1.0);
        }
    return out;
}

// Random field whose sample positions stay away from bilinear kinks and the
// clamped border by more than `margin`.
DisplacementField smooth_region_field(int h, int w, std::mt19937_64& rng, double margin) {
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    DisplacementField f(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 2; ++c) {
                const int base = c == 0 ? y : x;
                const int len = c == 0 ? h : w;
                double d;
                for (;;) {
                    d = u(rng);
                    const double p = base + d;
                    const double frac = p - std::floor(p);
                    if (p > margin && p < len - 1 - margin && frac > margin && frac < 1 - margin) break;
                }
                (c == 0 ? f.dy() : f.dx())(y, x) = d;
            }
        }
    return f;
}

}  // namespace

TEST_CASE("zero field leaves images and masks unchanged") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 5; ++t) {
        const Image2D img = oracle::random_image(9, 11, rng);
        const LabelMask m = oracle::random_mask(9, 11, rng);
        const DisplacementField zero(9, 11);
        CHECK(warp_intensity(img, zero) == img);
        CHECK(warp_mask(m, zero) == m);
    }
}

TEST_CASE("constant image stays constant under any field") {
    std::mt19937_64 rng(2);
    const Image2D img(8, 8, 0.37);
    const Image2D w = warp_intensity(img, oracle::random_field(8, 8, 5.0, rng));
    for (double v : w.storage()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
}

TEST_CASE("unit horizontal shift of a ramp reads the next column, border clamped") {
    Image2D ramp(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) ramp(y, x) = 0.1 * (4 * y + x);
    DisplacementField u(4, 4);
    for (auto& v : u.dx().storage()) v = 1.0;
    const Image2D w = warp_intensity(ramp, u);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) CHECK(w(y, x) == doctest::Approx(ramp(y, std::min(x + 1, 3))));
}

TEST_CASE("warp_intensity matches a direct bilinear evaluation") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        const Image2D img = oracle::random_image(8, 10, rng);
        const DisplacementField u = oracle::random_field(8, 10, 3.0, rng);
        const Image2D a = warp_intensity(img, u), b = oracle::warp(img, u);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
}

TEST_CASE("integer mask shift equals nearest-neighbour index arithmetic") {
    LabelMask m(8, 8, 0);
    for (int y = 3; y <= 4; ++y)
        for (int x = 3; x <= 4; ++x) m(y, x) = Label::ventricle;
    DisplacementField u(8, 8);
    for (auto& v : u.dx().storage()) v = 2.0;
    const LabelMask w = warp_mask(m, u);
    CHECK(w == oracle::shift_nearest(m, 0, 2));
    // Pull-back sampling: out(y, x) = in(y, x + 2), so the block sits two
    // columns toward x = 0.
    CHECK(w(3, 1) == Label::ventricle);
    CHECK(w(4, 2) == Label::ventricle);
    CHECK(w.count(Label::ventricle) == 4);

    std::mt19937_64 rng(4);
    for (int t = 0; t < 10; ++t) {
        const LabelMask r = oracle::random_mask(10, 9, rng);
        const int dy = static_cast<int>(rng() % 7) - 3, dx = static_cast<int>(rng() % 7) - 3;
        DisplacementField s(10, 9);
        for (auto& v : s.dy().storage()) v = dy;
        for (auto& v : s.dx().storage()) v = dx;
        CHECK(warp_mask(r, s) == oracle::shift_nearest(r, dy, dx));
    }
}

TEST_CASE("single-label mask is invariant under any field") {
    std::mt19937_64 rng(5);
    const LabelMask m(8, 8, Label::ventricle);
    const LabelMask w = warp_mask(m, oracle::random_field(8, 8, 4.0, rng));
    CHECK(w == m);
}

TEST_CASE("warped mask never invents labels") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 20; ++t) {
        LabelMask m = oracle::random_mask(8, 8, rng);
        if (t % 2) std::replace(m.storage().begin(), m.storage().end(), std::uint8_t{1}, std::uint8_t{0});
        const auto before = value_set(m);
        const auto after = value_set(warp_mask(m, oracle::random_field(8, 8, 2.5, rng)));
        for (int v : after) CHECK(before.count(v) == 1);
    }
}

TEST_CASE("soft warp: identity, uniform maps, agreement with warp_mask on integer shifts") {
    std::mt19937_64 rng(7);
    const ProbMaps p = oracle::random_probmaps(3, 8, 8, rng);
    const ProbMaps id = soft_warp_probmaps(p, DisplacementField(8, 8));
    for (std::size_t i = 0; i < p.values().size(); ++i) CHECK(id.values()[i] == doctest::Approx(p.values()[i]));

    const ProbMaps uni(3, 8, 8, 1.0 / 3.0);
    const ProbMaps uw = soft_warp_probmaps(uni, oracle::random_field(8, 8, 3.0, rng));
    for (double v : uw.values()) CHECK(v == doctest::Approx(1.0 / 3.0));

    for (int t = 0; t < 10; ++t) {
        const LabelMask m = oracle::random_mask(8, 8, rng);
        DisplacementField s(8, 8);
        const int dy = static_cast<int>(rng() % 5) - 2, dx = static_cast<int>(rng() % 5) - 2;
        for (auto& v : s.dy().storage()) v = dy;
        for (auto& v : s.dx().storage()) v = dx;
        CHECK(argmax(soft_warp_probmaps(one_hot(m, 3), s)) == warp_mask(m, s));
    }
}

TEST_CASE("soft warp output is a partition of unity") {
    std::mt19937_64 rng(8);
    const ProbMaps p = oracle::random_probmaps(3, 8, 8, rng);
    const ProbMaps w = soft_warp_probmaps(p, oracle::random_field(8, 8, 3.0, rng));
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int c = 0; c < 3; ++c) {
                CHECK(w(c, y, x) >= 0.0);
                CHECK(w(c, y, x) <= 1.0);
                s += w(c, y, x);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }
}

TEST_CASE("warp_intensity is linear in the image") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 10; ++t) {
        const Image2D a = oracle::random_image(8, 8, rng), b = oracle::random_image(8, 8, rng);
        const DisplacementField u = oracle::random_field(8, 8, 3.0, rng);
        const double ca = 0.7, cb = -1.3;
        Image2D mix(8, 8);
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = ca * a[i] + cb * b[i];
        const Image2D wm = warp_intensity(mix, u), wa = warp_intensity(a, u), wb = warp_intensity(b, u);
        for (std::size_t i = 0; i < mix.size(); ++i) CHECK(std::abs(wm[i] - (ca * wa[i] + cb * wb[i])) < 1e-6);
    }
}

TEST_CASE("warp_intensity field gradient matches central differences") {
    std::mt19937_64 rng(10);
    for (int t = 0; t < 20; ++t) {
        const Image2D img = oracle::random_image(8, 8, rng);
        const DisplacementField u = smooth_region_field(8, 8, rng, 0.01);
        Grid<double> g(8, 8);
        for (auto& v : g.storage()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
        auto loss = [&](const std::vector<double>& p) {
            DisplacementField f(8, 8);
            std::copy(p.begin(), p.begin() + 64, f.dy().storage().begin());
            std::copy(p.begin() + 64, p.end(), f.dx().storage().begin());
            const Image2D w = warp_intensity(img, f);
            double s = 0;
            for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * g[i];
            return s;
        };
        std::vector<double> p(u.dy().storage());
        p.insert(p.end(), u.dx().storage().begin(), u.dx().storage().end());
        const auto num = oracle::numeric_gradient(loss, p, 1e-3);
        const auto grad = warp_intensity_backward(img, u, g);
        std::vector<double> ana(grad.field.dy().storage());
        ana.insert(ana.end(), grad.field.dx().storage().begin(), grad.field.dx().storage().end());
        CHECK(oracle::relative_error(ana, num) < 1e-3);

        // The image gradient is the exact adjoint of the linear warp.
        const Image2D probe = oracle::random_image(8, 8, rng);
        const Image2D wp = warp_intensity(probe, u);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < wp.size(); ++i) {
            lhs += wp[i] * g[i];
            rhs += probe[i] * grad.image[i];
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("soft warp field gradient matches central differences") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 10; ++t) {
        const ProbMaps p = oracle::random_probmaps(3, 8, 8, rng);
        const DisplacementField u = smooth_region_field(8, 8, rng, 0.01);
        ProbMaps g(3, 8, 8);
        for (auto& v : g.values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
        auto loss = [&](const std::vector<double>& q) {
            DisplacementField f(8, 8);
            std::copy(q.begin(), q.begin() + 64, f.dy().storage().begin());
            std::copy(q.begin() + 64, q.end(), f.dx().storage().begin());
            const ProbMaps w = soft_warp_probmaps(p, f);
            double s = 0;
            for (std::size_t i = 0; i < w.values().size(); ++i) s += w.values()[i] * g.values()[i];
            return s;
        };
        std::vector<double> q(u.dy().storage());
        q.insert(q.end(), u.dx().storage().begin(), u.dx().storage().end());
        const auto num = oracle::numeric_gradient(loss, q, 1e-4);
        const auto grad = soft_warp_probmaps_backward(p, u, g);
        std::vector<double> ana(grad.field.dy().storage());
        ana.insert(ana.end(), grad.field.dx().storage().begin(), grad.field.dx().storage().end());
        CHECK(oracle::relative_error(ana, num) < 1e-3);
    }
}

TEST_CASE("resize: same size, label preservation, bicubic oracle, ramp round trip") {
    std::mt19937_64 rng(12);
    const Image2D img = oracle::random_image(16, 12, rng);
    CHECK(resize(img, 16, 12) == img);

    const LabelMask m = oracle::random_mask(16, 12, rng);
    for (auto [h, w] : {std::pair{8, 8}, {32, 20}, {13, 9}}) {
        const auto vs = value_set(resize(m, h, w));
        for (int v : vs) CHECK(v <= 2);
    }

    for (auto [h, w] : {std::pair{8, 8}, {32, 24}, {11, 17}}) {
        const Image2D r = resize(img, h, w), o = bicubic_oracle(img, h, w);
        for (std::size_t i = 0; i < r.size(); ++i) CHECK(r[i] == doctest::Approx(o[i]).epsilon(1e-12));
    }

    Image2D ramp(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) ramp(y, x) = 0.2 + 0.6 * (0.5 * y + 0.5 * x) / 31.0;
    const Image2D back = resize(resize(ramp, 16, 16), 32, 32);
    double worst = 0;
    for (std::size_t i = 0; i < ramp.size(); ++i) worst = std::max(worst, std::abs(back[i] - ramp[i]));
    CHECK(worst < 0.02);
}

TEST_CASE("resize rescales spacing and rejects degenerate targets") {
    const Image2D img(32, 16, 0.5, Spacing{0.2, 0.4});
    const Image2D r = resize(img, 64, 8);
    CHECK(r.spacing().y == doctest::Approx(0.1));
    CHECK(r.spacing().x == doctest::Approx(0.8));
    CHECK_THROWS_AS(resize(img, 4, 16), ContractError);
    CHECK_THROWS_AS(resize(LabelMask(16, 16), 16, 7), ContractError);
}

TEST_CASE("normalize maps to the unit interval") {
    Image2D a(8, 8);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<double>(i * 4 % 256);
    const Image2D n = normalize(a);
    CHECK(n.min() == 0.0);
    CHECK(n.max() == 1.0);

    const Image2D c = normalize(Image2D(8, 8, 3.5));
    for (double v : c.storage()) CHECK(v == 0.0);

    const Image2D t = normalize(Image2D(1, 3, std::vector<double>{2, 4, 6}));
    CHECK(t[0] == 0.0);
    CHECK(t[1] == doctest::Approx(0.5));
    CHECK(t[2] == 1.0);
}

TEST_CASE("one_hot encodes counts and round-trips through argmax") {
    const ProbMaps bg = one_hot(LabelMask(8, 8, 0), 3);
    for (double v : bg.channel(0)) CHECK(v == 1.0);
    for (double v : bg.channel(1)) CHECK(v == 0.0);

    std::mt19937_64 rng(13);
    for (int t = 0; t < 10; ++t) {
        const LabelMask m = oracle::random_mask(9, 8, rng);
        const ProbMaps p = one_hot(m, 3);
        CHECK(argmax(p) == m);
        for (int c = 0; c < 3; ++c) {
            double s = 0;
            for (double v : p.channel(c)) s += v;
            CHECK(s == static_cast<double>(m.count(static_cast<std::uint8_t>(c))));
        }
    }
    LabelMask bad(8, 8, 0);
    bad(2, 2) = 3;
    CHECK_THROWS_AS(one_hot(bad, 3), ContractError);
}

TEST_CASE("argmax ties resolve to the lowest label") {
    ProbMaps p(3, 8, 8, 0.0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) p(1, y, x) = p(2, y, x) = 0.5;
    const LabelMask m = argmax(p);
    CHECK(m.count(Label::myocardium) == 64);
}

TEST_CASE("shape mismatches are contract violations") {
    const Image2D img(8, 8);
    CHECK_THROWS_AS(warp_intensity(img, DisplacementField(8, 9)), ContractError);
    CHECK_THROWS_AS(warp_mask(LabelMask(9, 8), DisplacementField(8, 8)), ContractError);
    CHECK_THROWS_AS(soft_warp_probmaps(ProbMaps(3, 8, 8), DisplacementField(8, 7)), ContractError);
}

TEST_CASE("flip is an involution") {
    std::mt19937_64 rng(14);
    const Image2D img = oracle::random_image(8, 9, rng);
    const LabelMask m = oracle::random_mask(8, 9, rng);
    CHECK(flip_horizontal(flip_horizontal(img)) == img);
    CHECK(flip_horizontal(flip_horizontal(m)) == m);
    CHECK(flip_horizontal(img)(2, 0) == img(2, 8));
}
