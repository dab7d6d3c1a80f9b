#include <doctest.h>

#include "echoreg/losses.hpp"
#include "oracles.hpp"

using namespace echoreg;

namespace {

// Uniform-window SSIM averaged over every fully contained window.
double ssim_oracle(std::span<const double> a, std::span<const double> b, int rows, int cols, int win, double c1,
                   double c2) {
    double total = 0;
    int n = 0;
    for (int py = 0; py + win <= rows; ++py)
        for (int px = 0; px + win <= cols; ++px) {
            double ma = 0, mb = 0;
            for (int y = py; y < py + win; ++y)
                for (int x = px; x < px + win; ++x) {
                    ma += a[y * cols + x];
                    mb += b[y * cols + x];
                }
            ma /= win * win;
            mb /= win * win;
            double va = 0, vb = 0, cab = 0;
            for (int y = py; y < py + win; ++y)
                for (int x = px; x < px + win; ++x) {
                    const double da = a[y * cols + x] - ma, db = b[y * cols + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cab += da * db;
                }
            va /= win * win;
            vb /= win * win;
            cab /= win * win;
            total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++n;
        }
    return total / n;
}

std::vector<double> flat(const Grid<double>& g) { return g.storage(); }

std::vector<double> flat(const DisplacementField& f) {
    std::vector<double> v(f.dy().storage());
    v.insert(v.end(), f.dx().storage().begin(), f.dx().storage().end());
    return v;
}

std::vector<double> flat(const ProbMaps& p) { return {p.values().begin(), p.values().end()}; }

Grid<double> to_grid(const std::vector<double>& v, int h, int w) {
    Grid<double> g(h, w);
    std::copy(v.begin(), v.end(), g.storage().begin());
    return g;
}

ProbMaps to_maps(const std::vector<double>& v, int k, int h, int w) {
    ProbMaps p(k, h, w);
    std::copy(v.begin(), v.end(), p.values().begin());
    return p;
}

// Positive maps that are not normalised across channels; the soft Dice is
// defined for any non-negative input.
ProbMaps random_positive(int k, int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 0.95);
    ProbMaps p(k, h, w);
    for (auto& v : p.values()) v = u(rng);
    return p;
}

}  // namespace

TEST_CASE("mutual information of constant images is zero") {
    const Grid<double> c(16, 16, 0.4);
    CHECK(std::abs(mutual_information(c, c)) < 1e-9);
}

TEST_CASE("mutual information of a binary image with itself is near ln 2") {
    Grid<double> half(16, 16, 0.0);
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x) half(y, x) = 1.0;
    const double hard = oracle::hard_mi(half, half, 32);
    CHECK(hard == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(std::abs(mutual_information(half, half) - hard) < 0.05);
}

TEST_CASE("mutual information matches a Parzen histogram oracle") {
    std::mt19937_64 rng(14);
    for (int t = 0; t < 5; ++t) {
        const auto a = oracle::random_image(10, 9, rng);
        Image2D b = a;
        if (t % 2) b = oracle::random_image(10, 9, rng);
        for (int bins : {8, 32})
            CHECK(mutual_information(a, b, bins) == doctest::Approx(oracle::parzen_mi(a, b, bins)).epsilon(1e-10));
    }
}

TEST_CASE("independent noise: smoothing removes most of the small-sample MI bias") {
    // With 256 samples the smoothed estimate keeps a residual bias of about
    // 0.14 nats, against about 1.7 for a hard 32-bin histogram.
    double parzen = 0, hard = 0;
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const auto a = oracle::random_image(16, 16, rng), b = oracle::random_image(16, 16, rng);
        const double mi = mutual_information(a, b);
        CHECK(mi >= -1e-6);
        parzen += mi / 100;
        hard += oracle::hard_mi(a, b, 32) / 100;
    }
    CHECK(parzen < 0.1 * hard);
    CHECK(parzen < 0.15);
}

TEST_CASE("mutual information is symmetric and non-negative") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        const auto a = oracle::random_image(12, 10, rng);
        Image2D b = a;
        for (auto& v : b.storage()) v = std::clamp(v * v + 0.1 * (rng() % 3) / 3.0, 0.0, 1.0);
        CHECK(mutual_information(a, b) == doctest::Approx(mutual_information(b, a)).epsilon(1e-9));
        CHECK(mutual_information(a, b) >= -1e-6);
    }
}

TEST_CASE("mutual information gradients match finite differences") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) {
        const auto a = oracle::random_image(8, 8, rng), b = oracle::random_image(8, 8, rng);
        const auto g = mutual_information_grad(a, b);
        CHECK(g.value == doctest::Approx(mutual_information(a, b)).epsilon(1e-12));
        const auto nw = oracle::numeric_gradient(
            [&](const std::vector<double>& v) { return mutual_information(a, to_grid(v, 8, 8)); }, flat(b), 1e-5);
        const auto nf = oracle::numeric_gradient(
            [&](const std::vector<double>& v) { return mutual_information(to_grid(v, 8, 8), b); }, flat(a), 1e-5);
        CHECK(oracle::relative_error(flat(g.d_warped), nw) < 1e-3);
        CHECK(oracle::relative_error(flat(g.d_fixed), nf) < 1e-3);
    }
}

TEST_CASE("mutual information preconditions") {
    CHECK_THROWS_AS(mutual_information(Grid<double>(), Grid<double>()), ContractError);
    CHECK_THROWS_AS(mutual_information(Grid<double>(8, 8), Grid<double>(8, 9)), ContractError);
    CHECK_THROWS_AS(mutual_information(Grid<double>(8, 8), Grid<double>(8, 8), 1), ContractError);
}

TEST_CASE("bending energy: zero, affine, and the quadratic loop oracle") {
    CHECK(bending_energy(DisplacementField(8, 8)) == 0.0);

    DisplacementField aff(7, 9);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 9; ++x) {
            aff.dx()(y, x) = 0.3 + 1.2 * x - 0.7 * y;
            aff.dy()(y, x) = -2.0 + 0.4 * x + 0.9 * y;
        }
    CHECK(std::abs(bending_energy(aff)) < 1e-24);

    DisplacementField q(5, 5);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) q.dx()(y, x) = double(x) * x;
    CHECK(bending_energy(q) == doctest::Approx(oracle::bending(q)).epsilon(1e-14));
    // u_xx = 2 at all nine interior pixels of one component, zero elsewhere.
    CHECK(bending_energy(q) == doctest::Approx(4.0 * 9 / 18));

    std::mt19937_64 rng(3);
    for (int t = 0; t < 10; ++t) {
        const auto f = oracle::random_field(6 + t % 3, 7, 2.0, rng);
        CHECK(bending_energy(f) == doctest::Approx(oracle::bending(f)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(bending_energy(DisplacementField(2, 8)), ContractError);
}

TEST_CASE("bending energy ignores global translation") {
    std::mt19937_64 rng(4);
    const auto f = oracle::random_field(8, 8, 2.0, rng);
    DisplacementField g = f;
    for (auto& v : g.dy().storage()) v += 3.25;
    for (auto& v : g.dx().storage()) v -= 1.5;
    CHECK(bending_energy(g) == doctest::Approx(bending_energy(f)).epsilon(1e-12));
}

TEST_CASE("bending energy gradient matches finite differences") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 5; ++t) {
        const auto f = oracle::random_field(8, 8, 2.0, rng);
        const auto g = bending_energy_grad(f);
        CHECK(g.value == doctest::Approx(bending_energy(f)));
        const auto num = oracle::numeric_gradient(
            [](const std::vector<double>& v) {
                DisplacementField u(8, 8);
                std::copy(v.begin(), v.begin() + 64, u.dy().storage().begin());
                std::copy(v.begin() + 64, v.end(), u.dx().storage().begin());
                return bending_energy(u);
            },
            flat(f), 1e-5);
        CHECK(oracle::relative_error(flat(g.d_field), num) < 1e-3);
    }
}

TEST_CASE("local anatomic similarity examples") {
    LabelMask a(20, 20, 0);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) a(y, x) = Label::myocardium;
    for (int y = 10; y < 20; ++y)
        for (int x = 0; x < 10; ++x) a(y, x) = Label::ventricle;
    const ProbMaps fa = foreground(one_hot(a, 3));
    CHECK(local_anatomic_similarity(fa, fa) == 1.0);

    LabelMask d(20, 20, 0);
    for (int y = 0; y < 10; ++y)
        for (int x = 10; x < 20; ++x) d(y, x) = Label::myocardium;
    for (int y = 10; y < 20; ++y)
        for (int x = 10; x < 20; ++x) d(y, x) = Label::ventricle;
    CHECK(local_anatomic_similarity(fa, foreground(one_hot(d, 3))) == 0.0);

    // MYO moved by five columns (50 of 100 pixels overlap), LV unchanged.
    LabelMask b = a;
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 15; ++x) b(y, x) = x >= 5 ? Label::myocardium : Label::background;
    const double counted = 0.5 * (oracle::dice_count(a, b, 1) + oracle::dice_count(a, b, 2));
    CHECK(counted == doctest::Approx(0.75));
    CHECK(local_anatomic_similarity(fa, foreground(one_hot(b, 3))) == doctest::Approx(counted));
}

TEST_CASE("local anatomic similarity is bounded, matches the oracle, and has exact gradients") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 10; ++t) {
        const auto f = foreground(oracle::random_probmaps(3, 8, 8, rng));
        const auto w = foreground(oracle::random_probmaps(3, 8, 8, rng));
        const double v = local_anatomic_similarity(f, w);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == doctest::Approx(oracle::soft_dice(f, w)).epsilon(1e-12));

        const auto g = local_anatomic_similarity_grad(f, w);
        const auto nw = oracle::numeric_gradient(
            [&](const std::vector<double>& x) { return local_anatomic_similarity(f, to_maps(x, 2, 8, 8)); }, flat(w),
            1e-6);
        const auto nf = oracle::numeric_gradient(
            [&](const std::vector<double>& x) { return local_anatomic_similarity(to_maps(x, 2, 8, 8), w); }, flat(f),
            1e-6);
        CHECK(oracle::relative_error(flat(g.d_warped), nw) < 1e-3);
        CHECK(oracle::relative_error(flat(g.d_fixed), nf) < 1e-3);
    }
    CHECK_THROWS_AS(local_anatomic_similarity(ProbMaps(2, 8, 8), ProbMaps(3, 8, 8)), ContractError);
}

TEST_CASE("global anatomic similarity examples and gradient") {
    CHECK(global_anatomic_similarity(LatentVector(5, 0.3), LatentVector(5, 0.3)) == 0.0);
    LatentVector e1(4), m1(4);
    e1[0] = 1;
    m1[0] = -1;
    CHECK(global_anatomic_similarity(e1, m1) == 4.0);

    std::mt19937_64 rng(7);
    std::normal_distribution<double> n;
    LatentVector a(8), b(8);
    for (std::size_t i = 0; i < 8; ++i) {
        a[i] = n(rng);
        b[i] = n(rng);
    }
    double s = 0;
    for (std::size_t i = 0; i < 8; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(global_anatomic_similarity(a, b) == doctest::Approx(s).epsilon(1e-14));

    const auto g = global_anatomic_similarity_grad(a, b);
    const auto num = oracle::numeric_gradient(
        [&](const std::vector<double>& v) { return global_anatomic_similarity(a, LatentVector(v)); }, b.values,
        1e-6);
    CHECK(oracle::relative_error(g.d_warped.values, num) < 1e-6);
    CHECK_THROWS_AS(global_anatomic_similarity(LatentVector(3), LatentVector(4)), ContractError);
}

TEST_CASE("KL divergence closed form") {
    CHECK(kl_divergence(LatentVector(6), LatentVector(6)) == 0.0);
    LatentVector mu(4);
    mu[0] = 1.0;
    CHECK(kl_divergence(mu, LatentVector(4)) == doctest::Approx(0.5));

    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    LatentVector m(10), lv(10);
    for (std::size_t i = 0; i < 10; ++i) {
        m[i] = n(rng);
        lv[i] = 0.5 * n(rng);
    }
    CHECK(kl_divergence(m, lv) == doctest::Approx(oracle::kl(m.values, lv.values)).epsilon(1e-14));
    CHECK(kl_divergence(m, lv) >= 0.0);
}

TEST_CASE("SSIM matches a direct window oracle") {
    std::mt19937_64 rng(9);
    for (int win : {3, 5, 11}) {
        const auto a = oracle::random_image(13, 12, rng), b = oracle::random_image(13, 12, rng);
        CHECK(ssim(a.storage(), b.storage(), 13, 12, win, 1e-4, 9e-4) ==
              doctest::Approx(ssim_oracle(a.storage(), b.storage(), 13, 12, win, 1e-4, 9e-4)).epsilon(1e-10));
        CHECK(ssim(a.storage(), a.storage(), 13, 12, win, 1e-4, 9e-4) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("VAE loss examples") {
    LabelMask m(16, 16, 0);
    for (int y = 4; y < 12; ++y)
        for (int x = 4; x < 12; ++x) m(y, x) = (y < 6 || x < 6 || y > 9 || x > 9) ? 1 : 2;
    const ProbMaps in = foreground(one_hot(m, 3));

    const auto perfect = vae_loss(in, in, LatentVector(4), LatentVector(4));
    CHECK(perfect.dice == doctest::Approx(1.0));
    CHECK(perfect.ssim == doctest::Approx(1.0));
    CHECK(perfect.kl == 0.0);
    CHECK(perfect.total == doctest::Approx(-2.0));

    std::mt19937_64 rng(10);
    ProbMaps recon = random_positive(2, 16, 16, rng);
    LatentVector mu(4);
    mu[0] = 1.0;
    VaeLossOptions opt;
    opt.kl_weight = 0.3;
    opt.ssim_window = 5;
    const auto t = vae_loss(in, recon, mu, LatentVector(4), opt);
    CHECK(t.kl == doctest::Approx(0.5));
    double s = 0;
    for (int c = 0; c < 2; ++c) s += ssim_oracle(in.channel(c), recon.channel(c), 16, 16, 5, opt.c1, opt.c2);
    const double expected = -oracle::soft_dice(in, recon) - s / 2 + 0.3 * 0.5;
    CHECK(t.total == doctest::Approx(expected).epsilon(1e-12));

    opt.ssim_window = 4;
    CHECK_THROWS_AS(vae_loss(in, recon, mu, LatentVector(4), opt), ContractError);
    opt.ssim_window = 17;
    CHECK_THROWS_AS(vae_loss(in, recon, mu, LatentVector(4), opt), ContractError);
}

TEST_CASE("VAE loss gradients match finite differences") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n;
    VaeLossOptions opt;
    opt.ssim_window = 3;
    opt.kl_weight = 0.7;
    for (int t = 0; t < 3; ++t) {
        const ProbMaps in = foreground(one_hot(oracle::random_mask(8, 8, rng), 3));
        const ProbMaps recon = random_positive(2, 8, 8, rng);
        LatentVector mu(5), lv(5);
        for (std::size_t i = 0; i < 5; ++i) {
            mu[i] = n(rng);
            lv[i] = 0.3 * n(rng);
        }
        const auto g = vae_loss_grad(in, recon, mu, lv, opt);
        CHECK(g.terms.total == doctest::Approx(vae_loss(in, recon, mu, lv, opt).total).epsilon(1e-12));
        const auto nr = oracle::numeric_gradient(
            [&](const std::vector<double>& v) { return vae_loss(in, to_maps(v, 2, 8, 8), mu, lv, opt).total; },
            flat(recon), 1e-6);
        CHECK(oracle::relative_error(flat(g.d_recon), nr) < 1e-3);
        const auto nm = oracle::numeric_gradient(
            [&](const std::vector<double>& v) { return vae_loss(in, recon, LatentVector(v), lv, opt).total; },
            mu.values, 1e-6);
        CHECK(oracle::relative_error(g.d_mu.values, nm) < 1e-6);
        const auto nl = oracle::numeric_gradient(
            [&](const std::vector<double>& v) { return vae_loss(in, recon, mu, LatentVector(v), opt).total; },
            lv.values, 1e-6);
        CHECK(oracle::relative_error(g.d_logvar.values, nl) < 1e-6);
    }
}

TEST_CASE("adversarial losses") {
    const auto c = adversarial_losses(0.5, 0.5);
    CHECK(c.d_loss == doctest::Approx(2 * std::log(2.0)));
    CHECK(c.g_loss == doctest::Approx(std::log(2.0)));

    const auto p = adversarial_losses(1.0, 0.0);
    CHECK(p.d_loss < 1e-6);
    CHECK(std::isfinite(p.g_loss));
    CHECK(p.dd_dreal == 0.0);
    CHECK(p.dd_dfake == 0.0);
    CHECK(p.dg_dfake == 0.0);

    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int t = 0; t < 50; ++t) {
        const double r = u(rng), f = u(rng);
        const auto a = adversarial_losses(r, f);
        CHECK(a.d_loss == doctest::Approx(-(std::log(r) + std::log(1 - f))));
        CHECK(a.g_loss == doctest::Approx(-std::log(f)));
        const double h = 1e-7;
        CHECK(a.dd_dreal ==
              doctest::Approx((adversarial_losses(r + h, f).d_loss - adversarial_losses(r - h, f).d_loss) / (2 * h))
                  .epsilon(1e-5));
        CHECK(a.dd_dfake ==
              doctest::Approx((adversarial_losses(r, f + h).d_loss - adversarial_losses(r, f - h).d_loss) / (2 * h))
                  .epsilon(1e-5));
        CHECK(a.dg_dfake ==
              doctest::Approx((adversarial_losses(r, f + h).g_loss - adversarial_losses(r, f - h).g_loss) / (2 * h))
                  .epsilon(1e-5));
    }
}

TEST_CASE("total objective") {
    const LossTerms t{0.5, 0.1, 0.2, 3.0, 0.7};
    CHECK(total_objective(t, LossWeights{0, 0, 0, 0}) == -0.5);

    const LossWeights defaults{};
    CHECK(defaults == LossWeights{1.0, 2.0, 2.0, 0.001});
    const double expected = -0.5 + 1.0 * 0.1 + 2.0 * (1.0 - 0.2) + 2.0 * 3.0 + 0.001 * 0.7;
    CHECK(total_objective(t, defaults) == doctest::Approx(expected).epsilon(1e-15));

    LossWeights doubled = defaults;
    doubled.lambda_gac *= 2;
    CHECK(total_objective(t, doubled) > total_objective(t, defaults));

    const LossTerms partial = total_objective_partials(defaults);
    CHECK(partial.mi == -1.0);
    CHECK(partial.bending == 1.0);
    CHECK(partial.dice == -2.0);
    CHECK(partial.latent_l2 == 2.0);
    CHECK(partial.g_loss == 0.001);

    CHECK_THROWS_AS(total_objective(t, LossWeights{1, -1, 0, 0}), ContractError);
}

TEST_CASE("objective is monotone in each penalty") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int k = 0; k < 20; ++k) {
        const LossWeights w{u(rng) + 0.01, u(rng) + 0.01, u(rng) + 0.01, u(rng) + 0.01};
        LossTerms base{u(rng), u(rng), 0.5, u(rng), u(rng)};
        const double b = total_objective(base, w);
        LossTerms up = base;
        up.bending += 0.1;
        CHECK(total_objective(up, w) > b);
        up = base;
        up.latent_l2 += 0.1;
        CHECK(total_objective(up, w) > b);
        up = base;
        up.g_loss += 0.1;
        CHECK(total_objective(up, w) > b);
        up = base;
        up.dice += 0.1;
        CHECK(total_objective(up, w) < b);
        up = base;
        up.mi += 0.1;
        CHECK(total_objective(up, w) < b);
    }
}
