#include "echoreg/losses.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace echoreg {

void LossWeights::validate() const {
    if (lambda_r < 0.0 || lambda_lac < 0.0 || lambda_gac < 0.0 || lambda_ddc < 0.0) {
        throw ContractError("loss weights must be non-negative");
    }
}

// ---------------------------------------------------------------------------
// Mutual information

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ParzenTable {
    RowMatrix member;  // N x B normalised memberships
    RowMatrix slope;   // N x B, d(log e_b)/dv = -(v - c_b) / sigma^2
};

ParzenTable parzen(const Grid<double>& image, int bins, bool with_slope) {
    const auto n = static_cast<Eigen::Index>(image.size());
    const double width = 1.0 / (bins - 1);
    const double inv_two_var = 1.0 / (2.0 * width * width);
    const double inv_var = 1.0 / (width * width);
    ParzenTable t;
    t.member.resize(n, bins);
    if (with_slope) t.slope.resize(n, bins);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double v = image[static_cast<std::size_t>(i)];
        // Shift exponents by the nearest centre so the normaliser cannot underflow.
        const double nearest = std::clamp(std::round(v * (bins - 1)), 0.0, bins - 1.0) * width;
        const double shift = (v - nearest) * (v - nearest) * inv_two_var;
        double sum = 0.0;
        for (int b = 0; b < bins; ++b) {
            const double d = v - b * width;
            const double e = std::exp(shift - d * d * inv_two_var);
            t.member(i, b) = e;
            sum += e;
            if (with_slope) t.slope(i, b) = -d * inv_var;
        }
        t.member.row(i) /= sum;
    }
    return t;
}

void check_mi_inputs(const Grid<double>& fixed, const Grid<double>& warped, int bins) {
    if (fixed.empty() || warped.empty()) throw ContractError("mutual_information: empty image");
    require(fixed.same_shape(warped), "mutual_information: image shapes differ");
    require(bins >= 2, "mutual_information: need at least two bins");
}

double mi_from_joint(const RowMatrix& joint, const Eigen::VectorXd& pa, const Eigen::VectorXd& pb) {
    double mi = 0.0;
    for (Eigen::Index a = 0; a < joint.rows(); ++a) {
        for (Eigen::Index b = 0; b < joint.cols(); ++b) {
            const double p = joint(a, b);
            if (p > 0.0) mi += p * std::log(p / (pa[a] * pb[b]));
        }
    }
    return mi;
}

}  // namespace

double mutual_information(const Grid<double>& fixed, const Grid<double>& warped, int bins) {
    check_mi_inputs(fixed, warped, bins);
    const ParzenTable f = parzen(fixed, bins, false);
    const ParzenTable w = parzen(warped, bins, false);
    const RowMatrix joint = f.member.transpose() * w.member / static_cast<double>(fixed.size());
    const Eigen::VectorXd pa = joint.rowwise().sum();
    const Eigen::VectorXd pb = joint.colwise().sum().transpose();
    return mi_from_joint(joint, pa, pb);
}

MutualInformationGrad mutual_information_grad(const Grid<double>& fixed, const Grid<double>& warped, int bins) {
    check_mi_inputs(fixed, warped, bins);
    const double n = static_cast<double>(fixed.size());
    const ParzenTable f = parzen(fixed, bins, true);
    const ParzenTable w = parzen(warped, bins, true);
    const RowMatrix joint = f.member.transpose() * w.member / n;
    const Eigen::VectorXd pa = joint.rowwise().sum();
    const Eigen::VectorXd pb = joint.colwise().sum().transpose();

    MutualInformationGrad out;
    out.value = mi_from_joint(joint, pa, pb);

    // dMI/dP_ab with the marginals expressed through P.
    RowMatrix g(bins, bins);
    for (int a = 0; a < bins; ++a) {
        for (int b = 0; b < bins; ++b) {
            const double p = joint(a, b);
            g(a, b) = p > 0.0 ? std::log(p) - std::log(pa[a]) - std::log(pb[b]) - 1.0 : 0.0;
        }
    }
    const RowMatrix d_member_f = w.member * g.transpose() / n;  // N x B
    const RowMatrix d_member_w = f.member * g / n;

    auto chain = [bins](const ParzenTable& t, const RowMatrix& d_member, Grid<double>& dst) {
        for (Eigen::Index i = 0; i < t.member.rows(); ++i) {
            double mean_slope = 0.0;
            for (int b = 0; b < bins; ++b) mean_slope += t.member(i, b) * t.slope(i, b);
            double acc = 0.0;
            for (int b = 0; b < bins; ++b) acc += d_member(i, b) * t.member(i, b) * (t.slope(i, b) - mean_slope);
            dst[static_cast<std::size_t>(i)] = acc;
        }
    };
    out.d_fixed = Grid<double>(fixed.rows(), fixed.cols(), 0.0);
    out.d_warped = Grid<double>(warped.rows(), warped.cols(), 0.0);
    chain(f, d_member_f, out.d_fixed);
    chain(w, d_member_w, out.d_warped);
    return out;
}

// ---------------------------------------------------------------------------
// Bending energy

namespace {

double bending_component(const Grid<double>& u, Grid<double>* grad, double scale) {
    const int rows = u.rows();
    const int cols = u.cols();
    double acc = 0.0;
    for (int y = 1; y < rows - 1; ++y) {
        for (int x = 1; x < cols - 1; ++x) {
            const double dxx = u(y, x + 1) - 2.0 * u(y, x) + u(y, x - 1);
            const double dyy = u(y + 1, x) - 2.0 * u(y, x) + u(y - 1, x);
            const double dxy = 0.25 * (u(y + 1, x + 1) - u(y + 1, x - 1) - u(y - 1, x + 1) + u(y - 1, x - 1));
            acc += dxx * dxx + dyy * dyy + 2.0 * dxy * dxy;
            if (grad) {
                Grid<double>& g = *grad;
                const double gxx = 2.0 * dxx * scale;
                const double gyy = 2.0 * dyy * scale;
                const double gxy = 4.0 * dxy * scale * 0.25;
                g(y, x + 1) += gxx;
                g(y, x - 1) += gxx;
                g(y, x) -= 2.0 * (gxx + gyy);
                g(y + 1, x) += gyy;
                g(y - 1, x) += gyy;
                g(y + 1, x + 1) += gxy;
                g(y + 1, x - 1) -= gxy;
                g(y - 1, x + 1) -= gxy;
                g(y - 1, x - 1) += gxy;
            }
        }
    }
    return acc;
}

double bending_scale(const DisplacementField& field) {
    if (field.rows() < 3 || field.cols() < 3) {
        throw ContractError("bending_energy: field must be at least 3x3");
    }
    return 1.0 / (2.0 * (field.rows() - 2) * (field.cols() - 2));
}

}  // namespace

double bending_energy(const DisplacementField& field) {
    const double scale = bending_scale(field);
    return scale * (bending_component(field.dy(), nullptr, scale) + bending_component(field.dx(), nullptr, scale));
}

BendingEnergyGrad bending_energy_grad(const DisplacementField& field) {
    const double scale = bending_scale(field);
    BendingEnergyGrad out{0.0, DisplacementField(field.rows(), field.cols())};
    out.value = scale * (bending_component(field.dy(), &out.d_field.dy(), scale) +
                         bending_component(field.dx(), &out.d_field.dx(), scale));
    return out;
}

// ---------------------------------------------------------------------------
// Anatomic constraints

namespace {

void check_probmaps_pair(const ProbMaps& a, const ProbMaps& b, const char* what) {
    if (a.channels() != b.channels()) {
        throw ContractError(std::string(what) + ": channel count mismatch (" + std::to_string(a.channels()) +
                            " vs " + std::to_string(b.channels()) + ")");
    }
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ContractError(std::string(what) + ": shape mismatch");
}

}  // namespace

ProbMaps foreground(const ProbMaps& full) {
    require(full.channels() == kNumLabels, "foreground: expected background/MYO/LV channels");
    return full.slice(1, 2);
}

double local_anatomic_similarity(const ProbMaps& fixed, const ProbMaps& warped) {
    check_probmaps_pair(fixed, warped, "local_anatomic_similarity");
    const int K = fixed.channels();
    double total = 0.0;
    for (int c = 0; c < K; ++c) {
        const auto f = fixed.channel(c);
        const auto w = warped.channel(c);
        double inter = 0.0, sum = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            inter += f[i] * w[i];
            sum += f[i] + w[i];
        }
        total += sum > 0.0 ? inter / sum : 0.5;
    }
    return 2.0 / K * total;
}

AnatomicSimilarityGrad local_anatomic_similarity_grad(const ProbMaps& fixed, const ProbMaps& warped) {
    check_probmaps_pair(fixed, warped, "local_anatomic_similarity");
    const int K = fixed.channels();
    AnatomicSimilarityGrad out{0.0, ProbMaps(K, fixed.rows(), fixed.cols()), ProbMaps(K, fixed.rows(), fixed.cols())};
    const double scale = 2.0 / K;
    double total = 0.0;
    for (int c = 0; c < K; ++c) {
        const auto f = fixed.channel(c);
        const auto w = warped.channel(c);
        double inter = 0.0, sum = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            inter += f[i] * w[i];
            sum += f[i] + w[i];
        }
        if (sum <= 0.0) {
            total += 0.5;
            continue;
        }
        total += inter / sum;
        auto gf = out.d_fixed.channel(c);
        auto gw = out.d_warped.channel(c);
        const double inv2 = scale / (sum * sum);
        for (std::size_t i = 0; i < f.size(); ++i) {
            gw[i] = (f[i] * sum - inter) * inv2;
            gf[i] = (w[i] * sum - inter) * inv2;
        }
    }
    out.value = scale * total;
    return out;
}

double global_anatomic_similarity(const LatentVector& fixed, const LatentVector& warped) {
    if (fixed.dim() != warped.dim()) throw ContractError("global_anatomic_similarity: latent dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < fixed.dim(); ++i) {
        const double d = fixed[i] - warped[i];
        acc += d * d;
    }
    return acc;
}

LatentDistanceGrad global_anatomic_similarity_grad(const LatentVector& fixed, const LatentVector& warped) {
    LatentDistanceGrad out{global_anatomic_similarity(fixed, warped), LatentVector(fixed.dim()),
                           LatentVector(fixed.dim())};
    for (std::size_t i = 0; i < fixed.dim(); ++i) {
        out.d_warped[i] = 2.0 * (warped[i] - fixed[i]);
        out.d_fixed[i] = -out.d_warped[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// VAE loss

double kl_divergence(const LatentVector& mu, const LatentVector& logvar) {
    require(mu.dim() == logvar.dim(), "kl_divergence: mu/logvar dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < mu.dim(); ++i) acc += 1.0 + logvar[i] - mu[i] * mu[i] - std::exp(logvar[i]);
    return -0.5 * acc;
}

namespace {

void check_vae_inputs(const ProbMaps& input, const ProbMaps& recon, const LatentVector& mu,
                      const LatentVector& logvar, const VaeLossOptions& opt) {
    check_probmaps_pair(input, recon, "vae_loss");
    require(mu.dim() == logvar.dim(), "vae_loss: mu/logvar dimension mismatch");
    if (opt.ssim_window < 1 || opt.ssim_window % 2 == 0 || opt.ssim_window > input.rows() ||
        opt.ssim_window > input.cols()) {
        throw ContractError("vae_loss: SSIM window must be odd and fit inside the mask");
    }
    require(opt.kl_weight >= 0.0, "vae_loss: kl_weight must be non-negative");
}

}  // namespace

VaeLossTerms vae_loss(const ProbMaps& input, const ProbMaps& recon, const LatentVector& mu,
                      const LatentVector& logvar, const VaeLossOptions& options) {
    check_vae_inputs(input, recon, mu, logvar, options);
    VaeLossTerms t;
    t.dice = local_anatomic_similarity(input, recon);
    for (int c = 0; c < input.channels(); ++c) {
        t.ssim += ssim(input.channel(c), recon.channel(c), input.rows(), input.cols(), options.ssim_window, options.c1,
                       options.c2);
    }
    t.ssim /= input.channels();
    t.kl = kl_divergence(mu, logvar);
    t.total = -t.dice - t.ssim + options.kl_weight * t.kl;
    return t;
}

VaeLossGrad vae_loss_grad(const ProbMaps& input, const ProbMaps& recon, const LatentVector& mu,
                          const LatentVector& logvar, const VaeLossOptions& options) {
    check_vae_inputs(input, recon, mu, logvar, options);
    VaeLossGrad out;
    const auto dice = local_anatomic_similarity_grad(input, recon);
    out.terms.dice = dice.value;
    out.d_recon = ProbMaps(input.channels(), input.rows(), input.cols());
    std::vector<double> g(input.plane_size());
    const double inv_k = 1.0 / input.channels();
    for (int c = 0; c < input.channels(); ++c) {
        std::fill(g.begin(), g.end(), 0.0);
        out.terms.ssim += ssim_grad(input.channel(c), recon.channel(c), input.rows(), input.cols(),
                                    options.ssim_window, options.c1, options.c2, g);
        auto dst = out.d_recon.channel(c);
        const auto gd = dice.d_warped.channel(c);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = -gd[i] - g[i] * inv_k;
    }
    out.terms.ssim *= inv_k;
    out.terms.kl = kl_divergence(mu, logvar);
    out.terms.total = -out.terms.dice - out.terms.ssim + options.kl_weight * out.terms.kl;
    out.d_mu = LatentVector(mu.dim());
    out.d_logvar = LatentVector(mu.dim());
    for (std::size_t i = 0; i < mu.dim(); ++i) {
        out.d_mu[i] = options.kl_weight * mu[i];
        out.d_logvar[i] = options.kl_weight * 0.5 * (std::exp(logvar[i]) - 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adversarial

AdversarialLosses adversarial_losses(double d_real, double d_fake) {
    auto clamp = [](double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); };
    auto inside = [](double p) { return p > kProbClamp && p < 1.0 - kProbClamp; };
    const double r = clamp(d_real);
    const double f = clamp(d_fake);
    AdversarialLosses out;
    out.d_loss = -(std::log(r) + std::log(1.0 - f));
    out.g_loss = -std::log(f);
    out.dd_dreal = inside(d_real) ? -1.0 / r : 0.0;
    out.dd_dfake = inside(d_fake) ? 1.0 / (1.0 - f) : 0.0;
    out.dg_dfake = inside(d_fake) ? -1.0 / f : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Combined objective

double total_objective(const LossTerms& t, const LossWeights& w) {
    w.validate();
    return -t.mi + w.lambda_r * t.bending + w.lambda_lac * (1.0 - t.dice) + w.lambda_gac * t.latent_l2 +
           w.lambda_ddc * t.g_loss;
}

LossTerms total_objective_partials(const LossWeights& w) {
    w.validate();
    return LossTerms{-1.0, w.lambda_r, -w.lambda_lac, w.lambda_gac, w.lambda_ddc};
}

}  // namespace echoreg
