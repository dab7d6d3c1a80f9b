#pragma once

// Differentiable loss terms of the registration objective and the shape VAE.
// Each term comes with a value-only entry point and a *_grad variant that
// returns the analytic gradient alongside the value.

#include <vector>

#include "echoreg/imgcore.hpp"

namespace echoreg {

/// Weights of the auxiliary objective terms.
struct LossWeights {
    double lambda_r = 1.0;
    double lambda_lac = 2.0;
    double lambda_gac = 2.0;
    double lambda_ddc = 0.001;

    /// Throws ContractError on any negative weight.
    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

/// Shape latent code (the VAE encoder mean at registration time).
struct LatentVector {
    std::vector<double> values;

    LatentVector() = default;
    explicit LatentVector(std::size_t dim, double fill = 0.0) : values(dim, fill) {}
    explicit LatentVector(std::vector<double> v) : values(std::move(v)) {}

    std::size_t dim() const noexcept { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    bool operator==(const LatentVector&) const = default;
};

// ---------------------------------------------------------------------------
// Mutual information (Parzen-window joint histogram)

inline constexpr int kDefaultMiBins = 32;

/// MI in nats between two [0,1] images. Each pixel contributes a normalised
/// Gaussian membership over `bins` centres spread uniformly on [0,1] with the
/// kernel width equal to the bin spacing. Marginals are the joint's row and
/// column sums, so the result is a KL divergence and never negative beyond
/// rounding.
double mutual_information(const Grid<double>& fixed, const Grid<double>& warped, int bins = kDefaultMiBins);

struct MutualInformationGrad {
    double value = 0.0;
    Grid<double> d_fixed;
    Grid<double> d_warped;
};

MutualInformationGrad mutual_information_grad(const Grid<double>& fixed, const Grid<double>& warped,
                                              int bins = kDefaultMiBins);

// ---------------------------------------------------------------------------
// Bending energy

/// Mean over interior pixels and both components of
/// u_yy^2 + u_xx^2 + 2 u_xy^2 using central second differences.
double bending_energy(const DisplacementField& field);

struct BendingEnergyGrad {
    double value = 0.0;
    DisplacementField d_field;
};

BendingEnergyGrad bending_energy_grad(const DisplacementField& field);

// ---------------------------------------------------------------------------
// Anatomic constraints

/// Soft Dice over the channels of two probability maps:
/// (2/K) * sum_c sum(pF*pW) / (sum pF + sum pW). In [0, 1]; a class absent
/// from both inputs counts as perfect agreement.
double local_anatomic_similarity(const ProbMaps& fixed, const ProbMaps& warped);

struct AnatomicSimilarityGrad {
    double value = 0.0;
    ProbMaps d_fixed;
    ProbMaps d_warped;
};

AnatomicSimilarityGrad local_anatomic_similarity_grad(const ProbMaps& fixed, const ProbMaps& warped);

/// Foreground channels (MYO, LV) of a three-channel one-hot or soft map.
ProbMaps foreground(const ProbMaps& full);

/// Squared Euclidean distance between latent codes.
double global_anatomic_similarity(const LatentVector& fixed, const LatentVector& warped);

struct LatentDistanceGrad {
    double value = 0.0;
    LatentVector d_fixed;
    LatentVector d_warped;
};

LatentDistanceGrad global_anatomic_similarity_grad(const LatentVector& fixed, const LatentVector& warped);

// ---------------------------------------------------------------------------
// VAE loss

struct VaeLossOptions {
    int ssim_window = 11;
    double c1 = 1e-4;
    double c2 = 9e-4;
    double kl_weight = 1.0;
};

struct VaeLossTerms {
    double total = 0.0;
    double dice = 0.0;  // soft Dice term, in [0, 1]
    double ssim = 0.0;  // mean windowed SSIM over channels
    double kl = 0.0;    // KL(q(z|x) || N(0, I))
};

/// total = -dice - ssim + kl_weight * kl; minimised during pretraining.
VaeLossTerms vae_loss(const ProbMaps& input, const ProbMaps& recon, const LatentVector& mu,
                      const LatentVector& logvar, const VaeLossOptions& options = {});

struct VaeLossGrad {
    VaeLossTerms terms;
    ProbMaps d_recon;
    LatentVector d_mu;
    LatentVector d_logvar;
};

VaeLossGrad vae_loss_grad(const ProbMaps& input, const ProbMaps& recon, const LatentVector& mu,
                          const LatentVector& logvar, const VaeLossOptions& options = {});

double kl_divergence(const LatentVector& mu, const LatentVector& logvar);

/// Mean SSIM over all fully contained window positions of one plane.
double ssim(std::span<const double> x, std::span<const double> y, int rows, int cols, int window, double c1,
            double c2);
/// Same value plus d(ssim)/d(y) written into grad_y.
double ssim_grad(std::span<const double> x, std::span<const double> y, int rows, int cols, int window, double c1,
                 double c2, std::span<double> grad_y);

// ---------------------------------------------------------------------------
// Adversarial terms

inline constexpr double kProbClamp = 1e-7;

struct AdversarialLosses {
    double g_loss = 0.0;  // -log D(fake), non-saturating
    double d_loss = 0.0;  // -[log D(real) + log(1 - D(fake))]
    double dd_dreal = 0.0;
    double dd_dfake = 0.0;
    double dg_dfake = 0.0;
};

/// Inputs are clamped to [1e-7, 1 - 1e-7]; derivatives vanish where clamped.
AdversarialLosses adversarial_losses(double d_real, double d_fake);

// ---------------------------------------------------------------------------
// Combined objective

struct LossTerms {
    double mi = 0.0;         // mutual information (similarity, maximised)
    double bending = 0.0;    // bending energy
    double dice = 0.0;       // local anatomic similarity (soft Dice)
    double latent_l2 = 0.0;  // global anatomic distance
    double g_loss = 0.0;     // generator adversarial loss
};

/// -mi + lr*bending + llac*(1 - dice) + lgac*latent_l2 + lddc*g_loss.
double total_objective(const LossTerms& terms, const LossWeights& weights);

/// Partial derivatives of total_objective with respect to each term.
LossTerms total_objective_partials(const LossWeights& weights);

}  // namespace echoreg
