#pragma once

// Training: shape-VAE pretraining, registration training in the five
// objective configurations, and the coarse-to-fine curriculum.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "echoreg/augment.hpp"
#include "echoreg/data.hpp"
#include "echoreg/losses.hpp"
#include "echoreg/metrics.hpp"
#include "echoreg/networks.hpp"
#include "echoreg/nn/optim.hpp"

namespace echoreg {

enum class RegistrationMode {
    van,     // MI + bending energy
    vm,      // + local Dice
    ac,      // + local Dice + latent L2
    ddc,     // MI + bending energy + adversarial
    ddc_ac,  // every term
};

const char* to_string(RegistrationMode mode);
/// Accepts van, vm, ac, ddc, ddc-ac. Throws ConfigError otherwise.
RegistrationMode parse_mode(const std::string& text);
/// Display name used in reports (VanDLIR, VoxelMorph-like, ...).
const char* mode_label(RegistrationMode mode);
/// Base weights with the terms the mode does not use set to zero.
LossWeights mode_weights(RegistrationMode mode, const LossWeights& base);
bool mode_needs_vae(RegistrationMode mode);

struct TrainConfig {
    RegistrationMode mode = RegistrationMode::ddc_ac;
    LossWeights weights;
    std::vector<int> scales{32, 64, 128};
    int epochs = 100;  // total, split equally across scales
    int batch_size = 8;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    bool augment = true;
    AugmentOptions augmentation;
    int mi_bins = kDefaultMiBins;
    std::vector<int> deform_channels{16, 32, 64, 128};
    int latent_dim = 64;
    int vae_size = 64;
    int vae_epochs = 50;
    double vae_lr = 2e-4;
    int vae_batch_size = 8;
    double kl_weight = 1.0;
    int ssim_window = 11;
    double ssim_c1 = 1e-4;
    double ssim_c2 = 9e-4;

    /// Throws ConfigError.
    void validate() const;
    std::string to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static TrainConfig from_json(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    LossWeights active_weights() const { return mode_weights(mode, weights); }
    DeformNetConfig deform_config() const;
    VaeConfig vae_config() const;
    nn::AdamOptions adam() const;
    /// Same betas and decay as adam() with the VAE learning rate.
    nn::AdamOptions vae_adam() const;
    VaeLossOptions vae_loss_options() const;
    /// Epochs assigned to scale index i.
    int epochs_for_scale(std::size_t i) const;
};

// ---------------------------------------------------------------------------
// Data

struct RegistrationSample {
    std::string id;
    Image2D fixed, moving;
    LabelMask fixed_mask, moving_mask;
};

using RegistrationSet = std::vector<RegistrationSample>;

/// ED as fixed, ES as moving.
RegistrationSample make_sample(const CaseRecord& rec);
RegistrationSet resize_set(const RegistrationSet& set, int size);

// ---------------------------------------------------------------------------
// Run plumbing

struct EpochLog {
    int scale = 0;
    int epoch = 0;  // 1-based within the scale
    double total = 0.0, mi = 0.0, bending = 0.0, dice = 0.0, latent_l2 = 0.0, g_loss = 0.0, d_loss = 0.0;
    std::optional<double> val_dsc, val_fg_dsc, val_hd, val_tu_sqrt, val_mse;
    double seconds = 0.0;
};

std::string epoch_csv_header();
std::string epoch_csv_row(const EpochLog& log);

struct RunOptions {
    std::filesystem::path out_dir;  // empty: write nothing
    std::string run_id = "run";
    int checkpoint_every = 0;  // 0: only the last epoch of each scale
    int val_every = 1;         // epochs between validation passes; 0 disables
    std::function<void(const EpochLog&)> on_epoch;
    /// Deformation-network archive to start from instead of a fresh
    /// network. Its configuration must match the run's (CheckpointError).
    const nn::Archive* initial_net = nullptr;
};

// ---------------------------------------------------------------------------
// VAE pretraining

struct VaeEpochLog {
    int epoch = 0;
    double loss = 0.0, dice = 0.0, ssim = 0.0, kl = 0.0;
    std::optional<double> heldout_dice;
};

struct VaeTrainResult {
    ShapeVae vae;
    std::vector<VaeEpochLog> log;
    double heldout_dice = 0.0;  // NaN when no held-out masks were given
};

/// Two-channel (MYO, LV) indicator map of a mask resampled to `size`.
ProbMaps vae_input(const LabelMask& mask, int size);

/// Mean hard Dice over MYO and LV between inputs and thresholded
/// reconstructions.
double vae_roundtrip_dice(ShapeVae& vae, const std::vector<LabelMask>& masks);

VaeTrainResult pretrain_vae(const std::vector<LabelMask>& train, const std::vector<LabelMask>& heldout,
                            const TrainConfig& config, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Registration training

struct RegistrationResult {
    DeformNet net;
    std::optional<Discriminator> discriminator;  // empty when the adversarial weight is 0
    std::vector<EpochLog> log;
};

/// Trains at the resolution of `train` for config.epochs epochs. `vae` is
/// required (and kept frozen) when the latent term is active.
RegistrationResult train_registration(const RegistrationSet& train, const RegistrationSet& val,
                                      const TrainConfig& config, ShapeVae* vae, const RunOptions& options = {});

/// Runs the registration training at each configured scale in order,
/// carrying the deformation network over unchanged and the discriminator's
/// convolutional stages over with a fresh head.
RegistrationResult multiscale_train(const RegistrationSet& train, const RegistrationSet& val,
                                    const TrainConfig& config, ShapeVae* vae, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Inference helpers

struct Registered {
    DisplacementField field;
    Image2D warped;
    LabelMask warped_mask;
};

/// Resizes the pair to the network scale, predicts, and resamples the field
/// back to the input resolution before warping.
Registered register_pair(DeformNet& net, const Image2D& fixed, const Image2D& moving, const LabelMask& moving_mask,
                         int scale);

/// Metrics of every sample after registration at `scale`; a null network
/// scores the unregistered pairs.
std::vector<CaseMetrics> evaluate_set(DeformNet* net, const RegistrationSet& set, int scale,
                                      const EvaluateOptions& options = {});

}  // namespace echoreg
