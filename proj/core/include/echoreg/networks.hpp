#pragma once

// The three parametric models: the U-shaped deformation network, the shape
// VAE used as a frozen anatomical prior, and the residual image
// discriminator used for the adversarial term.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "echoreg/imgcore.hpp"
#include "echoreg/losses.hpp"
#include "echoreg/nn/archive.hpp"
#include "echoreg/nn/layers.hpp"

namespace echoreg {

// ---------------------------------------------------------------------------
// Deformation network

struct DeformNetConfig {
    std::vector<int> channels{16, 32, 64, 128};  // one entry per resolution level
    double leaky_slope = 0.01;

    void validate() const;
    int levels() const { return static_cast<int>(channels.size()); }
    /// Spatial sides must be multiples of this.
    int size_multiple() const { return 1 << (levels() - 1); }
    std::string to_json() const;
    static DeformNetConfig from_json(const std::string& json);
    bool operator==(const DeformNetConfig&) const = default;
};

/// Encoder-decoder with skip connections mapping (I_F, I_M) to a two-channel
/// displacement field of the same size. The output convolution starts at zero
/// so an untrained network predicts the identity transform.
class DeformNet {
public:
    DeformNet() = default;
    DeformNet(DeformNetConfig config, std::uint64_t seed);

    const DeformNetConfig& config() const noexcept { return config_; }

    /// Batched forward: n x 2 x H x W (fixed, moving) to n x 2 x H x W (dy, dx).
    nn::Tensor forward(const nn::Tensor& pair);
    /// Accumulates parameter gradients; returns dL/d(input).
    nn::Tensor backward(const nn::Tensor& grad_field);

    DisplacementField predict(const Image2D& fixed, const Image2D& moving);

    std::vector<nn::Parameter*> parameters();
    std::size_t parameter_count();

    nn::Archive to_archive();
    /// Throws CheckpointError when kind or config hash disagree.
    void load_archive(const nn::Archive& archive);
    static DeformNet from_archive(const nn::Archive& archive);

private:
    struct Block {
        nn::Conv2d a, b;
        nn::LeakyRelu ra, rb;
        nn::Tensor forward(const nn::Tensor& x);
        nn::Tensor backward(const nn::Tensor& g);
    };

    DeformNetConfig config_;
    std::vector<Block> down_;
    std::vector<nn::AvgPool2> pools_;
    std::vector<nn::ConvTranspose2d> ups_;
    std::vector<nn::LeakyRelu> up_acts_;
    std::vector<Block> up_;
    nn::Conv2d head_;
};

/// Packs single images into a 1 x 2 x H x W network input.
nn::Tensor make_pair_tensor(const Image2D& fixed, const Image2D& moving);
DisplacementField field_from_tensor(const nn::Tensor& t, int sample = 0);
/// n x 2 x H x W gradient tensor from per-sample field gradients.
nn::Tensor tensor_from_fields(const std::vector<DisplacementField>& fields);

// ---------------------------------------------------------------------------
// Shape VAE

struct VaeConfig {
    int size = 64;         // native square input side; multiple of 8
    int latent_dim = 64;

    void validate() const;
    std::string to_json() const;
    static VaeConfig from_json(const std::string& json);
    bool operator==(const VaeConfig&) const = default;
};

/// Linear (differentiable) resampling between a square grid and another
/// grid, applied per channel: out = Ry * in * Rx^T. Integer downsampling uses
/// box averaging; anything else uses bilinear weights.
class PlaneResampler {
public:
    PlaneResampler(int src_rows, int src_cols, int dst_rows, int dst_cols);
    void forward(std::span<const double> src, std::span<double> dst) const;
    void backward(std::span<const double> grad_dst, std::span<double> grad_src) const;
    bool identity() const noexcept { return identity_; }

private:
    int sr_, sc_, dr_, dc_;
    bool identity_;
    std::vector<double> ry_, rx_;  // dst x src, row-major
};

class ShapeVae {
public:
    ShapeVae() = default;
    ShapeVae(VaeConfig config, std::uint64_t seed);

    const VaeConfig& config() const noexcept { return config_; }

    struct Encoded {
        nn::Tensor mu;      // n x d x 1 x 1
        nn::Tensor logvar;  // n x d x 1 x 1
    };

    /// Input n x 2 x S x S foreground probabilities (MYO, LV).
    Encoded encode(const nn::Tensor& masks, nn::Mode mode);
    nn::Tensor encode_backward(const nn::Tensor& d_mu, const nn::Tensor& d_logvar);
    /// Sigmoid probabilities, n x 2 x S x S.
    nn::Tensor decode(const nn::Tensor& z, nn::Mode mode);
    nn::Tensor decode_backward(const nn::Tensor& grad_out);

    /// Deterministic latent mean of a two-channel map of any size (resampled to S).
    LatentVector encode_mean(const ProbMaps& foreground);
    /// Mean codes for a batch plus what is needed to push gradients back.
    std::vector<LatentVector> encode_mean_batch(const std::vector<ProbMaps>& foregrounds);
    /// Gradient of sum_i <d_mu_i, mu_i> with respect to each input map, for
    /// the batch passed to the most recent encode_mean_batch call.
    std::vector<ProbMaps> encode_mean_batch_backward(const std::vector<LatentVector>& d_mu);

    ProbMaps reconstruct(const ProbMaps& foreground);

    std::vector<nn::Parameter*> parameters();
    std::vector<nn::Buffer*> buffers();
    std::size_t parameter_count();

    nn::Archive to_archive();
    void load_archive(const nn::Archive& archive);
    static ShapeVae from_archive(const nn::Archive& archive);

private:
    nn::Tensor to_native(const std::vector<ProbMaps>& maps);

    VaeConfig config_;
    nn::Conv2d enc1_, enc2_, enc3_;
    nn::BatchNorm2d enc_bn2_;
    nn::Relu enc_r1_, enc_r2_, enc_r3_, enc_r4_, enc_r5_;
    nn::Linear enc_fc1_, enc_fc2_, fc_mu_, fc_logvar_;
    nn::Linear dec_fc1_, dec_fc2_;
    nn::Relu dec_r1_, dec_r2_, dec_r3_, dec_r4_;
    nn::ConvTranspose2d dec1_, dec2_, dec3_;
    nn::BatchNorm2d dec_bn1_, dec_bn2_;
    nn::Sigmoid sigmoid_;
    int batch_rows_ = 0, batch_cols_ = 0;
    int enc3_c_ = 0, enc3_h_ = 0, enc3_w_ = 0;
};

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
    int rows = 64;
    int cols = 64;
    std::vector<int> channels{8, 16, 32, 64};  // one residual stage each, stride 2
    std::vector<int> head{1024, 256};
    double dropout = 0.1;
    double leaky_slope = 0.01;

    void validate() const;
    std::string to_json() const;
    static DiscriminatorConfig from_json(const std::string& json);
    /// Closed-form trainable parameter count.
    std::size_t expected_parameter_count() const;
    bool operator==(const DiscriminatorConfig&) const = default;
};

class Discriminator {
public:
    Discriminator() = default;
    Discriminator(DiscriminatorConfig config, std::uint64_t seed);

    const DiscriminatorConfig& config() const noexcept { return config_; }

    /// n x 1 x H x W images to n x 1 x 1 x 1 probabilities in (0, 1).
    nn::Tensor forward(const nn::Tensor& images, nn::Mode mode);
    nn::Tensor backward(const nn::Tensor& grad_prob);
    double score(const Image2D& image);

    /// Copy for a new input size: residual stages carry over, the MLP head is
    /// re-initialised because its input width depends on resolution.
    Discriminator resized(int rows, int cols, std::uint64_t seed) const;

    std::vector<nn::Parameter*> parameters();
    std::size_t parameter_count();

    nn::Archive to_archive();
    void load_archive(const nn::Archive& archive);
    static Discriminator from_archive(const nn::Archive& archive);

private:
    struct Stage {
        nn::Conv2d shortcut, conv1, conv2;
        nn::InstanceNorm2d in1, in2;
        nn::Dropout drop1, drop2;
        nn::LeakyRelu act1, act2;
        nn::Tensor forward(const nn::Tensor& x, nn::Mode mode, nn::Rng& rng);
        nn::Tensor backward(const nn::Tensor& g);
        std::vector<nn::Parameter*> parameters();
    };

    void build_head(std::uint64_t seed);

    DiscriminatorConfig config_;
    std::vector<Stage> stages_;
    std::vector<nn::Linear> head_;
    std::vector<nn::LeakyRelu> head_acts_;
    nn::Sigmoid sigmoid_;
    nn::Rng rng_;
    int flat_c_ = 0, flat_h_ = 0, flat_w_ = 0;
};

nn::Tensor images_to_tensor(const std::vector<const Image2D*>& images);

/// Save/load helpers around the archive format.
void save_checkpoint(const std::filesystem::path& path, DeformNet& net);
void save_checkpoint(const std::filesystem::path& path, ShapeVae& net);
void save_checkpoint(const std::filesystem::path& path, Discriminator& net);
DeformNet load_deform_net(const std::filesystem::path& path);
/// Rejects archives whose embedded config hash differs from `expected`.
DeformNet load_deform_net(const std::filesystem::path& path, const DeformNetConfig& expected);
ShapeVae load_vae(const std::filesystem::path& path);
Discriminator load_discriminator(const std::filesystem::path& path);

}  // namespace echoreg
