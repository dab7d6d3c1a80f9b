#include "echoreg/networks.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>

namespace echoreg {

using nlohmann::json;
using nn::Mode;
using nn::Tensor;

namespace {

nn::Archive make_archive(const std::string& kind, const std::string& config_json,
                         const std::vector<nn::Parameter*>& params, const std::vector<nn::Buffer*>& buffers) {
    nn::Archive a;
    a.kind = kind;
    a.config_json = config_json;
    a.config_hash = nn::fnv1a(config_json);
    for (const auto* p : params) a.entries.push_back({p->name, {p->value.begin(), p->value.end()}});
    for (const auto* b : buffers) a.entries.push_back({b->name, {b->value.begin(), b->value.end()}});
    return a;
}

void restore_archive(const nn::Archive& a, const std::string& kind, const std::string& config_json,
                     const std::vector<nn::Parameter*>& params, const std::vector<nn::Buffer*>& buffers) {
    if (a.kind != kind) throw CheckpointError("checkpoint holds a '" + a.kind + "' network, expected '" + kind + "'");
    if (a.config_hash != nn::fnv1a(config_json)) {
        throw CheckpointError("checkpoint config hash mismatch for '" + kind + "' network");
    }
    std::map<std::string, const std::vector<double>*> by_name;
    for (const auto& e : a.entries) by_name[e.name] = &e.values;
    auto fetch = [&](const std::string& name, nn::AlignedVector& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError("checkpoint is missing entry '" + name + "'");
        if (it->second->size() != dst.size()) throw CheckpointError("checkpoint entry '" + name + "' has wrong size");
        dst.assign(it->second->begin(), it->second->end());
    };
    for (auto* p : params) {
        fetch(p->name, p->value);
        p->zero_grad();
    }
    for (auto* b : buffers) fetch(b->name, b->value);
}

std::vector<int> int_list(const json& j, const char* key, std::vector<int> fallback) {
    return j.contains(key) ? j.at(key).get<std::vector<int>>() : fallback;
}

}  // namespace

// ---------------------------------------------------------------------------
// DeformNet

void DeformNetConfig::validate() const {
    if (channels.size() < 3) throw ConfigError("deformation network needs at least 3 levels");
    for (int c : channels) {
        if (c <= 0) throw ConfigError("deformation network channel counts must be positive");
    }
    if (leaky_slope < 0.0) throw ConfigError("leaky_slope must be non-negative");
}

std::string DeformNetConfig::to_json() const {
    return json{{"channels", channels}, {"leaky_slope", leaky_slope}}.dump();
}

DeformNetConfig DeformNetConfig::from_json(const std::string& text) {
    DeformNetConfig c;
    try {
        const auto j = json::parse(text);
        c.channels = int_list(j, "channels", c.channels);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid deformation network config: ") + e.what());
    }
    c.validate();
    return c;
}

Tensor DeformNet::Block::forward(const Tensor& x) { return rb.forward(b.forward(ra.forward(a.forward(x)))); }

Tensor DeformNet::Block::backward(const Tensor& g) { return a.backward(ra.backward(b.backward(rb.backward(g)))); }

DeformNet::DeformNet(DeformNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    nn::Rng rng(seed);
    const auto& ch = config_.channels;
    const int levels = config_.levels();
    const double slope = config_.leaky_slope;
    for (int i = 0; i < levels; ++i) {
        const int cin = i == 0 ? 2 : ch[i - 1];
        const std::string n = "down" + std::to_string(i);
        Block blk{nn::Conv2d(n + ".a", cin, ch[i], 3, 1, 1), nn::Conv2d(n + ".b", ch[i], ch[i], 3, 1, 1),
                  nn::LeakyRelu(slope), nn::LeakyRelu(slope)};
        blk.a.init(rng);
        blk.b.init(rng);
        down_.push_back(std::move(blk));
        if (i < levels - 1) pools_.emplace_back();
    }
    for (int j = 0; j < levels - 1; ++j) {
        const std::string n = "up" + std::to_string(j);
        nn::ConvTranspose2d up(n + ".upsample", ch[j + 1], ch[j], 2, 2, 0, 0);
        up.init(rng);
        ups_.push_back(std::move(up));
        up_acts_.emplace_back(slope);
        Block blk{nn::Conv2d(n + ".a", 2 * ch[j], ch[j], 3, 1, 1), nn::Conv2d(n + ".b", ch[j], ch[j], 3, 1, 1),
                  nn::LeakyRelu(slope), nn::LeakyRelu(slope)};
        blk.a.init(rng);
        blk.b.init(rng);
        up_.push_back(std::move(blk));
    }
    head_ = nn::Conv2d("head", ch[0], 2, 3, 1, 1);
    head_.zero_init();
}

Tensor DeformNet::forward(const Tensor& pair) {
    require(!down_.empty(), "DeformNet: network is not initialised");
    require(pair.c() == 2, "DeformNet: input must have two channels (fixed, moving)");
    const int m = config_.size_multiple();
    if (pair.h() % m != 0 || pair.w() % m != 0) {
        throw ContractError("DeformNet: input " + std::to_string(pair.h()) + "x" + std::to_string(pair.w()) +
                            " is not divisible by " + std::to_string(m));
    }
    const int levels = config_.levels();
    std::vector<Tensor> skips(levels - 1);
    Tensor x = pair;
    for (int i = 0; i < levels; ++i) {
        Tensor h = down_[i].forward(x);
        if (i < levels - 1) {
            x = pools_[i].forward(h);
            skips[i] = std::move(h);
        } else {
            x = std::move(h);
        }
    }
    for (int j = levels - 2; j >= 0; --j) {
        Tensor u = up_acts_[j].forward(ups_[j].forward(x));
        x = up_[j].forward(nn::concat_channels(skips[j], u));
    }
    return head_.forward(x);
}

Tensor DeformNet::backward(const Tensor& grad_field) {
    const int levels = config_.levels();
    std::vector<Tensor> grad_skips(levels - 1);
    Tensor g = head_.backward(grad_field);
    for (int j = 0; j <= levels - 2; ++j) {
        Tensor cat = up_[j].backward(g);
        Tensor gu;
        nn::split_channels(cat, config_.channels[j], grad_skips[j], gu);
        g = ups_[j].backward(up_acts_[j].backward(gu));
    }
    for (int i = levels - 1; i >= 0; --i) {
        if (i < levels - 1) {
            Tensor gh = pools_[i].backward(g);
            gh += grad_skips[i];
            g = down_[i].backward(gh);
        } else {
            g = down_[i].backward(g);
        }
    }
    return g;
}

DisplacementField DeformNet::predict(const Image2D& fixed, const Image2D& moving) {
    require(fixed.same_shape(moving), "DeformNet: fixed and moving images differ in shape");
    return field_from_tensor(forward(make_pair_tensor(fixed, moving)));
}

std::vector<nn::Parameter*> DeformNet::parameters() {
    std::vector<nn::Parameter*> out;
    auto add = [&out](std::vector<nn::Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    for (auto& b : down_) {
        add(b.a.parameters());
        add(b.b.parameters());
    }
    for (std::size_t j = 0; j < ups_.size(); ++j) {
        add(ups_[j].parameters());
        add(up_[j].a.parameters());
        add(up_[j].b.parameters());
    }
    add(head_.parameters());
    return out;
}

std::size_t DeformNet::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
}

nn::Archive DeformNet::to_archive() { return make_archive("deform", config_.to_json(), parameters(), {}); }

void DeformNet::load_archive(const nn::Archive& archive) {
    restore_archive(archive, "deform", config_.to_json(), parameters(), {});
}

DeformNet DeformNet::from_archive(const nn::Archive& archive) {
    if (archive.kind != "deform") throw CheckpointError("checkpoint does not hold a deformation network");
    DeformNet net(DeformNetConfig::from_json(archive.config_json), 0);
    net.load_archive(archive);
    return net;
}

Tensor make_pair_tensor(const Image2D& fixed, const Image2D& moving) {
    require(fixed.same_shape(moving), "image pair shapes differ");
    Tensor t(1, 2, fixed.rows(), fixed.cols());
    std::copy(fixed.storage().begin(), fixed.storage().end(), t.sample(0));
    std::copy(moving.storage().begin(), moving.storage().end(), t.sample(0) + fixed.size());
    return t;
}

DisplacementField field_from_tensor(const Tensor& t, int sample) {
    require(t.c() == 2 && sample >= 0 && sample < t.n(), "field tensor must have two channels");
    DisplacementField f(t.h(), t.w());
    const double* p = t.sample(sample);
    std::copy_n(p, t.plane_size(), f.dy().storage().begin());
    std::copy_n(p + t.plane_size(), t.plane_size(), f.dx().storage().begin());
    return f;
}

Tensor tensor_from_fields(const std::vector<DisplacementField>& fields) {
    require(!fields.empty(), "tensor_from_fields: empty batch");
    Tensor t(static_cast<int>(fields.size()), 2, fields[0].rows(), fields[0].cols());
    for (std::size_t n = 0; n < fields.size(); ++n) {
        require(fields[n].rows() == t.h() && fields[n].cols() == t.w(), "tensor_from_fields: shape mismatch");
        double* p = t.sample(static_cast<int>(n));
        std::copy(fields[n].dy().storage().begin(), fields[n].dy().storage().end(), p);
        std::copy(fields[n].dx().storage().begin(), fields[n].dx().storage().end(), p + t.plane_size());
    }
    return t;
}

// ---------------------------------------------------------------------------
// PlaneResampler

namespace {

std::vector<double> resample_matrix(int src, int dst) {
    std::vector<double> m(static_cast<std::size_t>(dst) * src, 0.0);
    if (src >= dst && src % dst == 0) {
        const int f = src / dst;
        for (int i = 0; i < dst; ++i)
            for (int k = 0; k < f; ++k) m[static_cast<std::size_t>(i) * src + i * f + k] = 1.0 / f;
        return m;
    }
    for (int i = 0; i < dst; ++i) {
        const double s = std::clamp((i + 0.5) * src / dst - 0.5, 0.0, src - 1.0);
        const int i0 = std::min(static_cast<int>(std::floor(s)), src - 1);
        const int i1 = std::min(i0 + 1, src - 1);
        const double fr = s - i0;
        m[static_cast<std::size_t>(i) * src + i0] += 1.0 - fr;
        m[static_cast<std::size_t>(i) * src + i1] += fr;
    }
    return m;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

PlaneResampler::PlaneResampler(int src_rows, int src_cols, int dst_rows, int dst_cols)
    : sr_(src_rows), sc_(src_cols), dr_(dst_rows), dc_(dst_cols),
      identity_(src_rows == dst_rows && src_cols == dst_cols) {
    if (!identity_) {
        ry_ = resample_matrix(sr_, dr_);
        rx_ = resample_matrix(sc_, dc_);
    }
}

void PlaneResampler::forward(std::span<const double> src, std::span<double> dst) const {
    if (identity_) {
        std::copy(src.begin(), src.end(), dst.begin());
        return;
    }
    Eigen::Map<const RowMatrix> S(src.data(), sr_, sc_);
    Eigen::Map<const RowMatrix> Ry(ry_.data(), dr_, sr_);
    Eigen::Map<const RowMatrix> Rx(rx_.data(), dc_, sc_);
    Eigen::Map<RowMatrix> D(dst.data(), dr_, dc_);
    D.noalias() = Ry * S * Rx.transpose();
}

void PlaneResampler::backward(std::span<const double> grad_dst, std::span<double> grad_src) const {
    if (identity_) {
        std::copy(grad_dst.begin(), grad_dst.end(), grad_src.begin());
        return;
    }
    Eigen::Map<const RowMatrix> G(grad_dst.data(), dr_, dc_);
    Eigen::Map<const RowMatrix> Ry(ry_.data(), dr_, sr_);
    Eigen::Map<const RowMatrix> Rx(rx_.data(), dc_, sc_);
    Eigen::Map<RowMatrix> S(grad_src.data(), sr_, sc_);
    S.noalias() = Ry.transpose() * G * Rx;
}

// ---------------------------------------------------------------------------
// ShapeVae

void VaeConfig::validate() const {
    if (size < 8 || size % 8 != 0) throw ConfigError("VAE size must be a positive multiple of 8");
    if (latent_dim < 1) throw ConfigError("VAE latent dimension must be positive");
}

std::string VaeConfig::to_json() const { return json{{"size", size}, {"latent_dim", latent_dim}}.dump(); }

VaeConfig VaeConfig::from_json(const std::string& text) {
    VaeConfig c;
    try {
        const auto j = json::parse(text);
        c.size = j.value("size", c.size);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid VAE config: ") + e.what());
    }
    c.validate();
    return c;
}

ShapeVae::ShapeVae(VaeConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    nn::Rng rng(seed);
    const int s8 = config_.size / 8;
    const int flat = 32 * s8 * s8;
    const int d = config_.latent_dim;
    enc1_ = nn::Conv2d("enc.conv1", 2, 8, 3, 2, 1);
    enc2_ = nn::Conv2d("enc.conv2", 8, 16, 3, 2, 1);
    enc_bn2_ = nn::BatchNorm2d("enc.bn2", 16);
    enc3_ = nn::Conv2d("enc.conv3", 16, 32, 3, 2, 1);
    enc_fc1_ = nn::Linear("enc.fc1", flat, 128);
    enc_fc2_ = nn::Linear("enc.fc2", 128, 128);
    fc_mu_ = nn::Linear("enc.mu", 128, d);
    fc_logvar_ = nn::Linear("enc.logvar", 128, d);
    dec_fc1_ = nn::Linear("dec.fc1", d, 128);
    dec_fc2_ = nn::Linear("dec.fc2", 128, flat);
    dec1_ = nn::ConvTranspose2d("dec.tconv1", 32, 16, 3, 2, 1, 1);
    dec_bn1_ = nn::BatchNorm2d("dec.bn1", 16);
    dec2_ = nn::ConvTranspose2d("dec.tconv2", 16, 8, 3, 2, 1, 1);
    dec_bn2_ = nn::BatchNorm2d("dec.bn2", 8);
    dec3_ = nn::ConvTranspose2d("dec.tconv3", 8, 2, 3, 2, 1, 1);
    enc1_.init(rng);
    enc2_.init(rng);
    enc3_.init(rng);
    enc_fc1_.init(rng);
    enc_fc2_.init(rng);
    fc_mu_.init(rng);
    fc_logvar_.init(rng);
    dec_fc1_.init(rng);
    dec_fc2_.init(rng);
    dec1_.init(rng);
    dec2_.init(rng);
    dec3_.init(rng);
}

ShapeVae::Encoded ShapeVae::encode(const Tensor& masks, Mode mode) {
    require(masks.c() == 2, "ShapeVae: expected 2 foreground channels, got " + std::to_string(masks.c()));
    require(masks.h() == config_.size && masks.w() == config_.size,
            "ShapeVae: input must be " + std::to_string(config_.size) + "x" + std::to_string(config_.size));
    Tensor h = enc_r1_.forward(enc1_.forward(masks));
    h = enc_r2_.forward(enc_bn2_.forward(enc2_.forward(h), mode));
    h = enc_r3_.forward(enc3_.forward(h));
    enc3_c_ = h.c();
    enc3_h_ = h.h();
    enc3_w_ = h.w();
    h = enc_r4_.forward(enc_fc1_.forward(h));
    h = enc_r5_.forward(enc_fc2_.forward(h));
    return Encoded{fc_mu_.forward(h), fc_logvar_.forward(h)};
}

Tensor ShapeVae::encode_backward(const Tensor& d_mu, const Tensor& d_logvar) {
    Tensor g = fc_mu_.backward(d_mu);
    g += fc_logvar_.backward(d_logvar);
    g = enc_fc2_.backward(enc_r5_.backward(g));
    g = enc_fc1_.backward(enc_r4_.backward(g));
    g = enc3_.backward(enc_r3_.backward(g));
    g = enc2_.backward(enc_bn2_.backward(enc_r2_.backward(g)));
    return enc1_.backward(enc_r1_.backward(g));
}

Tensor ShapeVae::decode(const Tensor& z, Mode mode) {
    require(z.sample_size() == static_cast<std::size_t>(config_.latent_dim), "ShapeVae: latent dimension mismatch");
    const int s8 = config_.size / 8;
    Tensor h = dec_r1_.forward(dec_fc1_.forward(z));
    h = dec_r2_.forward(dec_fc2_.forward(h)).reshaped(z.n(), 32, s8, s8);
    h = dec_r3_.forward(dec_bn1_.forward(dec1_.forward(h), mode));
    h = dec_r4_.forward(dec_bn2_.forward(dec2_.forward(h), mode));
    return sigmoid_.forward(dec3_.forward(h));
}

Tensor ShapeVae::decode_backward(const Tensor& grad_out) {
    Tensor g = dec3_.backward(sigmoid_.backward(grad_out));
    g = dec2_.backward(dec_bn2_.backward(dec_r4_.backward(g)));
    g = dec1_.backward(dec_bn1_.backward(dec_r3_.backward(g)));
    g = g.reshaped(g.n(), g.sample_size(), 1, 1);
    g = dec_fc2_.backward(dec_r2_.backward(g));
    return dec_fc1_.backward(dec_r1_.backward(g));
}

Tensor ShapeVae::to_native(const std::vector<ProbMaps>& maps) {
    require(!maps.empty(), "ShapeVae: empty batch");
    const int s = config_.size;
    batch_rows_ = maps[0].rows();
    batch_cols_ = maps[0].cols();
    PlaneResampler rs(batch_rows_, batch_cols_, s, s);
    Tensor t(static_cast<int>(maps.size()), 2, s, s);
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    for (std::size_t n = 0; n < maps.size(); ++n) {
        require(maps[n].channels() == 2, "ShapeVae: expected 2 foreground channels");
        require(maps[n].rows() == batch_rows_ && maps[n].cols() == batch_cols_, "ShapeVae: batch shapes differ");
        for (int c = 0; c < 2; ++c) {
            rs.forward(maps[n].channel(c), std::span<double>(t.sample(static_cast<int>(n)) + c * plane, plane));
        }
    }
    return t;
}

LatentVector ShapeVae::encode_mean(const ProbMaps& fg) { return encode_mean_batch({fg}).front(); }

std::vector<LatentVector> ShapeVae::encode_mean_batch(const std::vector<ProbMaps>& fgs) {
    const Encoded e = encode(to_native(fgs), Mode::eval);
    std::vector<LatentVector> out;
    const int d = config_.latent_dim;
    for (int n = 0; n < e.mu.n(); ++n) {
        out.emplace_back(std::vector<double>(e.mu.sample(n), e.mu.sample(n) + d));
    }
    return out;
}

std::vector<ProbMaps> ShapeVae::encode_mean_batch_backward(const std::vector<LatentVector>& d_mu) {
    const int d = config_.latent_dim;
    const int n = static_cast<int>(d_mu.size());
    Tensor gm(n, d, 1, 1), gl(n, d, 1, 1);
    for (int i = 0; i < n; ++i) {
        require(d_mu[i].dim() == static_cast<std::size_t>(d), "ShapeVae: latent gradient dimension mismatch");
        std::copy(d_mu[i].values.begin(), d_mu[i].values.end(), gm.sample(i));
    }
    const Tensor g = encode_backward(gm, gl);
    PlaneResampler rs(batch_rows_, batch_cols_, config_.size, config_.size);
    const std::size_t plane = static_cast<std::size_t>(config_.size) * config_.size;
    std::vector<ProbMaps> out;
    for (int i = 0; i < n; ++i) {
        ProbMaps pm(2, batch_rows_, batch_cols_);
        for (int c = 0; c < 2; ++c) rs.backward(std::span<const double>(g.sample(i) + c * plane, plane), pm.channel(c));
        out.push_back(std::move(pm));
    }
    return out;
}

ProbMaps ShapeVae::reconstruct(const ProbMaps& fg) {
    const Tensor x = to_native({fg});
    const Encoded e = encode(x, Mode::eval);
    const Tensor r = decode(e.mu, Mode::eval);
    ProbMaps out(2, config_.size, config_.size);
    std::copy_n(r.sample(0), r.sample_size(), out.values().begin());
    return out;
}

std::vector<nn::Parameter*> ShapeVae::parameters() {
    std::vector<nn::Parameter*> out;
    auto add = [&out](std::vector<nn::Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    add(enc1_.parameters());
    add(enc2_.parameters());
    add(enc_bn2_.parameters());
    add(enc3_.parameters());
    add(enc_fc1_.parameters());
    add(enc_fc2_.parameters());
    add(fc_mu_.parameters());
    add(fc_logvar_.parameters());
    add(dec_fc1_.parameters());
    add(dec_fc2_.parameters());
    add(dec1_.parameters());
    add(dec_bn1_.parameters());
    add(dec2_.parameters());
    add(dec_bn2_.parameters());
    add(dec3_.parameters());
    return out;
}

std::vector<nn::Buffer*> ShapeVae::buffers() {
    std::vector<nn::Buffer*> out;
    for (auto* bn : {&enc_bn2_, &dec_bn1_, &dec_bn2_}) {
        auto b = bn->buffers();
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

std::size_t ShapeVae::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
}

nn::Archive ShapeVae::to_archive() { return make_archive("vae", config_.to_json(), parameters(), buffers()); }

void ShapeVae::load_archive(const nn::Archive& archive) {
    restore_archive(archive, "vae", config_.to_json(), parameters(), buffers());
}

ShapeVae ShapeVae::from_archive(const nn::Archive& archive) {
    if (archive.kind != "vae") throw CheckpointError("checkpoint does not hold a shape VAE");
    ShapeVae vae(VaeConfig::from_json(archive.config_json), 0);
    vae.load_archive(archive);
    return vae;
}

// ---------------------------------------------------------------------------
// Discriminator

void DiscriminatorConfig::validate() const {
    if (channels.empty()) throw ConfigError("discriminator needs at least one stage");
    const int m = 1 << channels.size();
    if (rows < m || cols < m || rows % m != 0 || cols % m != 0) {
        throw ConfigError("discriminator input " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " must be a multiple of " + std::to_string(m));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("discriminator dropout must lie in [0, 1)");
}

std::string DiscriminatorConfig::to_json() const {
    return json{{"rows", rows},       {"cols", cols},       {"channels", channels},
                {"head", head},       {"dropout", dropout}, {"leaky_slope", leaky_slope}}
        .dump();
}

DiscriminatorConfig DiscriminatorConfig::from_json(const std::string& text) {
    DiscriminatorConfig c;
    try {
        const auto j = json::parse(text);
        c.rows = j.value("rows", c.rows);
        c.cols = j.value("cols", c.cols);
        c.channels = int_list(j, "channels", c.channels);
        c.head = int_list(j, "head", c.head);
        c.dropout = j.value("dropout", c.dropout);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid discriminator config: ") + e.what());
    }
    c.validate();
    return c;
}

std::size_t DiscriminatorConfig::expected_parameter_count() const {
    std::size_t total = 0;
    int cin = 1;
    for (int c : channels) {
        total += 2 * static_cast<std::size_t>(9 * cin + 1) * c;  // shortcut + strided conv
        total += static_cast<std::size_t>(9 * c + 1) * c;        // stride-1 conv
        cin = c;
    }
    const int div = 1 << channels.size();
    std::size_t width = static_cast<std::size_t>(channels.back()) * (rows / div) * (cols / div);
    for (int h : head) {
        total += width * h + h;
        width = static_cast<std::size_t>(h);
    }
    total += width + 1;
    return total;
}

Tensor Discriminator::Stage::forward(const Tensor& x, Mode mode, nn::Rng& rng) {
    Tensor s = shortcut.forward(x);
    Tensor m = act1.forward(drop1.forward(in1.forward(conv1.forward(x)), mode, rng));
    m = act2.forward(drop2.forward(in2.forward(conv2.forward(m)), mode, rng));
    m += s;
    return m;
}

Tensor Discriminator::Stage::backward(const Tensor& g) {
    Tensor gm = in2.backward(drop2.backward(act2.backward(g)));
    gm = conv2.backward(gm);
    gm = conv1.backward(in1.backward(drop1.backward(act1.backward(gm))));
    gm += shortcut.backward(g);
    return gm;
}

std::vector<nn::Parameter*> Discriminator::Stage::parameters() {
    std::vector<nn::Parameter*> out;
    for (auto* c : {&shortcut, &conv1, &conv2}) {
        auto ps = c->parameters();
        out.insert(out.end(), ps.begin(), ps.end());
    }
    return out;
}

Discriminator::Discriminator(DiscriminatorConfig config, std::uint64_t seed)
    : config_(std::move(config)), rng_(seed ^ 0x9e3779b97f4a7c15ull) {
    config_.validate();
    nn::Rng rng(seed);
    int cin = 1;
    for (std::size_t i = 0; i < config_.channels.size(); ++i) {
        const int c = config_.channels[i];
        const std::string n = "stage" + std::to_string(i);
        Stage st{nn::Conv2d(n + ".shortcut", cin, c, 3, 2, 1),
                 nn::Conv2d(n + ".conv1", cin, c, 3, 2, 1),
                 nn::Conv2d(n + ".conv2", c, c, 3, 1, 1),
                 nn::InstanceNorm2d(),
                 nn::InstanceNorm2d(),
                 nn::Dropout(config_.dropout),
                 nn::Dropout(config_.dropout),
                 nn::LeakyRelu(config_.leaky_slope),
                 nn::LeakyRelu(config_.leaky_slope)};
        st.shortcut.init(rng);
        st.conv1.init(rng);
        st.conv2.init(rng);
        stages_.push_back(std::move(st));
        cin = c;
    }
    build_head(rng());
}

void Discriminator::build_head(std::uint64_t seed) {
    nn::Rng rng(seed);
    const int div = 1 << config_.channels.size();
    flat_c_ = config_.channels.back();
    flat_h_ = config_.rows / div;
    flat_w_ = config_.cols / div;
    head_.clear();
    head_acts_.clear();
    int width = flat_c_ * flat_h_ * flat_w_;
    for (std::size_t i = 0; i < config_.head.size(); ++i) {
        head_.emplace_back("head.fc" + std::to_string(i), width, config_.head[i]);
        head_acts_.emplace_back(config_.leaky_slope);
        width = config_.head[i];
    }
    head_.emplace_back("head.out", width, 1);
    for (auto& l : head_) l.init(rng);
}

Tensor Discriminator::forward(const Tensor& images, Mode mode) {
    require(images.c() == 1, "Discriminator: expected single-channel images");
    if (images.h() != config_.rows || images.w() != config_.cols) {
        throw ContractError("Discriminator: configured for " + std::to_string(config_.rows) + "x" +
                            std::to_string(config_.cols) + ", got " + images.shape_string());
    }
    Tensor x = images;
    for (auto& st : stages_) x = st.forward(x, mode, rng_);
    for (std::size_t i = 0; i < head_acts_.size(); ++i) x = head_acts_[i].forward(head_[i].forward(x));
    return sigmoid_.forward(head_.back().forward(x));
}

Tensor Discriminator::backward(const Tensor& grad_prob) {
    Tensor g = head_.back().backward(sigmoid_.backward(grad_prob));
    for (std::size_t i = head_acts_.size(); i-- > 0;) g = head_[i].backward(head_acts_[i].backward(g));
    g = g.reshaped(g.n(), flat_c_, flat_h_, flat_w_);
    for (std::size_t i = stages_.size(); i-- > 0;) g = stages_[i].backward(g);
    return g;
}

double Discriminator::score(const Image2D& image) {
    Tensor t(1, 1, image.rows(), image.cols());
    std::copy(image.storage().begin(), image.storage().end(), t.data());
    return forward(t, Mode::eval)[0];
}

Discriminator Discriminator::resized(int rows, int cols, std::uint64_t seed) const {
    Discriminator out = *this;
    out.config_.rows = rows;
    out.config_.cols = cols;
    out.config_.validate();
    out.rng_ = nn::Rng(seed ^ 0x9e3779b97f4a7c15ull);
    out.build_head(seed);
    return out;
}

std::vector<nn::Parameter*> Discriminator::parameters() {
    std::vector<nn::Parameter*> out;
    for (auto& st : stages_) {
        auto ps = st.parameters();
        out.insert(out.end(), ps.begin(), ps.end());
    }
    for (auto& l : head_) {
        auto ps = l.parameters();
        out.insert(out.end(), ps.begin(), ps.end());
    }
    return out;
}

std::size_t Discriminator::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
}

nn::Archive Discriminator::to_archive() {
    return make_archive("discriminator", config_.to_json(), parameters(), {});
}

void Discriminator::load_archive(const nn::Archive& archive) {
    restore_archive(archive, "discriminator", config_.to_json(), parameters(), {});
}

Discriminator Discriminator::from_archive(const nn::Archive& archive) {
    if (archive.kind != "discriminator") throw CheckpointError("checkpoint does not hold a discriminator");
    Discriminator d(DiscriminatorConfig::from_json(archive.config_json), 0);
    d.load_archive(archive);
    return d;
}

Tensor images_to_tensor(const std::vector<const Image2D*>& images) {
    require(!images.empty(), "images_to_tensor: empty batch");
    Tensor t(static_cast<int>(images.size()), 1, images[0]->rows(), images[0]->cols());
    for (std::size_t n = 0; n < images.size(); ++n) {
        require(images[n]->same_shape(*images[0]), "images_to_tensor: shapes differ");
        std::copy(images[n]->storage().begin(), images[n]->storage().end(), t.sample(static_cast<int>(n)));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Checkpoint helpers

void save_checkpoint(const std::filesystem::path& path, DeformNet& net) { nn::write_archive(path, net.to_archive()); }
void save_checkpoint(const std::filesystem::path& path, ShapeVae& net) { nn::write_archive(path, net.to_archive()); }
void save_checkpoint(const std::filesystem::path& path, Discriminator& net) {
    nn::write_archive(path, net.to_archive());
}

DeformNet load_deform_net(const std::filesystem::path& path) { return DeformNet::from_archive(nn::read_archive(path)); }

DeformNet load_deform_net(const std::filesystem::path& path, const DeformNetConfig& expected) {
    const auto archive = nn::read_archive(path);
    DeformNet net(expected, 0);
    net.load_archive(archive);
    return net;
}

ShapeVae load_vae(const std::filesystem::path& path) { return ShapeVae::from_archive(nn::read_archive(path)); }

Discriminator load_discriminator(const std::filesystem::path& path) {
    return Discriminator::from_archive(nn::read_archive(path));
}

}  // namespace echoreg
