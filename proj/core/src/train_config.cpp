#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "echoreg/train.hpp"

namespace echoreg {

using nlohmann::json;

const char* to_string(RegistrationMode mode) {
    switch (mode) {
        case RegistrationMode::van: return "van";
        case RegistrationMode::vm: return "vm";
        case RegistrationMode::ac: return "ac";
        case RegistrationMode::ddc: return "ddc";
        case RegistrationMode::ddc_ac: return "ddc-ac";
    }
    return "?";
}

RegistrationMode parse_mode(const std::string& text) {
    for (auto m : {RegistrationMode::van, RegistrationMode::vm, RegistrationMode::ac, RegistrationMode::ddc,
                   RegistrationMode::ddc_ac}) {
        if (text == to_string(m)) return m;
    }
    throw ConfigError("unknown mode '" + text + "' (expected van, vm, ac, ddc or ddc-ac)");
}

const char* mode_label(RegistrationMode mode) {
    switch (mode) {
        case RegistrationMode::van: return "VanDLIR";
        case RegistrationMode::vm: return "VoxelMorph-like";
        case RegistrationMode::ac: return "AC-DLIR";
        case RegistrationMode::ddc: return "DdC-DLIR";
        case RegistrationMode::ddc_ac: return "DdC-AC-DLIR";
    }
    return "?";
}

LossWeights mode_weights(RegistrationMode mode, const LossWeights& base) {
    LossWeights w = base;
    const bool lac = mode == RegistrationMode::vm || mode == RegistrationMode::ac || mode == RegistrationMode::ddc_ac;
    const bool gac = mode == RegistrationMode::ac || mode == RegistrationMode::ddc_ac;
    const bool ddc = mode == RegistrationMode::ddc || mode == RegistrationMode::ddc_ac;
    if (!lac) w.lambda_lac = 0.0;
    if (!gac) w.lambda_gac = 0.0;
    if (!ddc) w.lambda_ddc = 0.0;
    return w;
}

bool mode_needs_vae(RegistrationMode mode) {
    return mode == RegistrationMode::ac || mode == RegistrationMode::ddc_ac;
}

void TrainConfig::validate() const {
    try {
        weights.validate();
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    if (scales.empty()) throw ConfigError("scales must not be empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (i > 0 && scales[i] <= scales[i - 1]) throw ConfigError("scales must be strictly increasing");
    }
    const DeformNetConfig dc = deform_config();
    dc.validate();
    for (int s : scales) {
        if (s < kMinRasterSide || s % dc.size_multiple() != 0) {
            throw ConfigError("scale " + std::to_string(s) + " is not a multiple of " +
                              std::to_string(dc.size_multiple()) + " of at least " + std::to_string(kMinRasterSide));
        }
        if (active_weights().lambda_ddc > 0.0 && s % 16 != 0) {
            throw ConfigError("scale " + std::to_string(s) + " must be a multiple of 16 for the discriminator");
        }
    }
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (epochs < static_cast<int>(scales.size())) throw ConfigError("epochs must cover every scale at least once");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (augmentation.probability < 0.0 || augmentation.probability > 1.0) {
        throw ConfigError("augmentation probability must lie in [0, 1]");
    }
    if (mi_bins < 2) throw ConfigError("mi_bins must be >= 2");
    vae_config().validate();
    if (vae_epochs < 1) throw ConfigError("vae_epochs must be >= 1");
    if (vae_lr <= 0.0) throw ConfigError("vae_lr must be positive");
    if (vae_batch_size < 1) throw ConfigError("vae_batch_size must be >= 1");
    if (kl_weight < 0.0) throw ConfigError("kl_weight must be non-negative");
    if (ssim_window < 1 || ssim_window % 2 == 0 || ssim_window > vae_size) {
        throw ConfigError("ssim_window must be odd and no larger than vae_size");
    }
    if (ssim_c1 <= 0.0 || ssim_c2 <= 0.0) throw ConfigError("SSIM constants must be positive");
}

std::string TrainConfig::to_json() const {
    json j;
    j["mode"] = to_string(mode);
    j["weights"] = {{"lambda_r", weights.lambda_r},
                    {"lambda_lac", weights.lambda_lac},
                    {"lambda_gac", weights.lambda_gac},
                    {"lambda_ddc", weights.lambda_ddc}};
    j["scales"] = scales;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    j["augment"] = augment;
    j["augmentation"] = {{"probability", augmentation.probability},
                         {"flip", augmentation.flip},
                         {"motion_blur", augmentation.motion_blur},
                         {"gaussian_blur", augmentation.gaussian_blur},
                         {"defocus", augmentation.defocus},
                         {"clahe", augmentation.clahe}};
    j["mi_bins"] = mi_bins;
    j["deform_channels"] = deform_channels;
    j["latent_dim"] = latent_dim;
    j["vae_size"] = vae_size;
    j["vae_epochs"] = vae_epochs;
    j["vae_lr"] = vae_lr;
    j["vae_batch_size"] = vae_batch_size;
    j["kl_weight"] = kl_weight;
    j["ssim_window"] = ssim_window;
    j["ssim_c1"] = ssim_c1;
    j["ssim_c2"] = ssim_c2;
    return j.dump(2);
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    try {
        const json j = json::parse(text);
        if (!j.is_object()) throw ConfigError("train config must be a JSON object");
        reject_unknown(j,
                       {"mode", "weights", "scales", "epochs", "batch_size", "lr", "beta1", "beta2", "weight_decay",
                        "seed", "augment", "augmentation", "mi_bins", "deform_channels", "latent_dim", "vae_size",
                        "vae_epochs", "vae_lr", "vae_batch_size", "kl_weight", "ssim_window", "ssim_c1", "ssim_c2"},
                       "train config");
        if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
        if (j.contains("weights")) {
            const auto& w = j.at("weights");
            reject_unknown(w, {"lambda_r", "lambda_lac", "lambda_gac", "lambda_ddc"}, "weights");
            c.weights.lambda_r = w.value("lambda_r", c.weights.lambda_r);
            c.weights.lambda_lac = w.value("lambda_lac", c.weights.lambda_lac);
            c.weights.lambda_gac = w.value("lambda_gac", c.weights.lambda_gac);
            c.weights.lambda_ddc = w.value("lambda_ddc", c.weights.lambda_ddc);
        }
        if (j.contains("scales")) c.scales = j.at("scales").get<std::vector<int>>();
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.seed = j.value("seed", c.seed);
        c.augment = j.value("augment", c.augment);
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            reject_unknown(a, {"probability", "flip", "motion_blur", "gaussian_blur", "defocus", "clahe"},
                           "augmentation");
            c.augmentation.probability = a.value("probability", c.augmentation.probability);
            c.augmentation.flip = a.value("flip", c.augmentation.flip);
            c.augmentation.motion_blur = a.value("motion_blur", c.augmentation.motion_blur);
            c.augmentation.gaussian_blur = a.value("gaussian_blur", c.augmentation.gaussian_blur);
            c.augmentation.defocus = a.value("defocus", c.augmentation.defocus);
            c.augmentation.clahe = a.value("clahe", c.augmentation.clahe);
        }
        c.mi_bins = j.value("mi_bins", c.mi_bins);
        if (j.contains("deform_channels")) c.deform_channels = j.at("deform_channels").get<std::vector<int>>();
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.vae_size = j.value("vae_size", c.vae_size);
        c.vae_epochs = j.value("vae_epochs", c.vae_epochs);
        c.vae_lr = j.value("vae_lr", c.vae_lr);
        c.vae_batch_size = j.value("vae_batch_size", c.vae_batch_size);
        c.kl_weight = j.value("kl_weight", c.kl_weight);
        c.ssim_window = j.value("ssim_window", c.ssim_window);
        c.ssim_c1 = j.value("ssim_c1", c.ssim_c1);
        c.ssim_c2 = j.value("ssim_c2", c.ssim_c2);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid train config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void TrainConfig::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << to_json() << '\n';
        if (!out) throw IoError("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

DeformNetConfig TrainConfig::deform_config() const {
    DeformNetConfig c;
    c.channels = deform_channels;
    return c;
}

VaeConfig TrainConfig::vae_config() const { return VaeConfig{vae_size, latent_dim}; }

nn::AdamOptions TrainConfig::adam() const {
    nn::AdamOptions o;
    o.lr = lr;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.weight_decay = weight_decay;
    return o;
}

nn::AdamOptions TrainConfig::vae_adam() const {
    nn::AdamOptions o = adam();
    o.lr = vae_lr;
    return o;
}

VaeLossOptions TrainConfig::vae_loss_options() const { return VaeLossOptions{ssim_window, ssim_c1, ssim_c2, kl_weight}; }

int TrainConfig::epochs_for_scale(std::size_t i) const {
    const int n = static_cast<int>(scales.size());
    const int base = epochs / n;
    // Leftover epochs go to the finest scales.
    return base + (static_cast<int>(i) >= n - epochs % n ? 1 : 0);
}

}  // namespace echoreg
