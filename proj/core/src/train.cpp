#include "echoreg/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "echoreg/metrics.hpp"

namespace echoreg {

namespace {

using Clock = std::chrono::steady_clock;

std::mt19937_64 stage_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

// Fisher-Yates on an explicit engine; std::shuffle's draw pattern is
// implementation-defined.
std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
}

void axpy(DisplacementField& dst, double a, const DisplacementField& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst.dy()[i] += a * src.dy()[i];
        dst.dx()[i] += a * src.dx()[i];
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

// Output files shared by all scales of one run.
class RunWriter {
public:
    RunWriter(const RunOptions& opt, const TrainConfig& cfg) : opt_(opt) {
        if (opt.out_dir.empty()) return;
        root_ = opt.out_dir / opt.run_id;
        std::filesystem::create_directories(root_);
        cfg.save(root_ / "config.json");
        csv_.open(root_ / "train_log.csv", std::ios::trunc);
        if (!csv_) throw IoError("cannot write '" + (root_ / "train_log.csv").string() + "'");
        csv_ << epoch_csv_header() << '\n';
    }

    void epoch(const EpochLog& log) {
        if (csv_.is_open()) csv_ << epoch_csv_row(log) << '\n' << std::flush;
        if (opt_.on_epoch) opt_.on_epoch(log);
    }

    void checkpoint(int scale, int epoch, int last_epoch, DeformNet& net, std::optional<Discriminator>& disc) {
        if (root_.empty()) return;
        const bool due = epoch == last_epoch || (opt_.checkpoint_every > 0 && epoch % opt_.checkpoint_every == 0);
        if (!due) return;
        const auto dir = root_ / std::to_string(scale);
        std::filesystem::create_directories(dir);
        save_checkpoint(dir / (std::to_string(epoch) + ".ckpt"), net);
        if (disc) save_checkpoint(dir / (std::to_string(epoch) + ".disc.ckpt"), *disc);
    }

private:
    const RunOptions& opt_;
    std::filesystem::path root_;
    std::ofstream csv_;
};

struct TermSums {
    double total = 0, mi = 0, bending = 0, dice = 0, latent_l2 = 0, g_loss = 0, d_loss = 0;
    std::size_t samples = 0;
};

class RegistrationTrainer {
public:
    RegistrationTrainer(const TrainConfig& cfg, ShapeVae* vae, const nn::Archive* initial)
        : cfg_(cfg), w_(cfg.active_weights()), net_(cfg.deform_config(), cfg.seed), vae_(vae) {
        if (initial) net_.load_archive(*initial);
        if (w_.lambda_gac > 0.0 && vae_ == nullptr) {
            throw ConfigError(std::string("mode ") + to_string(cfg.mode) + " needs a pretrained shape VAE");
        }
    }

    void run_scale(const RegistrationSet& train, const RegistrationSet& val, std::size_t stage, int epochs,
                   const RunOptions& opt, RunWriter& writer, std::vector<EpochLog>& log) {
        require(!train.empty(), "training set is empty");
        const int H = train.front().fixed.rows(), W = train.front().fixed.cols();
        for (const auto& s : train) {
            require(s.fixed.same_shape(H, W) && s.moving.same_shape(H, W) && s.fixed_mask.same_shape(H, W) &&
                        s.moving_mask.same_shape(H, W),
                    "training samples differ in shape");
        }
        if (w_.lambda_ddc > 0.0) {
            const std::uint64_t dseed = cfg_.seed + 1 + stage;
            if (!disc_) {
                DiscriminatorConfig dc;
                dc.rows = H;
                dc.cols = W;
                disc_.emplace(dc, dseed);
            } else if (disc_->config().rows != H || disc_->config().cols != W) {
                disc_ = disc_->resized(H, W, dseed);
            }
        }

        std::mt19937_64 rng = stage_rng(cfg_.seed, stage);
        nn::Adam opt_g(net_.parameters(), cfg_.adam());
        std::optional<nn::Adam> opt_d;
        if (disc_) opt_d.emplace(disc_->parameters(), cfg_.adam());

        for (int epoch = 1; epoch <= epochs; ++epoch) {
            const auto t0 = Clock::now();
            TermSums sums;
            const auto order = shuffled(train.size(), rng);
            for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
                std::vector<RegistrationSample> batch;
                for (std::size_t k = b; k < std::min(order.size(), b + cfg_.batch_size); ++k) {
                    const auto& s = train[order[k]];
                    if (cfg_.augment) {
                        auto a = augment_registration_pair(s.fixed, s.moving, s.fixed_mask, s.moving_mask, rng,
                                                           cfg_.augmentation);
                        batch.push_back({s.id, std::move(a.fixed), std::move(a.moving), std::move(a.fixed_mask),
                                         std::move(a.moving_mask)});
                    } else {
                        batch.push_back(s);
                    }
                }
                step(batch, opt_g, opt_d, sums);
            }

            EpochLog e;
            e.scale = H;
            e.epoch = epoch;
            const double n = static_cast<double>(sums.samples);
            e.total = sums.total / n;
            e.mi = sums.mi / n;
            e.bending = sums.bending / n;
            e.dice = sums.dice / n;
            e.latent_l2 = sums.latent_l2 / n;
            e.g_loss = sums.g_loss / n;
            e.d_loss = sums.d_loss / n;
            if (!val.empty() && opt.val_every > 0 && (epoch % opt.val_every == 0 || epoch == epochs)) {
                validate(val, e);
            }
            e.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
            log.push_back(e);
            writer.epoch(e);
            writer.checkpoint(H, epoch, epochs, net_, disc_);
        }
    }

    RegistrationResult finish(std::vector<EpochLog> log) {
        return RegistrationResult{std::move(net_), std::move(disc_), std::move(log)};
    }

private:
    void step(const std::vector<RegistrationSample>& batch, nn::Adam& opt_g, std::optional<nn::Adam>& opt_d,
              TermSums& sums) {
        const int n = static_cast<int>(batch.size());
        const int H = batch.front().fixed.rows(), W = batch.front().fixed.cols();
        const std::size_t plane = static_cast<std::size_t>(H) * W;

        nn::Tensor pairs(n, 2, H, W);
        for (int i = 0; i < n; ++i) {
            std::copy(batch[i].fixed.storage().begin(), batch[i].fixed.storage().end(), pairs.sample(i));
            std::copy(batch[i].moving.storage().begin(), batch[i].moving.storage().end(), pairs.sample(i) + plane);
        }
        opt_g.zero_grad();
        const nn::Tensor fields = net_.forward(pairs);

        std::vector<DisplacementField> u(n), du(n);
        std::vector<Image2D> warped(n);
        std::vector<Grid<double>> d_warped(n);
        std::vector<LossTerms> terms(n);
        for (int i = 0; i < n; ++i) {
            u[i] = field_from_tensor(fields, i);
            du[i] = DisplacementField(H, W);
            warped[i] = warp_intensity(batch[i].moving, u[i]);
        }

        // Discriminator step on (fixed = real, warped = fake), one 2n batch.
        if (disc_) {
            nn::Tensor imgs(2 * n, 1, H, W);
            for (int i = 0; i < n; ++i) {
                std::copy(batch[i].fixed.storage().begin(), batch[i].fixed.storage().end(), imgs.sample(i));
                std::copy(warped[i].storage().begin(), warped[i].storage().end(), imgs.sample(n + i));
            }
            opt_d->zero_grad();
            const nn::Tensor p = disc_->forward(imgs, nn::Mode::train);
            nn::Tensor g(2 * n, 1, 1, 1);
            for (int i = 0; i < n; ++i) {
                const auto a = adversarial_losses(p[i], p[n + i]);
                sums.d_loss += a.d_loss;
                g[i] = a.dd_dreal / n;
                g[n + i] = a.dd_dfake / n;
            }
            disc_->backward(g);
            opt_d->step();
        }

        // Intensity similarity and smoothness.
        for (int i = 0; i < n; ++i) {
            const auto mi = mutual_information_grad(batch[i].fixed, warped[i], cfg_.mi_bins);
            terms[i].mi = mi.value;
            d_warped[i] = Grid<double>(H, W, 0.0);
            for (std::size_t k = 0; k < plane; ++k) d_warped[i][k] = -mi.d_warped[k];
            const auto be = bending_energy_grad(u[i]);
            terms[i].bending = be.value;
            axpy(du[i], w_.lambda_r, be.d_field);
        }

        // Anatomical terms on softly warped masks.
        const bool anatomic_grad = w_.lambda_lac > 0.0 || w_.lambda_gac > 0.0;
        std::vector<ProbMaps> moving_maps(n), fg_warped(n), fg_fixed(n), d_fg(n);
        for (int i = 0; i < n; ++i) {
            moving_maps[i] = one_hot(batch[i].moving_mask, kNumLabels);
            fg_warped[i] = foreground(soft_warp_probmaps(moving_maps[i], u[i]));
            fg_fixed[i] = foreground(one_hot(batch[i].fixed_mask, kNumLabels));
            d_fg[i] = ProbMaps(2, H, W);
            if (w_.lambda_lac > 0.0) {
                const auto g = local_anatomic_similarity_grad(fg_fixed[i], fg_warped[i]);
                terms[i].dice = g.value;
                auto dst = d_fg[i].values();
                const auto src = g.d_warped.values();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] -= w_.lambda_lac * src[k];
            } else {
                terms[i].dice = local_anatomic_similarity(fg_fixed[i], fg_warped[i]);
            }
        }
        if (w_.lambda_gac > 0.0) {
            std::vector<ProbMaps> both = fg_warped;
            both.insert(both.end(), fg_fixed.begin(), fg_fixed.end());
            const auto z = vae_->encode_mean_batch(both);
            std::vector<LatentVector> dz(2 * n, LatentVector(z.front().dim()));
            for (int i = 0; i < n; ++i) {
                const auto g = global_anatomic_similarity_grad(z[n + i], z[i]);
                terms[i].latent_l2 = g.value;
                for (std::size_t k = 0; k < dz[i].dim(); ++k) dz[i][k] = w_.lambda_gac * g.d_warped[k];
            }
            const auto back = vae_->encode_mean_batch_backward(dz);
            for (int i = 0; i < n; ++i) {
                auto dst = d_fg[i].values();
                const auto src = back[i].values();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }

        // Adversarial generator term against the freshly updated discriminator.
        if (disc_) {
            nn::Tensor imgs(n, 1, H, W);
            for (int i = 0; i < n; ++i) std::copy(warped[i].storage().begin(), warped[i].storage().end(), imgs.sample(i));
            const nn::Tensor p = disc_->forward(imgs, nn::Mode::train);
            nn::Tensor g(n, 1, 1, 1);
            for (int i = 0; i < n; ++i) {
                const auto a = adversarial_losses(0.5, p[i]);
                terms[i].g_loss = a.g_loss;
                g[i] = w_.lambda_ddc * a.dg_dfake;
            }
            const nn::Tensor gi = disc_->backward(g);
            for (int i = 0; i < n; ++i)
                for (std::size_t k = 0; k < plane; ++k) d_warped[i][k] += gi.sample(i)[k];
        }

        // Chain everything back to the displacement fields.
        for (int i = 0; i < n; ++i) {
            const auto wg = warp_intensity_backward(batch[i].moving, u[i], d_warped[i]);
            axpy(du[i], 1.0, wg.field);
            if (anatomic_grad) {
                ProbMaps full(kNumLabels, H, W);
                for (int c = 0; c < 2; ++c) {
                    const auto src = d_fg[i].channel(c);
                    std::copy(src.begin(), src.end(), full.channel(c + 1).begin());
                }
                axpy(du[i], 1.0, soft_warp_probmaps_backward(moving_maps[i], u[i], full).field);
            }
            for (std::size_t k = 0; k < plane; ++k) {
                du[i].dy()[k] /= n;
                du[i].dx()[k] /= n;
            }
            sums.total += total_objective(terms[i], w_);
            sums.mi += terms[i].mi;
            sums.bending += terms[i].bending;
            sums.dice += terms[i].dice;
            sums.latent_l2 += terms[i].latent_l2;
            sums.g_loss += terms[i].g_loss;
        }
        sums.samples += n;
        net_.backward(tensor_from_fields(du));
        opt_g.step();
    }

    void validate(const RegistrationSet& val, EpochLog& e) {
        std::vector<double> dsc_all, fg, hd, tu, err;
        for (const auto& s : val) {
            const DisplacementField u = net_.predict(s.fixed, s.moving);
            const Image2D w = warp_intensity(s.moving, u);
            const LabelMask wm = warp_mask(s.moving_mask, u);
            const CaseMetrics m = evaluate_case(s.fixed, s.fixed_mask, w, wm);
            dsc_all.push_back(m.dsc.mean);
            fg.push_back(m.dsc.foreground_mean());
            if (m.hd_mean) hd.push_back(*m.hd_mean);
            if (m.tu) tu.push_back(m.tu->sqrt_mm);
            err.push_back(m.mse);
        }
        e.val_dsc = summarize(dsc_all).mean;
        e.val_fg_dsc = summarize(fg).mean;
        if (!hd.empty()) e.val_hd = summarize(hd).mean;
        if (!tu.empty()) e.val_tu_sqrt = summarize(tu).mean;
        e.val_mse = summarize(err).mean;
    }

    const TrainConfig& cfg_;
    LossWeights w_;
    DeformNet net_;
    ShapeVae* vae_;
    std::optional<Discriminator> disc_;
};

}  // namespace

std::string epoch_csv_header() {
    return "scale,epoch,total,mi,bending,dice,latent_l2,g_loss,d_loss,val_dsc,val_fg_dsc,val_hd_mm,val_tu_sqrt_mm,"
           "val_mse,seconds";
}

std::string epoch_csv_row(const EpochLog& l) {
    std::ostringstream os;
    os << l.scale << ',' << l.epoch << ',' << fmt(l.total) << ',' << fmt(l.mi) << ',' << fmt(l.bending) << ','
       << fmt(l.dice) << ',' << fmt(l.latent_l2) << ',' << fmt(l.g_loss) << ',' << fmt(l.d_loss) << ','
       << fmt(l.val_dsc) << ',' << fmt(l.val_fg_dsc) << ',' << fmt(l.val_hd) << ',' << fmt(l.val_tu_sqrt) << ','
       << fmt(l.val_mse) << ',' << fmt(l.seconds);
    return os.str();
}

RegistrationSample make_sample(const CaseRecord& rec) {
    return RegistrationSample{rec.id, rec.ed().image, rec.es().image, rec.ed().mask, rec.es().mask};
}

RegistrationSet resize_set(const RegistrationSet& set, int size) {
    RegistrationSet out;
    out.reserve(set.size());
    for (const auto& s : set) {
        out.push_back({s.id, resize(s.fixed, size, size), resize(s.moving, size, size),
                       resize(s.fixed_mask, size, size), resize(s.moving_mask, size, size)});
    }
    return out;
}

RegistrationResult train_registration(const RegistrationSet& train, const RegistrationSet& val,
                                      const TrainConfig& config, ShapeVae* vae, const RunOptions& options) {
    config.validate();
    RegistrationTrainer trainer(config, vae, options.initial_net);
    RunWriter writer(options, config);
    std::vector<EpochLog> log;
    trainer.run_scale(train, val, 0, config.epochs, options, writer, log);
    return trainer.finish(std::move(log));
}

RegistrationResult multiscale_train(const RegistrationSet& train, const RegistrationSet& val,
                                    const TrainConfig& config, ShapeVae* vae, const RunOptions& options) {
    config.validate();
    RegistrationTrainer trainer(config, vae, options.initial_net);
    RunWriter writer(options, config);
    std::vector<EpochLog> log;
    for (std::size_t i = 0; i < config.scales.size(); ++i) {
        const int s = config.scales[i];
        trainer.run_scale(resize_set(train, s), resize_set(val, s), i, config.epochs_for_scale(i), options, writer,
                          log);
    }
    return trainer.finish(std::move(log));
}

Registered register_pair(DeformNet& net, const Image2D& fixed, const Image2D& moving, const LabelMask& moving_mask,
                         int scale) {
    require(fixed.same_shape(moving) && fixed.same_shape(moving_mask), "register_pair: shape mismatch");
    DisplacementField u = net.predict(resize(fixed, scale, scale), resize(moving, scale, scale));
    if (!fixed.same_shape(scale, scale)) u = resize(u, fixed.rows(), fixed.cols());
    Registered r{u, warp_intensity(moving, u), warp_mask(moving_mask, u)};
    return r;
}

std::vector<CaseMetrics> evaluate_set(DeformNet* net, const RegistrationSet& set, int scale,
                                      const EvaluateOptions& options) {
    std::vector<CaseMetrics> out;
    out.reserve(set.size());
    for (const auto& s : set) {
        if (net == nullptr) {
            out.push_back(evaluate_case(s.fixed, s.fixed_mask, s.moving, s.moving_mask, options));
        } else {
            const Registered r = register_pair(*net, s.fixed, s.moving, s.moving_mask, scale);
            out.push_back(evaluate_case(s.fixed, s.fixed_mask, r.warped, r.warped_mask, options));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// VAE

ProbMaps vae_input(const LabelMask& mask, int size) {
    const ProbMaps fg = foreground(one_hot(mask, kNumLabels));
    if (fg.rows() == size && fg.cols() == size) return fg;
    PlaneResampler rs(fg.rows(), fg.cols(), size, size);
    ProbMaps out(2, size, size);
    for (int c = 0; c < 2; ++c) rs.forward(fg.channel(c), out.channel(c));
    return out;
}

double vae_roundtrip_dice(ShapeVae& vae, const std::vector<LabelMask>& masks) {
    require(!masks.empty(), "vae_roundtrip_dice: no masks");
    double total = 0.0;
    for (const auto& m : masks) {
        const ProbMaps x = vae_input(m, vae.config().size);
        const ProbMaps r = vae.reconstruct(foreground(one_hot(m, kNumLabels)));
        double per = 0.0;
        for (int c = 0; c < 2; ++c) {
            const auto a = x.channel(c), b = r.channel(c);
            double na = 0, nb = 0, both = 0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const bool ia = a[k] > 0.5, ib = b[k] > 0.5;
                na += ia;
                nb += ib;
                both += ia && ib;
            }
            per += na + nb == 0 ? 1.0 : 2.0 * both / (na + nb);
        }
        total += per / 2.0;
    }
    return total / static_cast<double>(masks.size());
}

VaeTrainResult pretrain_vae(const std::vector<LabelMask>& train, const std::vector<LabelMask>& heldout,
                            const TrainConfig& config, const RunOptions& options) {
    if (train.empty()) throw ContractError("pretrain_vae: empty dataset");
    config.validate();
    const int S = config.vae_size;
    const int d = config.latent_dim;
    const auto loss_opt = config.vae_loss_options();

    VaeTrainResult result{ShapeVae(config.vae_config(), config.seed + 7), {}, std::numeric_limits<double>::quiet_NaN()};
    ShapeVae& vae = result.vae;
    nn::Adam opt(vae.parameters(), config.vae_adam());
    std::mt19937_64 rng = stage_rng(config.seed, 1000);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    std::vector<ProbMaps> inputs, flipped;
    for (const auto& m : train) {
        inputs.push_back(vae_input(m, S));
        flipped.push_back(vae_input(flip_horizontal(m), S));
    }

    std::ofstream csv;
    if (!options.out_dir.empty()) {
        const auto root = options.out_dir / options.run_id;
        std::filesystem::create_directories(root);
        csv.open(root / "vae_log.csv", std::ios::trunc);
        csv << "epoch,loss,dice,ssim,kl,heldout_dice\n";
    }

    const std::size_t plane = static_cast<std::size_t>(S) * S;
    for (int epoch = 1; epoch <= config.vae_epochs; ++epoch) {
        VaeEpochLog e;
        e.epoch = epoch;
        const auto order = shuffled(inputs.size(), rng);
        for (std::size_t b = 0; b < order.size(); b += config.vae_batch_size) {
            const int n = static_cast<int>(std::min<std::size_t>(config.vae_batch_size, order.size() - b));
            nn::Tensor x(n, 2, S, S);
            std::vector<const ProbMaps*> src(n);
            for (int i = 0; i < n; ++i) {
                const bool flip = config.augment && config.augmentation.flip && uni(rng) < config.augmentation.probability;
                src[i] = flip ? &flipped[order[b + i]] : &inputs[order[b + i]];
                std::copy(src[i]->values().begin(), src[i]->values().end(), x.sample(i));
            }
            opt.zero_grad();
            const auto enc = vae.encode(x, nn::Mode::train);
            nn::Tensor eps(n, d, 1, 1), z(n, d, 1, 1);
            for (std::size_t k = 0; k < z.size(); ++k) {
                eps[k] = normal(rng);
                z[k] = enc.mu[k] + std::exp(0.5 * enc.logvar[k]) * eps[k];
            }
            const nn::Tensor recon = vae.decode(z, nn::Mode::train);

            nn::Tensor d_recon(n, 2, S, S), d_mu(n, d, 1, 1), d_lv(n, d, 1, 1);
            for (int i = 0; i < n; ++i) {
                ProbMaps r(2, S, S);
                std::copy(recon.sample(i), recon.sample(i) + 2 * plane, r.values().begin());
                const LatentVector mu(std::vector<double>(enc.mu.sample(i), enc.mu.sample(i) + d));
                const LatentVector lv(std::vector<double>(enc.logvar.sample(i), enc.logvar.sample(i) + d));
                const auto g = vae_loss_grad(*src[i], r, mu, lv, loss_opt);
                e.loss += g.terms.total;
                e.dice += g.terms.dice;
                e.ssim += g.terms.ssim;
                e.kl += g.terms.kl;
                const auto gr = g.d_recon.values();
                for (std::size_t k = 0; k < gr.size(); ++k) d_recon.sample(i)[k] = gr[k] / n;
                for (int k = 0; k < d; ++k) {
                    d_mu.sample(i)[k] = g.d_mu[k] / n;
                    d_lv.sample(i)[k] = g.d_logvar[k] / n;
                }
            }
            const nn::Tensor dz = vae.decode_backward(d_recon);
            for (std::size_t k = 0; k < dz.size(); ++k) {
                d_mu[k] += dz[k];
                d_lv[k] += dz[k] * eps[k] * 0.5 * std::exp(0.5 * enc.logvar[k]);
            }
            vae.encode_backward(d_mu, d_lv);
            opt.step();
        }
        const double n = static_cast<double>(inputs.size());
        e.loss /= n;
        e.dice /= n;
        e.ssim /= n;
        e.kl /= n;
        if (!heldout.empty() && (epoch == config.vae_epochs || (options.val_every > 0 && epoch % options.val_every == 0))) {
            e.heldout_dice = vae_roundtrip_dice(vae, heldout);
        }
        if (csv.is_open()) {
            csv << epoch << ',' << fmt(e.loss) << ',' << fmt(e.dice) << ',' << fmt(e.ssim) << ',' << fmt(e.kl) << ','
                << fmt(e.heldout_dice) << '\n'
                << std::flush;
        }
        result.log.push_back(e);
    }
    if (!heldout.empty()) result.heldout_dice = *result.log.back().heldout_dice;
    if (!options.out_dir.empty()) save_checkpoint(options.out_dir / options.run_id / "vae.ckpt", vae);
    return result;
}

}  // namespace echoreg
