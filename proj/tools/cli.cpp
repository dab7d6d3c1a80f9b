#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "echoreg/baseline.hpp"
#include "echoreg/data.hpp"
#include "echoreg/metrics.hpp"
#include "echoreg/nn/archive.hpp"
#include "echoreg/train.hpp"

#ifndef ECHOREG_VERSION
#define ECHOREG_VERSION "0.0.0"
#endif
#ifndef ECHOREG_GIT_DESCRIBE
#define ECHOREG_GIT_DESCRIBE "unknown"
#endif

namespace echoreg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string artifact_version() { return std::string(ECHOREG_VERSION) + "+" + ECHOREG_GIT_DESCRIBE; }

namespace {

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw IoError("failed writing '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

}  // namespace

std::string RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config_json.empty() ? json(nullptr) : json::parse(config_json);
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["version"] = version;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
}

void RunManifest::write(const fs::path& path) const { write_text_atomic(path, to_json()); }

namespace {

// ---------------------------------------------------------------------------
// Dataset helpers

using SplitIds = std::map<std::string, std::vector<std::string>>;

struct DataArgs {
    std::string data;
    std::string view = "2CH";
    bool drop_atrium = false;
    std::string splits;
    std::string subset;
};

void add_data_options(CLI::App* app, DataArgs& d, bool required = true) {
    auto* o = app->add_option("--data", d.data, "Dataset root, or a single case directory");
    if (required) o->required();
    app->add_option("--view", d.view, "CAMUS view tag")->check(CLI::IsMember({"2CH", "4CH"}));
    app->add_flag("--drop-atrium", d.drop_atrium, "Map CAMUS label 3 (left atrium) to background");
    app->add_option("--splits", d.splits, "splits.json written by `train` or `train-vae`");
    app->add_option("--subset", d.subset, "Restrict to one split")->check(CLI::IsMember({"train", "val", "test"}));
}

std::vector<CaseRecord> load_cases(const DataArgs& d) {
    CamusOptions opt;
    opt.view = d.view;
    opt.drop_atrium = d.drop_atrium;
    const fs::path root(d.data);
    std::vector<fs::path> dirs;
    if (fs::exists(root / ("Info_" + d.view + ".cfg"))) {
        dirs.push_back(root);
    } else {
        dirs = list_camus_cases(root, opt);
    }
    if (dirs.empty()) throw IoError("no cases under '" + root.string() + "'");

    std::optional<std::set<std::string>> keep;
    if (!d.subset.empty()) {
        if (d.splits.empty()) throw ConfigError("--subset needs --splits");
        std::ifstream in(d.splits);
        if (!in) throw IoError("cannot read '" + d.splits + "'");
        json j;
        try {
            in >> j;
            keep.emplace();
            for (const auto& id : j.at(d.subset)) keep->insert(id.get<std::string>());
        } catch (const json::exception& e) {
            throw FormatError("'" + d.splits + "': " + e.what());
        }
    }
    std::vector<CaseRecord> cases;
    for (const auto& dir : dirs) {
        if (keep && !keep->count(dir.filename().string())) continue;
        cases.push_back(load_camus_case(dir, opt));
    }
    if (cases.empty()) throw IoError("no cases selected under '" + root.string() + "'");
    return cases;
}

SplitIds split_ids(const std::vector<CaseRecord>& cases, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& c : cases) ids.push_back(c.id);
    const Splits s = make_splits(ids, {0.8, 0.1, 0.1}, seed);
    SplitIds out;
    for (auto [name, idx] : {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}}) {
        auto& v = out[name];
        for (auto i : *idx) v.push_back(ids[i]);
    }
    return out;
}

std::vector<const CaseRecord*> select(const std::vector<CaseRecord>& cases, const std::vector<std::string>& ids) {
    std::vector<const CaseRecord*> out;
    for (const auto& id : ids)
        for (const auto& c : cases)
            if (c.id == id) out.push_back(&c);
    return out;
}

RegistrationSet to_set(const std::vector<const CaseRecord*>& cases) {
    RegistrationSet s;
    for (const auto* c : cases) s.push_back(make_sample(*c));
    return s;
}

/// Registration samples resampled to a square side when the data is not square.
RegistrationSet square_set(const RegistrationSet& set, int side) {
    for (const auto& s : set)
        if (!s.fixed.same_shape(side, side)) return resize_set(set, side);
    return set;
}

void write_mask_camus(const fs::path& path, const LabelMask& m) {
    std::vector<double> v(m.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = m[i] == Label::ventricle ? 1.0 : m[i] == Label::myocardium ? 2.0 : 0.0;
    }
    write_mhd(path, m.rows(), m.cols(), m.spacing(), v, MhdType::uchar);
}

// ---------------------------------------------------------------------------
// Config helpers

struct TrainArgs {
    std::string config;
    std::string mode;
    std::vector<int> scales;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

TrainConfig effective_config(const TrainArgs& a) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
    if (!a.mode.empty()) cfg.mode = parse_mode(a.mode);
    if (!a.scales.empty()) cfg.scales = a.scales;
    if (a.seed_set) cfg.seed = a.seed;
    cfg.validate();
    return cfg;
}

void add_train_options(CLI::App* app, TrainArgs& a, bool with_mode) {
    app->add_option("--config", a.config, "Training configuration (JSON)");
    app->add_option("--seed", a.seed, "Seed overriding the configuration")->each([&a](const std::string&) {
        a.seed_set = true;
    });
    if (with_mode) {
        app->add_option("--mode", a.mode, "Objective configuration")
            ->check(CLI::IsMember({"van", "vm", "ac", "ddc", "ddc-ac"}));
        app->add_option("--scales", a.scales, "Comma-separated training sides")->delimiter(',');
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands. Each fills the manifest's inputs/outputs/config as it goes.

struct Context {
    std::ostream& out;
    RunManifest& manifest;
    fs::path out_dir;
};

void set_config(Context& ctx, const std::string& config_json, std::uint64_t seed) {
    ctx.manifest.config_json = config_json;
    ctx.manifest.config_hash = hex64(nn::fnv1a(config_json));
    ctx.manifest.seed = seed;
}

struct PhantomArgs {
    int count = 40;
    std::uint64_t seed = 1;
    int size = 128;
    double amplitude = 0.3;
    int frames = 10;
    double speckle = 0.25;
};

void cmd_phantom(Context& ctx, const PhantomArgs& a) {
    PhantomParams base;
    // The default geometry is drawn for 128 px; keep its proportions.
    const double k = a.size / static_cast<double>(base.size);
    base.size = a.size;
    base.lv_radius_x *= k;
    base.lv_radius_y *= k;
    base.wall = std::max(2.0, base.wall * k);
    base.amplitude = a.amplitude;
    base.frames = a.frames;
    base.speckle = a.speckle;
    base.validate();
    json cfg = json::parse(base.to_json());
    cfg["count"] = a.count;
    set_config(ctx, cfg.dump(), a.seed);

    const fs::path data = ctx.out_dir / "data";
    if (fs::exists(data)) fs::remove_all(data);
    for (int i = 0; i < a.count; ++i) {
        const PhantomParams p = phantom_variant(base, a.seed, i);
        std::ostringstream id;
        id << "phantom" << std::setw(4) << std::setfill('0') << i;
        const CaseRecord rec = generate_phantom(p, id.str());
        export_phantom_case(rec, p, data / rec.id);
    }
    ctx.manifest.outputs.push_back(data.string());
    ctx.out << "wrote " << a.count << " phantom cases to " << data.string() << '\n';
}

void write_splits(const fs::path& path, const SplitIds& s) {
    json j;
    for (const auto& [k, v] : s) j[k] = v;
    write_text_atomic(path, j.dump(2) + "\n");
}

void cmd_train_vae(Context& ctx, const DataArgs& d, const TrainArgs& a, const std::string& run_id) {
    const TrainConfig cfg = effective_config(a);
    set_config(ctx, cfg.to_json(), cfg.seed);
    ctx.manifest.inputs.push_back(d.data);
    const auto cases = load_cases(d);
    const SplitIds ids = split_ids(cases, cfg.seed);
    std::vector<LabelMask> train, held;
    for (const auto* c : select(cases, ids.at("train")))
        for (const auto& f : c->frames) train.push_back(f.mask);
    for (const auto* c : select(cases, ids.at("val")))
        for (const auto& f : c->frames) held.push_back(f.mask);

    RunOptions opt;
    opt.out_dir = ctx.out_dir;
    opt.run_id = run_id;
    opt.val_every = 5;
    const fs::path root = ctx.out_dir / run_id;
    fs::create_directories(root);
    cfg.save(root / "config.json");
    write_splits(root / "splits.json", ids);
    VaeTrainResult r = pretrain_vae(train, held, cfg, opt);
    ctx.manifest.outputs.push_back((root / "vae.ckpt").string());
    ctx.manifest.outputs.push_back((root / "vae_log.csv").string());
    ctx.out << "vae: " << r.log.size() << " epochs, final loss " << fmt(r.log.back().loss)
            << ", held-out round-trip dice " << fmt(r.heldout_dice) << '\n';
}

void cmd_train(Context& ctx, const DataArgs& d, const TrainArgs& a, std::string run_id, const std::string& vae_path,
               int checkpoint_every) {
    const TrainConfig cfg = effective_config(a);
    set_config(ctx, cfg.to_json(), cfg.seed);
    if (run_id.empty()) run_id = to_string(cfg.mode);
    std::optional<ShapeVae> vae;
    if (cfg.active_weights().lambda_gac > 0.0) {
        if (vae_path.empty()) {
            throw CheckpointError(std::string("mode ") + to_string(cfg.mode) + " needs --vae CHECKPOINT");
        }
        vae = load_vae(vae_path);
        ctx.manifest.inputs.push_back(vae_path);
    }
    ctx.manifest.inputs.push_back(d.data);
    const auto cases = load_cases(d);
    const SplitIds ids = split_ids(cases, cfg.seed);
    const int top = cfg.scales.back();
    const RegistrationSet train = square_set(to_set(select(cases, ids.at("train"))), top);
    const RegistrationSet val = square_set(to_set(select(cases, ids.at("val"))), top);

    RunOptions opt;
    opt.out_dir = ctx.out_dir;
    opt.run_id = run_id;
    opt.checkpoint_every = checkpoint_every;
    opt.on_epoch = [&](const EpochLog& e) {
        ctx.out << "scale " << e.scale << " epoch " << e.epoch << " loss " << fmt(e.total);
        if (e.val_fg_dsc) ctx.out << " val_fg_dsc " << fmt(*e.val_fg_dsc);
        ctx.out << '\n' << std::flush;
    };
    RegistrationResult r = multiscale_train(train, val, cfg, vae ? &*vae : nullptr, opt);
    const fs::path root = ctx.out_dir / run_id;
    write_splits(root / "splits.json", ids);
    save_checkpoint(root / "final.ckpt", r.net);
    if (r.discriminator) save_checkpoint(root / "final.disc.ckpt", *r.discriminator);
    for (const char* f : {"final.ckpt", "train_log.csv", "config.json", "splits.json"}) {
        ctx.manifest.outputs.push_back((root / f).string());
    }
    ctx.out << mode_label(cfg.mode) << ": trained " << r.log.size() << " epochs; checkpoint "
            << (root / "final.ckpt").string() << '\n';
}

struct RegisterArgs {
    std::string checkpoint;
    std::string method = "net";
    int scale = 128;
};

void cmd_register(Context& ctx, const DataArgs& d, const RegisterArgs& a) {
    json cfg = {{"method", a.method}, {"scale", a.scale}, {"checkpoint", a.checkpoint}};
    set_config(ctx, cfg.dump(), 0);
    std::optional<DeformNet> net;
    if (a.method == "net") {
        if (a.checkpoint.empty()) throw CheckpointError("register --method net needs --checkpoint");
        net = load_deform_net(a.checkpoint);
        ctx.manifest.inputs.push_back(a.checkpoint);
    }
    ctx.manifest.inputs.push_back(d.data);
    const auto cases = load_cases(d);
    const fs::path fields = ctx.out_dir / "fields", warped = ctx.out_dir / "warped";
    fs::create_directories(fields);
    fs::create_directories(warped);
    for (const auto& c : cases) {
        const Frame &fx = c.ed(), &mv = c.es();
        Registered r;
        if (net) {
            r = register_pair(*net, fx.image, mv.image, mv.mask, a.scale);
        } else {
            r.field = DisplacementField(fx.image.rows(), fx.image.cols());
            r.warped = warp_intensity(mv.image, r.field);
            r.warped_mask = warp_mask(mv.mask, r.field);
        }
        write_field(fields / (c.id + ".ddf"), r.field);
        write_mhd(warped / (c.id + "_ES_warped.mhd"), r.warped.rows(), r.warped.cols(), r.warped.spacing(),
                  r.warped.storage(), MhdType::float32);
        write_mask_camus(warped / (c.id + "_ES_warped_gt.mhd"), r.warped_mask);
    }
    ctx.manifest.outputs.push_back(fields.string());
    ctx.manifest.outputs.push_back(warped.string());
    ctx.out << "registered " << cases.size() << " cases\n";
}

struct EvalArgs {
    std::string fields;
    std::string distance = "mean";
    int tu_lines = kDefaultTuLines;
};

DisplacementField field_for(const CaseRecord& c, const std::string& fields_dir) {
    const Image2D& fx = c.ed().image;
    if (fields_dir.empty()) return DisplacementField(fx.rows(), fx.cols());
    const fs::path p = fs::path(fields_dir) / (c.id + ".ddf");
    if (!fs::exists(p)) throw IoError("missing field '" + p.string() + "'");
    DisplacementField u = read_field(p);
    if (u.rows() != fx.rows() || u.cols() != fx.cols()) {
        throw FormatError("'" + p.string() + "': field shape does not match case '" + c.id + "'");
    }
    return u;
}

void write_metrics(Context& ctx, const std::vector<CaseRecord>& cases, const std::vector<DisplacementField>& fields,
                   const EvaluateOptions& opt) {
    std::ostringstream csv;
    csv << metrics_csv_header() << '\n';
    std::vector<double> dsc, fg, hd, tu, err;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        const Image2D w = warp_intensity(c.es().image, fields[i]);
        const LabelMask wm = warp_mask(c.es().mask, fields[i]);
        const CaseMetrics m = evaluate_case(c.ed().image, c.ed().mask, w, wm, opt);
        csv << metrics_csv_row(c.id, "ES->ED", m) << '\n';
        dsc.push_back(m.dsc.mean);
        fg.push_back(m.dsc.foreground_mean());
        if (m.hd_mean) hd.push_back(*m.hd_mean);
        if (m.tu) tu.push_back(m.tu->sqrt_mm);
        err.push_back(m.mse);
    }
    const fs::path path = ctx.out_dir / "metrics.csv";
    write_text_atomic(path, csv.str());

    std::ostringstream sum;
    sum << "metric,mean,std,count\n";
    for (auto [name, v] : {std::pair{"dsc_mean", &dsc}, {"dsc_foreground", &fg}, {"hd_mean_mm", &hd},
                           {"tu_sqrt_mm", &tu}, {"mse", &err}}) {
        const Summary s = summarize(*v);
        sum << name << ',' << fmt(s.mean) << ',' << fmt(s.std) << ',' << s.count << '\n';
    }
    write_text_atomic(ctx.out_dir / "summary.csv", sum.str());
    ctx.manifest.outputs.push_back(path.string());
    ctx.manifest.outputs.push_back((ctx.out_dir / "summary.csv").string());
    ctx.out << "evaluated " << cases.size() << " cases: mean dsc " << fmt(summarize(dsc).mean) << '\n';
}

EvaluateOptions eval_options(const EvalArgs& a) {
    EvaluateOptions o;
    o.distance = a.distance == "max" ? DistanceMode::max : DistanceMode::mean;
    o.tu_lines = a.tu_lines;
    return o;
}

void cmd_evaluate(Context& ctx, const DataArgs& d, const EvalArgs& a) {
    json cfg = {{"fields", a.fields}, {"distance", a.distance}, {"tu_lines", a.tu_lines}};
    set_config(ctx, cfg.dump(), 0);
    ctx.manifest.inputs.push_back(d.data);
    if (!a.fields.empty()) ctx.manifest.inputs.push_back(a.fields);
    const auto cases = load_cases(d);
    std::vector<DisplacementField> fields;
    for (const auto& c : cases) fields.push_back(field_for(c, a.fields));
    write_metrics(ctx, cases, fields, eval_options(a));
}

std::optional<double> reference_ef(const CaseRecord& c, const fs::path& root) {
    // Phantoms carry the analytic value; otherwise use the recorded volumes.
    const fs::path side = root / c.id / "phantom.json";
    const fs::path own = root / "phantom.json";
    for (const auto& p : {side, own}) {
        std::ifstream in(p);
        if (!in) continue;
        try {
            json j;
            in >> j;
            if (j.value("case_id", std::string()) == c.id) return j.at("true_ef").get<double>();
        } catch (const json::exception& e) {
            throw FormatError("'" + p.string() + "': " + e.what());
        }
    }
    if (c.edv_ml && c.esv_ml && *c.edv_ml > 0.0) return 1.0 - *c.esv_ml / *c.edv_ml;
    return std::nullopt;
}

void cmd_ef(Context& ctx, const DataArgs& d, const std::string& fields_dir) {
    json cfg = {{"fields", fields_dir}};
    set_config(ctx, cfg.dump(), 0);
    ctx.manifest.inputs.push_back(d.data);
    const auto cases = load_cases(d);
    std::ostringstream csv;
    csv << "case_id,edv_true_ml,esv_true_ml,ef_reference,pxl_ed_true,pxl_es_true,pxl_ed_pred,pxl_es_pred,"
           "edv_pred_ml,esv_pred_ml,ef_pred,ef_negative\n";
    std::vector<double> ref, pred;
    for (const auto& c : cases) {
        if (!c.edv_ml || !c.esv_ml) throw FormatError("case '" + c.id + "' has no LVedv/LVesv");
        const double ed_true = static_cast<double>(c.ed().mask.count(Label::ventricle));
        const double es_true = static_cast<double>(c.es().mask.count(Label::ventricle));
        // With fields, the ED mask is predicted by warping the ES mask into
        // the ED frame; without, the ground-truth masks are used.
        double ed_pred = ed_true;
        if (!fields_dir.empty()) {
            ed_pred = static_cast<double>(warp_mask(c.es().mask, field_for(c, fields_dir)).count(Label::ventricle));
        }
        const EfEstimate e = ef_estimate(*c.edv_ml, *c.esv_ml, ed_true, es_true, ed_pred, es_true);
        const auto r = reference_ef(c, fs::path(d.data));
        csv << c.id << ',' << fmt(*c.edv_ml) << ',' << fmt(*c.esv_ml) << ',' << (r ? fmt(*r) : "") << ','
            << ed_true << ',' << es_true << ',' << ed_pred << ',' << es_true << ',' << fmt(e.edv) << ','
            << fmt(e.esv) << ',' << fmt(e.ef) << ',' << (e.negative ? 1 : 0) << '\n';
        if (r) {
            ref.push_back(*r);
            pred.push_back(e.ef);
        }
    }
    write_text_atomic(ctx.out_dir / "ef.csv", csv.str());
    json summary = {{"cases", cases.size()}, {"with_reference", ref.size()}};
    if (ref.size() >= 2) {
        double mae = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) mae += std::abs(ref[i] - pred[i]);
        summary["mae"] = mae / static_cast<double>(ref.size());
        try {
            summary["pearson_r"] = pearson(pred, ref);
        } catch (const UndefinedMetricError&) {
            summary["pearson_r"] = nullptr;
        }
    }
    write_text_atomic(ctx.out_dir / "ef_summary.json", summary.dump(2) + "\n");
    ctx.manifest.outputs.push_back((ctx.out_dir / "ef.csv").string());
    ctx.manifest.outputs.push_back((ctx.out_dir / "ef_summary.json").string());
    ctx.out << "ef: " << cases.size() << " cases";
    if (summary.contains("pearson_r") && !summary["pearson_r"].is_null()) {
        ctx.out << ", pearson r " << fmt(summary["pearson_r"].get<double>());
    }
    ctx.out << '\n';
}

void cmd_baseline(Context& ctx, const DataArgs& d, const PyramidConfig& pc, const EvalArgs& ea) {
    pc.validate();
    json cfg = {{"levels", pc.levels},
                {"iterations", pc.iterations},
                {"window_radius", pc.window_radius},
                {"downscale", pc.downscale},
                {"damping", pc.damping}};
    set_config(ctx, cfg.dump(), 0);
    ctx.manifest.inputs.push_back(d.data);
    const auto cases = load_cases(d);
    const fs::path fields_dir = ctx.out_dir / "fields";
    fs::create_directories(fields_dir);
    std::vector<DisplacementField> fields;
    for (const auto& c : cases) {
        fields.push_back(lucas_kanade_flow(c.ed().image, c.es().image, pc));
        write_field(fields_dir / (c.id + ".ddf"), fields.back());
    }
    ctx.manifest.outputs.push_back(fields_dir.string());
    write_metrics(ctx, cases, fields, eval_options(ea));
}

struct AblationArgs {
    int count = 40;
    int scale = 64;
    std::string vae;
};

void cmd_ablation(Context& ctx, const DataArgs& d, const TrainArgs& ta, const AblationArgs& a) {
    const TrainConfig base = effective_config(ta);
    json cfg = json::parse(base.to_json());
    cfg["ablation_scale"] = a.scale;
    cfg["count"] = a.count;
    set_config(ctx, cfg.dump(), base.seed);

    std::vector<CaseRecord> cases;
    if (d.data.empty()) {
        cases = generate_phantom_set(PhantomParams{}, a.count, base.seed);
    } else {
        ctx.manifest.inputs.push_back(d.data);
        cases = load_cases(d);
    }
    const SplitIds ids = split_ids(cases, base.seed);
    const int top = std::max(a.scale, base.scales.back());
    const RegistrationSet train = square_set(to_set(select(cases, ids.at("train"))), top);
    std::vector<std::string> held_ids = ids.at("val");
    held_ids.insert(held_ids.end(), ids.at("test").begin(), ids.at("test").end());
    const RegistrationSet held = square_set(to_set(select(cases, held_ids)), top);

    std::optional<ShapeVae> vae;
    double vae_dice = std::numeric_limits<double>::quiet_NaN();
    if (!a.vae.empty()) {
        vae = load_vae(a.vae);
        ctx.manifest.inputs.push_back(a.vae);
    } else {
        std::vector<LabelMask> masks, vheld;
        for (const auto* c : select(cases, ids.at("train")))
            for (const auto& f : c->frames) masks.push_back(f.mask);
        for (const auto* c : select(cases, ids.at("val")))
            for (const auto& f : c->frames) vheld.push_back(f.mask);
        VaeTrainResult r = pretrain_vae(masks, vheld, base, {});
        vae_dice = r.heldout_dice;
        vae.emplace(std::move(r.vae));
    }

    struct Row {
        std::string label;
        std::optional<RegistrationMode> mode;
        std::vector<int> scales;
    };
    std::vector<Row> rows{{"No registration", std::nullopt, {}}};
    for (auto m : {RegistrationMode::van, RegistrationMode::vm, RegistrationMode::ac, RegistrationMode::ddc,
                   RegistrationMode::ddc_ac}) {
        rows.push_back({mode_label(m), m, {a.scale}});
    }
    rows.push_back({std::string("Multi-scale ") + mode_label(RegistrationMode::ddc_ac), RegistrationMode::ddc_ac,
                    base.scales});

    std::ostringstream csv;
    csv << "configuration,mode,scales,mi,bending,local_dice,latent_l2,adversarial,multiscale,dsc_fg_mean,dsc_fg_std,"
           "dsc_mean,hd_mean_mm,tu_sqrt_mm,mse,train_seconds\n";
    ctx.out << std::left << std::setw(30) << "configuration" << std::setw(12) << "dsc_fg" << std::setw(12)
            << "hd_mm" << std::setw(12) << "tu_mm" << "seconds\n";
    for (const auto& row : rows) {
        TrainConfig c = base;
        std::optional<DeformNet> net;
        const auto t0 = std::chrono::steady_clock::now();
        if (row.mode) {
            c.mode = *row.mode;
            c.scales = row.scales;
            RegistrationResult r = multiscale_train(train, {}, c, vae ? &*vae : nullptr, {});
            net.emplace(std::move(r.net));
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const int eval_scale = row.mode ? row.scales.back() : top;
        const auto metrics = evaluate_set(net ? &*net : nullptr, held, eval_scale);
        std::vector<double> fg, dm, hd, tu, err;
        for (const auto& m : metrics) {
            fg.push_back(m.dsc.foreground_mean());
            dm.push_back(m.dsc.mean);
            if (m.hd_mean) hd.push_back(*m.hd_mean);
            if (m.tu) tu.push_back(m.tu->sqrt_mm);
            err.push_back(m.mse);
        }
        const LossWeights w = row.mode ? c.active_weights() : LossWeights{0, 0, 0, 0};
        std::string scales;
        for (int s : row.scales) scales += (scales.empty() ? "" : "/") + std::to_string(s);
        csv << row.label << ',' << (row.mode ? to_string(*row.mode) : "none") << ',' << scales << ','
            << (row.mode ? 1 : 0) << ',' << (w.lambda_r > 0) << ',' << (w.lambda_lac > 0) << ','
            << (w.lambda_gac > 0) << ',' << (w.lambda_ddc > 0) << ',' << (row.scales.size() > 1) << ','
            << fmt(summarize(fg).mean) << ',' << fmt(summarize(fg).std) << ',' << fmt(summarize(dm).mean) << ','
            << (hd.empty() ? "" : fmt(summarize(hd).mean)) << ',' << (tu.empty() ? "" : fmt(summarize(tu).mean))
            << ',' << fmt(summarize(err).mean) << ',' << fmt(secs) << '\n';
        ctx.out << std::left << std::setw(30) << row.label << std::setw(12) << fmt(summarize(fg).mean).substr(0, 8)
                << std::setw(12) << (hd.empty() ? "-" : fmt(summarize(hd).mean).substr(0, 8)) << std::setw(12)
                << (tu.empty() ? "-" : fmt(summarize(tu).mean).substr(0, 8)) << fmt(secs).substr(0, 7) << '\n'
                << std::flush;
    }
    write_text_atomic(ctx.out_dir / "ablation.csv", csv.str());
    json meta = {{"heldout_cases", held_ids}, {"train_cases", ids.at("train")}};
    if (!std::isnan(vae_dice)) meta["vae_heldout_dice"] = vae_dice;
    write_text_atomic(ctx.out_dir / "ablation.json", meta.dump(2) + "\n");
    ctx.manifest.outputs.push_back((ctx.out_dir / "ablation.csv").string());
    ctx.manifest.outputs.push_back((ctx.out_dir / "ablation.json").string());
}

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::config: return kExitConfig;
        case ErrorKind::checkpoint: return kExitCheckpoint;
        case ErrorKind::format:
        case ErrorKind::io: return kExitData;
        default: return kExitOther;
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-scale echocardiography registration pipeline", "echoreg"};
    app.require_subcommand(1);
    app.set_version_flag("--version", artifact_version());
    std::string out_dir = "out";

    DataArgs data;
    TrainArgs train;
    PhantomArgs phantom;
    RegisterArgs reg;
    EvalArgs eval;
    PyramidConfig pyr;
    AblationArgs abl;
    std::string run_id, vae_path, fields_dir;
    int checkpoint_every = 0;

    auto add_out = [&](CLI::App* s) { s->add_option("--out", out_dir, "Output directory")->capture_default_str(); };

    auto* ph = app.add_subcommand("phantom", "Generate a synthetic phantom dataset under <out>/data");
    ph->add_option("--seed", phantom.seed, "Dataset seed")->capture_default_str();
    ph->add_option("--count", phantom.count, "Number of cases")->check(CLI::PositiveNumber)->capture_default_str();
    ph->add_option("--size", phantom.size, "Image side")->capture_default_str();
    ph->add_option("--amplitude", phantom.amplitude, "Mean contraction amplitude")->capture_default_str();
    ph->add_option("--frames", phantom.frames, "Frames per cycle")->capture_default_str();
    ph->add_option("--speckle", phantom.speckle, "Speckle level")->capture_default_str();
    add_out(ph);

    auto* tv = app.add_subcommand("train-vae", "Pretrain the shape VAE on training-split masks");
    add_data_options(tv, data);
    add_train_options(tv, train, false);
    tv->add_option("--run-id", run_id, "Run directory name (default: vae)");
    add_out(tv);

    auto* tr = app.add_subcommand("train", "Train the registration network");
    add_data_options(tr, data);
    add_train_options(tr, train, true);
    tr->add_option("--vae", vae_path, "Pretrained VAE checkpoint (modes ac, ddc-ac)");
    tr->add_option("--run-id", run_id, "Run directory name (default: the mode)");
    tr->add_option("--checkpoint-every", checkpoint_every, "Epochs between checkpoints (0: last only)");
    add_out(tr);

    auto* rg = app.add_subcommand("register", "Register ES to ED for each case; writes DDF1 fields and warped images");
    add_data_options(rg, data);
    rg->add_option("--checkpoint", reg.checkpoint, "Deformation network checkpoint");
    rg->add_option("--method", reg.method, "net or identity")->check(CLI::IsMember({"net", "identity"}));
    rg->add_option("--scale", reg.scale, "Network input side")->capture_default_str();
    add_out(rg);

    auto add_eval = [&](CLI::App* s) {
        s->add_option("--distance", eval.distance, "Boundary distance: mean or max")
            ->check(CLI::IsMember({"mean", "max"}));
        s->add_option("--tu-lines", eval.tu_lines, "Scan lines for thickness uniformity")->check(CLI::Range(2, 4096));
    };
    auto* ev = app.add_subcommand("evaluate", "Score fields (or no registration) against the ED masks");
    add_data_options(ev, data);
    ev->add_option("--fields", eval.fields, "Directory of <case>.ddf fields; omit for no registration");
    add_eval(ev);
    add_out(ev);

    auto* ef = app.add_subcommand("ef", "Per-case ejection fraction table and correlation with the reference");
    add_data_options(ef, data);
    ef->add_option("--fields", fields_dir, "Directory of <case>.ddf fields; omit to use ground-truth masks");
    add_out(ef);

    auto* of = app.add_subcommand("baseline-of", "Pyramidal Lucas-Kanade optical flow baseline");
    add_data_options(of, data);
    of->add_option("--levels", pyr.levels)->capture_default_str();
    of->add_option("--iterations", pyr.iterations)->capture_default_str();
    of->add_option("--radius", pyr.window_radius)->capture_default_str();
    of->add_option("--downscale", pyr.downscale)->capture_default_str();
    add_eval(of);
    add_out(of);

    auto* ab = app.add_subcommand("ablation", "Compare objective configurations on held-out cases");
    add_data_options(ab, data, false);
    add_train_options(ab, train, false);
    ab->add_option("--count", abl.count, "Phantom cases when --data is omitted")->capture_default_str();
    ab->add_option("--scale", abl.scale, "Side for the single-scale configurations")->capture_default_str();
    ab->add_option("--vae", abl.vae, "Pretrained VAE checkpoint (default: pretrain one)");
    add_out(ab);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << artifact_version() << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error[usage]: " << e.what() << '\n';
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    RunManifest manifest;
    manifest.command = sub->get_name();
    manifest.argv = args;
    manifest.version = artifact_version();
    manifest.started_at = utc_now();
    manifest.status = "running";
    const fs::path manifest_path = fs::path(out_dir) / (manifest.command + ".manifest.json");
    Context ctx{out, manifest, fs::path(out_dir)};

    int code = kExitOk;
    try {
        fs::create_directories(out_dir);
        manifest.write(manifest_path);
        if (sub == ph) cmd_phantom(ctx, phantom);
        else if (sub == tv) cmd_train_vae(ctx, data, train, run_id.empty() ? "vae" : run_id);
        else if (sub == tr) cmd_train(ctx, data, train, run_id, vae_path, checkpoint_every);
        else if (sub == rg) cmd_register(ctx, data, reg);
        else if (sub == ev) cmd_evaluate(ctx, data, eval);
        else if (sub == ef) cmd_ef(ctx, data, fields_dir);
        else if (sub == of) cmd_baseline(ctx, data, pyr, eval);
        else if (sub == ab) cmd_ablation(ctx, data, train, abl);
        manifest.status = "ok";
    } catch (const Error& e) {
        err << "error[" << to_string(e.kind()) << "]: " << e.what() << '\n';
        manifest.status = "failed";
        manifest.error = e.what();
        code = exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error[io]: " << e.what() << '\n';
        manifest.status = "failed";
        manifest.error = e.what();
        code = kExitData;
    } catch (const std::exception& e) {
        err << "error[internal]: " << e.what() << '\n';
        manifest.status = "failed";
        manifest.error = e.what();
        code = kExitOther;
    }
    manifest.finished_at = utc_now();
    try {
        manifest.write(manifest_path);
    } catch (const std::exception& e) {
        err << "error[io]: cannot write manifest: " << e.what() << '\n';
        if (code == kExitOk) code = kExitData;
    }
    return code;
}

}  // namespace echoreg::cli
