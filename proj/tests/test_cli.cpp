#include <doctest.h>

#include <sys/wait.h>

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "tempdir.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = ECHOREG_FIXTURE_DIR;

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = echoreg::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        rows.push_back(f);
    }
    return rows;
}

// Relative path -> contents for every regular file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> m;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) m[fs::relative(e.path(), root).string()] = slurp(e.path());
    return m;
}

int exit_status(const std::string& args) {
    const std::string cmd = std::string(ECHOREG_CLI_BINARY) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_tiny_config(const fs::path& p) {
    std::ofstream(p) << R"({"scales": [32], "epochs": 1, "batch_size": 2, "lr": 0.001, "seed": 3,
        "augment": false, "deform_channels": [4, 8, 16], "latent_dim": 8, "vae_size": 16, "vae_epochs": 1,
        "vae_batch_size": 4, "ssim_window": 5, "kl_weight": 0.001})";
}

}  // namespace

TEST_CASE("evaluate reproduces the golden report on the committed fixture") {
    TempDir dir("echoreg_cli_golden");
    const auto r = run({"evaluate", "--data", (kFixtures / "camus_small").string(), "--fields",
                        (kFixtures / "camus_small_fields").string(), "--out", dir.path.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto got = read_csv(dir.path / "metrics.csv");
    const auto want = read_csv(kFixtures / "evaluate_golden.csv");
    REQUIRE(got.size() == want.size());
    CHECK(got[0] == want[0]);
    for (std::size_t i = 1; i < want.size(); ++i) {
        REQUIRE(got[i].size() == want[i].size());
        CHECK(got[i][0] == want[i][0]);
        CHECK(got[i][1] == want[i][1]);
        for (std::size_t k = 2; k < want[i].size(); ++k) {
            CAPTURE(want[0][k]);
            if (want[i][k].empty()) {
                CHECK(got[i][k].empty());
            } else {
                REQUIRE_FALSE(got[i][k].empty());
                CHECK(std::stod(got[i][k]) == doctest::Approx(std::stod(want[i][k])).epsilon(1e-8));
            }
        }
    }
    CHECK(fs::exists(dir.path / "summary.csv"));
}

TEST_CASE("register then evaluate on an identity pair gives dice one") {
    TempDir dir("echoreg_cli_identity");
    const std::string data = (kFixtures / "camus_small").string();
    REQUIRE(run({"register", "--data", data, "--method", "identity", "--out", dir.path.string()}).code == 0);
    CHECK(fs::exists(dir.path / "fields" / "patient0001.ddf"));
    CHECK(fs::exists(dir.path / "warped" / "patient0001_ES_warped.mhd"));
    // Identity-registered ES scored against itself: copy ES over ED.
    const fs::path copy = dir.path / "self";
    fs::copy(data, copy, fs::copy_options::recursive);
    for (const auto& pid : {"patient0001", "patient0002"}) {
        for (const char* ext : {".mhd", ".raw", "_gt.mhd", "_gt.raw"}) {
            const fs::path es = copy / pid / (std::string(pid) + "_2CH_ES" + ext);
            const fs::path ed = copy / pid / (std::string(pid) + "_2CH_ED" + ext);
            fs::remove(ed);
            if (std::string(ext).ends_with(".raw")) {
                fs::copy_file(es, ed);
            } else {
                // Headers name their raw file, so rewrite the reference.
                std::string h = slurp(es);
                const auto at = h.find("_ES");
                h.replace(at, 3, "_ED");
                std::ofstream(ed) << h;
            }
        }
    }
    const fs::path out = dir.path / "eval";
    const auto r = run({"evaluate", "--data", copy.string(), "--fields", (dir.path / "fields").string(), "--out",
                        out.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto rows = read_csv(out / "metrics.csv");
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][5] == "1");
        CHECK(rows[i][11] == "0");
    }
}

TEST_CASE("phantom generation is byte-identical for a fixed seed") {
    TempDir a("echoreg_cli_phantom_a"), b("echoreg_cli_phantom_b");
    for (const auto* d : {&a, &b})
        REQUIRE(run({"phantom", "--seed", "1", "--count", "3", "--size", "64", "--out", d->path.string()}).code == 0);
    const auto ta = tree(a.path / "data"), tb = tree(b.path / "data");
    CHECK(ta.size() == 3 * 11);
    CHECK(ta == tb);
    TempDir c("echoreg_cli_phantom_c");
    REQUIRE(run({"phantom", "--seed", "2", "--count", "3", "--size", "64", "--out", c.path.string()}).code == 0);
    CHECK(tree(c.path / "data") != ta);
}

TEST_CASE("ef on phantom ground-truth masks correlates perfectly with the analytic EF") {
    TempDir dir("echoreg_cli_ef");
    REQUIRE(run({"phantom", "--seed", "4", "--count", "6", "--size", "64", "--out", dir.path.string()}).code == 0);
    const auto r = run({"ef", "--data", (dir.path / "data").string(), "--out", (dir.path / "ef").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json s = json::parse(slurp(dir.path / "ef" / "ef_summary.json"));
    CHECK(s.at("cases") == 6);
    CHECK(s.at("with_reference") == 6);
    CHECK(s.at("pearson_r").get<double>() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.at("mae").get<double>() < 1e-6);
    const auto rows = read_csv(dir.path / "ef" / "ef.csv");
    CHECK(rows.size() == 7);
}

TEST_CASE("manifests record the run before and after") {
    TempDir dir("echoreg_cli_manifest");
    REQUIRE(run({"phantom", "--seed", "9", "--count", "1", "--size", "64", "--out", dir.path.string()}).code == 0);
    const json m = json::parse(slurp(dir.path / "phantom.manifest.json"));
    CHECK(m.at("command") == "phantom");
    CHECK(m.at("status") == "ok");
    CHECK(m.at("seed") == 9);
    CHECK(m.at("config_hash").get<std::string>().size() == 16);
    CHECK(m.at("config").at("size") == 64);
    CHECK_FALSE(m.at("finished_at").get<std::string>().empty());
    CHECK(m.at("outputs").size() == 1);

    const auto bad = run({"evaluate", "--data", (dir.path / "nowhere").string(), "--out", dir.path.string()});
    CHECK(bad.code == echoreg::cli::kExitData);
    CHECK(bad.err.starts_with("error[io]:"));
    const json f = json::parse(slurp(dir.path / "evaluate.manifest.json"));
    CHECK(f.at("status") == "failed");
    CHECK(f.contains("error"));
}

TEST_CASE("baseline-of writes fields and a metrics report") {
    TempDir dir("echoreg_cli_of");
    const auto r = run({"baseline-of", "--data", (kFixtures / "camus_small").string(), "--radius", "3", "--levels",
                        "2", "--out", dir.path.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(dir.path / "fields" / "patient0002.ddf"));
    CHECK(read_csv(dir.path / "metrics.csv").size() == 3);
}

TEST_CASE("train, register with the network and evaluate end to end") {
    TempDir dir("echoreg_cli_train");
    const std::string out = dir.path.string();
    REQUIRE(run({"phantom", "--seed", "5", "--count", "10", "--size", "64", "--out", out}).code == 0);
    write_tiny_config(dir.path / "tiny.json");
    const std::string data = (dir.path / "data").string(), cfg = (dir.path / "tiny.json").string();

    auto t = run({"train", "--data", data, "--config", cfg, "--mode", "van", "--out", out});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    CHECK(fs::exists(dir.path / "van" / "final.ckpt"));
    const json splits = json::parse(slurp(dir.path / "van" / "splits.json"));
    CHECK(splits.at("train").size() == 8);

    // The latent constraint needs a pretrained VAE.
    CHECK(run({"train", "--data", data, "--config", cfg, "--mode", "ac", "--out", out}).code ==
          echoreg::cli::kExitCheckpoint);
    auto v = run({"train-vae", "--data", data, "--config", cfg, "--out", out});
    REQUIRE_MESSAGE(v.code == 0, v.err);
    t = run({"train", "--data", data, "--config", cfg, "--mode", "ac", "--vae", (dir.path / "vae" / "vae.ckpt").string(),
             "--out", out});
    REQUIRE_MESSAGE(t.code == 0, t.err);

    const fs::path reg = dir.path / "reg";
    auto g = run({"register", "--data", data, "--subset", "test", "--splits", (dir.path / "van" / "splits.json").string(),
                  "--checkpoint", (dir.path / "van" / "final.ckpt").string(), "--scale", "32", "--out", reg.string()});
    REQUIRE_MESSAGE(g.code == 0, g.err);
    auto e = run({"evaluate", "--data", data, "--subset", "test", "--splits", (dir.path / "van" / "splits.json").string(),
                  "--fields", (reg / "fields").string(), "--out", (dir.path / "eval").string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    CHECK(read_csv(dir.path / "eval" / "metrics.csv").size() == 2);

    CHECK(run({"register", "--data", data, "--checkpoint", (dir.path / "missing.ckpt").string(), "--out",
               reg.string()})
              .code == echoreg::cli::kExitCheckpoint);
}

TEST_CASE("the binary maps failures to distinct exit codes") {
    TempDir dir("echoreg_cli_exit");
    const std::string out = " --out " + dir.path.string();
    CHECK(exit_status("--version") == 0);
    CHECK(exit_status("phantom --help") == 0);
    CHECK(exit_status("") == echoreg::cli::kExitUsage);
    CHECK(exit_status("phantom --bogus 1" + out) == echoreg::cli::kExitUsage);
    CHECK(exit_status("train --mode nope --data x" + out) == echoreg::cli::kExitUsage);

    std::ofstream(dir.path / "bad.json") << R"({"epochs": 0})";
    CHECK(exit_status("train --data x --config " + (dir.path / "bad.json").string() + out) ==
          echoreg::cli::kExitConfig);
    std::ofstream(dir.path / "unknown.json") << R"({"epochz": 3})";
    CHECK(exit_status("train --data x --config " + (dir.path / "unknown.json").string() + out) ==
          echoreg::cli::kExitConfig);
    CHECK(exit_status("phantom --size 8 --count 1" + out) == echoreg::cli::kExitConfig);
    CHECK(exit_status("register --data " + (kFixtures / "camus_small").string() + " --checkpoint " +
                      (dir.path / "none.ckpt").string() + out) == echoreg::cli::kExitCheckpoint);
    CHECK(exit_status("evaluate --data " + (dir.path / "missing").string() + out) == echoreg::cli::kExitData);
    CHECK(exit_status("evaluate --data " + (kFixtures / "camus_small").string() + " --fields " +
                      (dir.path / "nofields").string() + out) == echoreg::cli::kExitData);
}
