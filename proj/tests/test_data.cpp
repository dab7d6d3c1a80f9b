#include <doctest.h>

#include <deque>
#include <fstream>
#include <set>

#include <json.hpp>

#include "echoreg/baseline.hpp"
#include "echoreg/data.hpp"
#include "echoreg/losses.hpp"
#include "echoreg/metrics.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace echoreg;

namespace {

PhantomParams small_params(double amplitude = 0.3) {
    PhantomParams p;
    p.size = 64;
    p.lv_radius_x = 11;
    p.lv_radius_y = 16;
    p.wall = 5;
    p.amplitude = amplitude;
    p.frames = 8;
    p.seed = 7;
    return p;
}

int lv_pixels(const LabelMask& m) { return static_cast<int>(m.count(Label::ventricle)); }

// Number of 4-connected components of `label`.
int components(const LabelMask& m, int label) {
    Grid<int> seen(m.rows(), m.cols(), 0);
    int n = 0;
    for (int y = 0; y < m.rows(); ++y)
        for (int x = 0; x < m.cols(); ++x) {
            if (m(y, x) != label || seen(y, x)) continue;
            ++n;
            std::deque<std::array<int, 2>> q{{y, x}};
            seen(y, x) = 1;
            while (!q.empty()) {
                const auto [cy, cx] = q.front();
                q.pop_front();
                const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int yy = cy + dy[k], xx = cx + dx[k];
                    if (yy < 0 || yy >= m.rows() || xx < 0 || xx >= m.cols()) continue;
                    if (m(yy, xx) != label || seen(yy, xx)) continue;
                    seen(yy, xx) = 1;
                    q.push_back({yy, xx});
                }
            }
        }
    return n;
}

// Writes a CAMUS-layout patient directory with a known LV rectangle.
struct CamusFixture {
    std::filesystem::path dir;
    int lv_count = 0;
    Spacing spacing{0.154, 0.154};
};

CamusFixture write_camus_fixture(const std::filesystem::path& root, const std::string& id, bool atrium = false) {
    CamusFixture f;
    f.dir = root / id;
    std::filesystem::create_directories(f.dir);
    const int H = 24, W = 20;
    for (const char* phase : {"ED", "ES"}) {
        std::vector<double> img(H * W), gt(H * W, 0.0);
        for (int i = 0; i < H * W; ++i) img[i] = (i * 37) % 256;
        img[0] = 0;
        img[1] = 255;
        const int inset = std::string(phase) == "ED" ? 4 : 6;
        for (int y = inset; y < H - inset; ++y)
            for (int x = inset; x < W - inset; ++x) {
                const bool wall = y < inset + 2 || y >= H - inset - 2 || x < inset + 2 || x >= W - inset - 2;
                gt[y * W + x] = wall ? 2.0 : 1.0;  // CAMUS: 1 LV, 2 MYO
            }
        if (atrium) gt[0] = 3.0;
        if (std::string(phase) == "ED")
            f.lv_count = static_cast<int>(std::count(gt.begin(), gt.end(), 1.0));
        const std::string stem = id + "_2CH_" + phase;
        write_mhd(f.dir / (stem + ".mhd"), H, W, f.spacing, img, MhdType::uchar);
        write_mhd(f.dir / (stem + "_gt.mhd"), H, W, f.spacing, gt, MhdType::uchar);
    }
    std::ofstream(f.dir / "Info_2CH.cfg") << "ED: 1\nES: 12\nNbFrame: 15\nSex: F\nAge: 52\nImageQuality: Good\n"
                                             "LVedv: 120.5\nLVesv: 48.25\nLVef: 60\n";
    return f;
}

}  // namespace

TEST_CASE("amplitude zero gives identical frames and zero fields") {
    const CaseRecord rec = generate_phantom(small_params(0.0));
    REQUIRE(rec.frames.size() == 8);
    for (const auto& f : rec.frames) {
        CHECK(f.image == rec.frames[0].image);
        CHECK(f.mask == rec.frames[0].mask);
    }
    for (const auto& u : rec.gt_fields) CHECK(u.mean_magnitude() == 0.0);
}

TEST_CASE("phantom masks have an LV strictly inside a connected MYO ring") {
    for (int i = 0; i < 6; ++i) {
        const CaseRecord rec = generate_phantom(phantom_variant(small_params(), 3, i));
        rec.validate();
        for (const auto& f : rec.frames) {
            const LabelMask& m = f.mask;
            CHECK(components(m, Label::myocardium) == 1);
            CHECK(components(m, Label::ventricle) == 1);
            bool touches = false;
            for (int y = 0; y < m.rows(); ++y)
                for (int x = 0; x < m.cols(); ++x) {
                    if (m(y, x) != Label::ventricle) continue;
                    if (y == 0 || x == 0 || y == m.rows() - 1 || x == m.cols() - 1) touches = true;
                    for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}})
                        if (m(y + dy, x + dx) == Label::background) touches = true;
                }
            CHECK_FALSE(touches);
            for (double v : f.image.storage()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
        CHECK(rec.ed_index == 0);
        CHECK(rec.es_index == 4);
    }
}

TEST_CASE("ground-truth fields map every frame back onto ED") {
    PhantomParams base;
    base.amplitude = 0.3;
    for (int i = 0; i < 4; ++i) {
        const PhantomParams p = phantom_variant(base, 9, i);
        const CaseRecord rec = generate_phantom(p);
        for (std::size_t t = 1; t < rec.frames.size(); ++t) {
            const LabelMask back = warp_mask(rec.frames[t].mask, rec.gt_fields[t]);
            const DiceReport d = dsc(back, rec.ed().mask);
            CAPTURE(t);
            CHECK(d.mean >= 0.98);
            // Resampling a rasterised ring misplaces its two borders by a
            // fraction of a pixel, which costs the thin MYO a few percent.
            CHECK(d.per_class[Label::myocardium] >= 0.95);
            CHECK(d.per_class[Label::ventricle] >= 0.98);
        }
        // The stored field is the forward map of each ED pixel.
        const auto& u = rec.gt_fields[rec.es_index];
        for (int y = 0; y < p.size; y += 7)
            for (int x = 0; x < p.size; x += 5) {
                const auto q = phantom_forward_map(p, rec.es_index, y, x);
                CHECK(u.dy()(y, x) == doctest::Approx(q[0] - y));
                CHECK(u.dx()(y, x) == doctest::Approx(q[1] - x));
            }
    }
}

TEST_CASE("ground-truth field bending energy agrees with the closed form") {
    const PhantomParams p = small_params(0.3);
    const CaseRecord rec = generate_phantom(p);
    const int t = rec.es_index;
    // Second derivatives of the continuous displacement by fine central differences.
    auto disp = [&](double y, double x, int c) { return phantom_forward_map(p, t, y, x)[c] - (c == 0 ? y : x); };
    const double h = 1e-3;
    double acc = 0;
    int n = 0;
    for (int y = 1; y < p.size - 1; ++y)
        for (int x = 1; x < p.size - 1; ++x)
            for (int c = 0; c < 2; ++c) {
                const double f0 = disp(y, x, c);
                const double fyy = (disp(y + h, x, c) - 2 * f0 + disp(y - h, x, c)) / (h * h);
                const double fxx = (disp(y, x + h, c) - 2 * f0 + disp(y, x - h, c)) / (h * h);
                const double fxy = (disp(y + h, x + h, c) - disp(y + h, x - h, c) - disp(y - h, x + h, c) +
                                    disp(y - h, x - h, c)) /
                                   (4 * h * h);
                acc += fyy * fyy + fxx * fxx + 2 * fxy * fxy;
                ++n;
            }
    const double analytic = acc / n;
    const double discrete = bending_energy(rec.gt_fields[t]);
    CHECK(analytic > 0);
    CHECK(std::abs(discrete - analytic) / analytic < 0.05);
}

TEST_CASE("EF from ground-truth mask areas closes on the analytic value") {
    for (double a : {0.1, 0.2, 0.3}) {
        PhantomParams p;  // default 128 x 128 geometry
        p.amplitude = a;
        p.seed = 1;
        const CaseRecord rec = generate_phantom(p);
        const double analytic = 1 - (1 - a) * (1 - a);
        CHECK(phantom_true_ef(p) == doctest::Approx(analytic));
        // Volumes taken proportional to LV area: both reference counts are the ED area.
        const double ed = lv_pixels(rec.ed().mask), es = lv_pixels(rec.es().mask);
        const EfEstimate e = ef_estimate(1.0, 1.0, ed, ed, ed, es);
        CAPTURE(a);
        CHECK(std::abs(e.ef - analytic) < 0.02);
        CHECK(1 - *rec.esv_ml / *rec.edv_ml == doctest::Approx(analytic));
    }
}

TEST_CASE("phantom generation is deterministic and validated") {
    const auto a = generate_phantom_set(small_params(), 3, 11);
    const auto b = generate_phantom_set(small_params(), 3, 11);
    REQUIRE(a.size() == 3);
    CHECK(a[2].id == "phantom0002");
    for (int i = 0; i < 3; ++i) {
        CHECK(a[i].ed().image == b[i].ed().image);
        CHECK(a[i].es().mask == b[i].es().mask);
    }
    CHECK(a[0].ed().image != a[1].ed().image);
    CHECK(generate_phantom_set(small_params(), 1, 12)[0].ed().image != a[0].ed().image);

    PhantomParams bad = small_params();
    bad.amplitude = 1.0;
    CHECK_THROWS_AS(generate_phantom(bad), ConfigError);
    bad = small_params();
    bad.wall = 1.5;
    CHECK_THROWS_AS(generate_phantom(bad), ConfigError);
    bad = small_params();
    bad.frames = 1;
    CHECK_THROWS_AS(generate_phantom(bad), ConfigError);
    bad = small_params();
    bad.lv_radius_y = 30;
    CHECK_THROWS_AS(generate_phantom(bad), ConfigError);
    CHECK_THROWS_AS(generate_phantom_set(small_params(), 0, 1), ContractError);
}

TEST_CASE("MetaImage round trip for uchar and float") {
    TempDir dir("echoreg_test_mhd");
    std::vector<double> v(6 * 5);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i * 8);
    write_mhd(dir.path / "u.mhd", 6, 5, {0.5, 0.25}, v, MhdType::uchar);
    const MhdImage u = read_mhd(dir.path / "u.mhd");
    CHECK(u.rows == 6);
    CHECK(u.cols == 5);
    CHECK(u.spacing == Spacing{0.5, 0.25});
    CHECK(u.values == v);

    for (auto& x : v) x = x / 7.0 - 3.0;
    write_mhd(dir.path / "f.mhd", 6, 5, {1, 1}, v, MhdType::float32);
    const MhdImage f = read_mhd(dir.path / "f.mhd");
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(f.values[i] == static_cast<float>(v[i]));

    CHECK_THROWS_AS(write_mhd(dir.path / "bad.mhd", 2, 2, {1, 1}, {0, 1, 2, 256}, MhdType::uchar), ContractError);
}

TEST_CASE("MetaImage reader handles other element types and rejects bad headers") {
    TempDir dir("echoreg_test_mhd_types");
    auto header = [&](const std::string& name, const std::string& extra) {
        std::ofstream(dir.path / name) << "ObjectType = Image\n" << extra << "ElementDataFile = data.raw\n";
        return dir.path / name;
    };
    const std::int16_t s[6] = {-3, 0, 7, 1000, -1000, 2};
    std::ofstream(dir.path / "data.raw", std::ios::binary).write(reinterpret_cast<const char*>(s), sizeof s);
    const auto p = header("s.mhd", "NDims = 3\nDimSize = 3 2 1\nElementSpacing = 0.3 0.2 1\nElementType = MET_SHORT\n");
    const MhdImage img = read_mhd(p);
    CHECK(img.rows == 2);
    CHECK(img.cols == 3);
    CHECK(img.spacing == Spacing{0.2, 0.3});
    CHECK(img.values == std::vector<double>{-3, 0, 7, 1000, -1000, 2});

    const std::string ok = "NDims = 2\nDimSize = 3 2\nElementSpacing = 1 1\n";
    CHECK_THROWS_AS(read_mhd(header("a.mhd", "NDims = 2\nDimSize = 3 2\nElementType = MET_SHORT\n")), FormatError);
    CHECK_THROWS_AS(read_mhd(header("b.mhd", ok + "ElementType = MET_LONG\n")), FormatError);
    CHECK_THROWS_AS(read_mhd(header("c.mhd", ok + "ElementType = MET_DOUBLE\n")), FormatError);  // truncated
    CHECK_THROWS_AS(read_mhd(header("d.mhd", ok + "ElementType = MET_SHORT\nBinaryDataByteOrderMSB = True\n")),
                    FormatError);
    CHECK_THROWS_AS(read_mhd(header("e.mhd", "NDims = 3\nDimSize = 3 2 2\nElementSpacing = 1 1 1\nElementType = "
                                             "MET_UCHAR\n")),
                    FormatError);
    CHECK_THROWS_AS(read_mhd(dir.path / "missing.mhd"), IoError);
}

TEST_CASE("CAMUS-layout fixture loads with remapped labels and header spacing") {
    TempDir dir("echoreg_test_camus");
    const CamusFixture fx = write_camus_fixture(dir.path, "patient0001");
    const CaseRecord rec = load_camus_case(fx.dir);
    CHECK(rec.id == "patient0001");
    CHECK(rec.view == "A2C");
    REQUIRE(rec.frames.size() == 2);
    CHECK(rec.edv_ml == 120.5);
    CHECK(rec.esv_ml == 48.25);
    CHECK(rec.ed().image.spacing() == fx.spacing);
    CHECK(rec.ed().mask.spacing() == fx.spacing);

    // The stored bytes span 0..255, so normalisation is division by 255.
    const MhdImage raw = read_mhd(fx.dir / "patient0001_2CH_ED.mhd");
    for (std::size_t i = 0; i < raw.values.size(); ++i) CHECK(rec.ed().image[i] == doctest::Approx(raw.values[i] / 255.0).epsilon(1e-14));

    const MhdImage gt = read_mhd(fx.dir / "patient0001_2CH_ED_gt.mhd");
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const int want = gt.values[i] == 1 ? 2 : gt.values[i] == 2 ? 1 : 0;
        CHECK(rec.ed().mask[i] == want);
    }
    for (const auto& f : rec.frames)
        for (auto v : f.mask.storage()) CHECK(v <= 2);

    const double area = lv_pixels(rec.ed().mask) * fx.spacing.y * fx.spacing.x;
    const double documented = fx.lv_count * 0.154 * 0.154;
    CHECK(std::abs(area - documented) / documented < 0.005);

    CHECK(list_camus_cases(dir.path) == std::vector<std::filesystem::path>{fx.dir});
}

TEST_CASE("CAMUS loader never reinterprets unexpected labels silently") {
    TempDir dir("echoreg_test_camus_la");
    const CamusFixture fx = write_camus_fixture(dir.path, "patient0002", true);
    CHECK_THROWS_AS(load_camus_case(fx.dir), FormatError);
    CamusOptions opt;
    opt.drop_atrium = true;
    const CaseRecord rec = load_camus_case(fx.dir, opt);
    CHECK(rec.ed().mask[0] == Label::background);

    std::filesystem::remove(fx.dir / "patient0002_2CH_ES_gt.mhd");
    CHECK_THROWS_AS(load_camus_case(fx.dir, opt), IoError);
    CHECK_THROWS_AS(load_camus_case(dir.path / "nope"), IoError);
}

TEST_CASE("exported phantoms load back through the CAMUS reader") {
    TempDir dir("echoreg_test_export");
    const PhantomParams p = small_params();
    const CaseRecord rec = generate_phantom(p, "phantom0007");
    export_phantom_case(rec, p, dir.path / "phantom0007");
    const CaseRecord back = load_camus_case(dir.path / "phantom0007");
    CHECK(back.ed().mask == rec.ed().mask);
    CHECK(back.es().mask == rec.es().mask);
    CHECK(*back.edv_ml == doctest::Approx(*rec.edv_ml).epsilon(1e-8));
    CHECK(*back.esv_ml == doctest::Approx(*rec.esv_ml).epsilon(1e-8));
    // Images are stored as bytes and renormalised on load.
    std::vector<double> q;
    for (double v : rec.ed().image.storage()) q.push_back(std::round(v * 255));
    const double lo = *std::min_element(q.begin(), q.end()), hi = *std::max_element(q.begin(), q.end());
    for (std::size_t i = 0; i < q.size(); ++i)
        CHECK(back.ed().image[i] == doctest::Approx((q[i] - lo) / (hi - lo)).epsilon(1e-12));

    const auto field = read_field(dir.path / "phantom0007" / "phantom0007_ES_to_ED.ddf");
    for (std::size_t i = 0; i < field.size(); ++i)
        CHECK(field.dx()[i] == static_cast<float>(rec.gt_fields[rec.es_index].dx()[i]));

    std::ifstream js(dir.path / "phantom0007" / "phantom.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j.at("true_ef").get<double>() == doctest::Approx(phantom_true_ef(p)));
    CHECK(j.at("amplitude").get<double>() == p.amplitude);
}

TEST_CASE("splits are deterministic, patient-disjoint and sized by rounding") {
    std::vector<std::string> ids;
    for (int i = 0; i < 20; ++i) ids.push_back("patient" + std::to_string(i));
    const Splits s = make_splits(ids, {0.8, 0.1, 0.1}, 4);
    CHECK(s.train.size() == 16);
    CHECK(s.val.size() == 2);
    CHECK(s.test.size() == 2);
    const Splits t = make_splits(ids, {0.8, 0.1, 0.1}, 4);
    CHECK(s.train == t.train);
    CHECK(s.val == t.val);
    CHECK(s.test == t.test);
    const Splits u = make_splits(ids, {0.8, 0.1, 0.1}, 5);
    CHECK((u.val != s.val || u.test != s.test));

    // Several frames of one patient stay together.
    std::vector<std::string> frames;
    for (int i = 0; i < 10; ++i)
        for (const char* ph : {"_ED", "_ES"}) frames.push_back("p" + std::to_string(i) + ph);
    const Splits f = make_splits(frames, {0.6, 0.2, 0.2}, 1);
    std::set<std::string> seen[3];
    const std::vector<std::size_t>* parts[3] = {&f.train, &f.val, &f.test};
    std::size_t total = 0;
    for (int k = 0; k < 3; ++k) {
        total += parts[k]->size();
        for (auto i : *parts[k]) seen[k].insert(patient_of(frames[i]));
    }
    CHECK(total == frames.size());
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b)
            for (const auto& p : seen[a]) CHECK(seen[b].count(p) == 0);
    CHECK(f.val.size() == 4);

    CHECK_THROWS_AS(make_splits({"a", "b"}, {0.5, 0.25, 0.25}, 1), ContractError);
    CHECK_THROWS_AS(make_splits(ids, {0.8, 0.1, 0.2}, 1), ContractError);
    CHECK(patient_of("patient0001_2CH_ED") == "patient0001");
}
