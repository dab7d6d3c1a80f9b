#include <algorithm>
#include <fstream>
#include <map>

#include "echoreg/data.hpp"

namespace echoreg {

void CaseRecord::validate() const {
    require(!frames.empty(), "case '" + id + "' has no frames");
    require(ed_index >= 0 && ed_index < static_cast<int>(frames.size()) && es_index >= 0 &&
                es_index < static_cast<int>(frames.size()),
            "case '" + id + "': ED/ES index out of range");
    const auto& ref = frames.front().image;
    for (const auto& f : frames) {
        require(f.image.same_shape(ref) && f.mask.same_shape(ref), "case '" + id + "': frame shapes differ");
        require(f.image.spacing() == ref.spacing() && f.mask.spacing() == ref.spacing(),
                "case '" + id + "': frame spacings differ");
        f.mask.validate();
    }
    if (!gt_fields.empty()) {
        require(gt_fields.size() == frames.size(), "case '" + id + "': one ground-truth field per frame expected");
    }
}

namespace {

std::map<std::string, std::string> read_info(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t\r"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        kv[trim(line.substr(0, colon))] = trim(line.substr(colon + 1));
    }
    return kv;
}

LabelMask remap_mask(const MhdImage& m, const std::filesystem::path& src, bool drop_atrium) {
    LabelMask out(m.rows, m.cols, 0, m.spacing);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        const double v = m.values[i];
        if (v == 0.0) out[i] = Label::background;
        else if (v == 1.0) out[i] = Label::ventricle;
        else if (v == 2.0) out[i] = Label::myocardium;
        else if (v == 3.0 && drop_atrium) out[i] = Label::background;
        else {
            throw FormatError("'" + src.string() + "': unexpected label value " + std::to_string(v) +
                              (v == 3.0 ? " (left atrium; enable atrium dropping to map it to background)" : ""));
        }
    }
    return out;
}

}  // namespace

CaseRecord load_camus_case(const std::filesystem::path& dir, const CamusOptions& options) {
    if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
    const std::string id = dir.filename().string();
    const auto info_path = dir / ("Info_" + options.view + ".cfg");
    const auto info = read_info(info_path);
    auto number = [&](const std::string& key) -> std::optional<double> {
        auto it = info.find(key);
        if (it == info.end()) return std::nullopt;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw FormatError("'" + info_path.string() + "': bad value for " + key);
        }
    };

    CaseRecord rec;
    rec.id = id;
    rec.view = options.view == "4CH" ? "A4C" : "A2C";
    for (const char* phase : {"ED", "ES"}) {
        const std::string stem = id + "_" + options.view + "_" + phase;
        const auto img_path = dir / (stem + ".mhd");
        const auto gt_path = dir / (stem + "_gt.mhd");
        if (!std::filesystem::exists(img_path)) throw IoError("missing '" + img_path.string() + "'");
        if (!std::filesystem::exists(gt_path)) throw IoError("missing '" + gt_path.string() + "'");
        const MhdImage img = read_mhd(img_path);
        const MhdImage gt = read_mhd(gt_path);
        if (img.rows != gt.rows || img.cols != gt.cols) {
            throw FormatError("'" + gt_path.string() + "': mask shape differs from its image");
        }
        Frame f{normalize(Image2D(img.rows, img.cols, img.values, img.spacing)),
                remap_mask(gt, gt_path, options.drop_atrium)};
        f.mask.set_spacing(img.spacing);
        rec.frames.push_back(std::move(f));
    }
    rec.ed_index = 0;
    rec.es_index = 1;
    rec.edv_ml = number("LVedv");
    rec.esv_ml = number("LVesv");
    rec.validate();
    return rec;
}

std::vector<std::filesystem::path> list_camus_cases(const std::filesystem::path& root, const CamusOptions& options) {
    if (!std::filesystem::is_directory(root)) throw IoError("'" + root.string() + "' is not a directory");
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (e.is_directory() && std::filesystem::exists(e.path() / ("Info_" + options.view + ".cfg"))) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace echoreg
