#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "echoreg/data.hpp"

namespace echoreg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <class T>
void convert(const std::vector<char>& raw, std::vector<double>& out) {
    const std::size_t n = raw.size() / sizeof(T);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
}

}  // namespace

MhdImage read_mhd(const std::filesystem::path& header) {
    std::ifstream in(header);
    if (!in) throw IoError("cannot open '" + header.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError("'" + header.string() + "': missing " + key);
        return it->second;
    };
    auto numbers = [&](const std::string& key) {
        std::istringstream ss(get(key));
        std::vector<double> v;
        double x;
        while (ss >> x) v.push_back(x);
        return v;
    };

    for (const char* key : {"ElementByteOrderMSB", "BinaryDataByteOrderMSB"}) {
        if (kv.count(key) && kv[key] == "True") throw FormatError("'" + header.string() + "': big-endian data");
    }
    if (kv.count("CompressedData") && kv["CompressedData"] == "True") {
        throw FormatError("'" + header.string() + "': compressed data is not supported");
    }
    const int ndims = std::stoi(get("NDims"));
    const auto dims = numbers("DimSize");
    if (ndims < 2 || ndims > 3 || static_cast<int>(dims.size()) != ndims || (ndims == 3 && dims[2] != 1)) {
        throw FormatError("'" + header.string() + "': expected a 2D image");
    }
    if (!kv.count("ElementSpacing") && !kv.count("ElementSize")) {
        throw FormatError("'" + header.string() + "': pixel spacing absent");
    }
    const auto spacing = numbers(kv.count("ElementSpacing") ? "ElementSpacing" : "ElementSize");
    if (spacing.size() < 2 || spacing[0] <= 0 || spacing[1] <= 0) {
        throw FormatError("'" + header.string() + "': invalid spacing");
    }

    MhdImage img;
    img.cols = static_cast<int>(dims[0]);
    img.rows = static_cast<int>(dims[1]);
    img.spacing = Spacing{spacing[1], spacing[0]};
    if (img.rows <= 0 || img.cols <= 0) throw FormatError("'" + header.string() + "': empty image");

    const std::string type = get("ElementType");
    std::size_t bytes = 0;
    if (type == "MET_UCHAR") bytes = 1;
    else if (type == "MET_USHORT" || type == "MET_SHORT") bytes = 2;
    else if (type == "MET_FLOAT") bytes = 4;
    else if (type == "MET_DOUBLE") bytes = 8;
    else throw FormatError("'" + header.string() + "': unsupported ElementType " + type);

    const auto raw_path = header.parent_path() / get("ElementDataFile");
    std::ifstream rin(raw_path, std::ios::binary);
    if (!rin) throw IoError("cannot open '" + raw_path.string() + "'");
    const std::size_t n = static_cast<std::size_t>(img.rows) * img.cols;
    std::vector<char> raw(n * bytes);
    rin.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (rin.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw FormatError("'" + raw_path.string() + "': truncated pixel data");
    }
    if (type == "MET_UCHAR") convert<std::uint8_t>(raw, img.values);
    else if (type == "MET_USHORT") convert<std::uint16_t>(raw, img.values);
    else if (type == "MET_SHORT") convert<std::int16_t>(raw, img.values);
    else if (type == "MET_FLOAT") convert<float>(raw, img.values);
    else convert<double>(raw, img.values);
    return img;
}

void write_mhd(const std::filesystem::path& header, int rows, int cols, Spacing spacing,
               const std::vector<double>& values, MhdType type) {
    require(values.size() == static_cast<std::size_t>(rows) * cols, "write_mhd: value count mismatch");
    auto raw_path = header;
    raw_path.replace_extension(".raw");
    {
        std::ofstream out(raw_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + raw_path.string() + "' for writing");
        if (type == MhdType::uchar) {
            std::vector<std::uint8_t> bytes(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double v = std::round(values[i]);
                require(v >= 0.0 && v <= 255.0, "write_mhd: uchar value out of range");
                bytes[i] = static_cast<std::uint8_t>(v);
            }
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        } else {
            std::vector<float> f(values.begin(), values.end());
            out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
        }
        if (!out) throw IoError("failed writing '" + raw_path.string() + "'");
    }
    std::ofstream out(header, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + header.string() + "' for writing");
    out.precision(10);
    out << "ObjectType = Image\n"
        << "NDims = 2\n"
        << "BinaryData = True\n"
        << "BinaryDataByteOrderMSB = False\n"
        << "CompressedData = False\n"
        << "ElementSpacing = " << spacing.x << ' ' << spacing.y << '\n'
        << "DimSize = " << cols << ' ' << rows << '\n'
        << "ElementType = " << (type == MhdType::uchar ? "MET_UCHAR" : "MET_FLOAT") << '\n'
        << "ElementDataFile = " << raw_path.filename().string() << '\n';
    if (!out) throw IoError("failed writing '" + header.string() + "'");
}

}  // namespace echoreg
