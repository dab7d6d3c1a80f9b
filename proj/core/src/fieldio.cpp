#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "echoreg/baseline.hpp"

namespace echoreg {

namespace {

static_assert(std::endian::native == std::endian::little, "DDF1 I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'D', 'D', 'F', '1'};

}  // namespace

void write_field(const std::filesystem::path& path, const DisplacementField& field) {
    require(field.size() > 0, "write_field: empty field");
    const std::uint32_t rows = static_cast<std::uint32_t>(field.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(field.cols());
    std::vector<float> payload(field.size() * 2);
    for (std::size_t i = 0; i < field.size(); ++i) {
        payload[2 * i] = static_cast<float>(field.dy()[i]);
        payload[2 * i + 1] = static_cast<float>(field.dx()[i]);
    }
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(kMagic.data(), kMagic.size());
        out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
        out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(float)));
        if (!out) throw IoError("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

DisplacementField read_field(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open field file '" + path.string() + "'");
    std::array<char, 4> magic{};
    std::uint32_t rows = 0, cols = 0;
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw FormatError("'" + path.string() + "' is not a DDF1 field file");
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&cols), sizeof cols);
    if (!in) throw FormatError("'" + path.string() + "': truncated header");
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) {
        throw FormatError("'" + path.string() + "': implausible field shape");
    }
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    std::vector<float> payload(n * 2);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(payload.size() * sizeof(float))) {
        throw FormatError("'" + path.string() + "': truncated payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("'" + path.string() + "': trailing bytes");
    DisplacementField f(static_cast<int>(rows), static_cast<int>(cols));
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(payload[2 * i]) || !std::isfinite(payload[2 * i + 1])) {
            throw FormatError("'" + path.string() + "': non-finite displacement");
        }
        f.dy()[i] = payload[2 * i];
        f.dx()[i] = payload[2 * i + 1];
    }
    return f;
}

}  // namespace echoreg
