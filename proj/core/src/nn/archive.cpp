#include "echoreg/nn/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "echoreg/error.hpp"

namespace echoreg::nn {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'R', 'C', 'K'};

template <class T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
    put(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
    return v;
}

std::string get_string(std::istream& in, const std::filesystem::path& path) {
    const auto n = get<std::uint32_t>(in, path);
    if (n > (1u << 28)) throw CheckpointError("corrupt string length in checkpoint: " + path.string());
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
    return s;
}

}  // namespace

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ostringstream out(std::ios::binary);
        out.write(kMagic, 4);
        put(out, kArchiveVersion);
        put_string(out, archive.kind);
        put(out, archive.config_hash);
        put_string(out, archive.config_json);
        put(out, static_cast<std::uint32_t>(archive.entries.size()));
        for (const auto& e : archive.entries) {
            put_string(out, e.name);
            put(out, static_cast<std::uint64_t>(e.values.size()));
            out.write(reinterpret_cast<const char*>(e.values.data()),
                      static_cast<std::streamsize>(e.values.size() * sizeof(double)));
        }
        std::string payload = std::move(out).str();
        const std::uint64_t sum = fnv1a(payload);
        payload.append(reinterpret_cast<const char*>(&sum), sizeof(sum));

        std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
        if (!file) throw IoError("cannot write checkpoint: " + path.string());
        file.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!file) throw IoError("failed writing checkpoint: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
    std::string bytes;
    {
        std::ifstream file(path, std::ios::binary);
        if (!file) throw CheckpointError("checkpoint not found: " + path.string());
        bytes.assign(std::istreambuf_iterator<char>(file), {});
    }
    if (bytes.size() < 4 + sizeof(std::uint64_t)) throw CheckpointError("truncated checkpoint: " + path.string());
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
    bytes.resize(bytes.size() - sizeof(stored));
    if (fnv1a(bytes) != stored) throw CheckpointError("checkpoint checksum mismatch: " + path.string());
    std::istringstream in(std::move(bytes), std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a checkpoint file: " + path.string());
    const auto version = get<std::uint32_t>(in, path);
    if (version != kArchiveVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    }
    Archive a;
    a.kind = get_string(in, path);
    a.config_hash = get<std::uint64_t>(in, path);
    a.config_json = get_string(in, path);
    const auto count = get<std::uint32_t>(in, path);
    a.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        e.name = get_string(in, path);
        const auto n = get<std::uint64_t>(in, path);
        if (n > (1ull << 32)) throw CheckpointError("corrupt entry size in checkpoint: " + path.string());
        e.values.resize(n);
        in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
        a.entries.push_back(std::move(e));
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw CheckpointError("trailing bytes in checkpoint: " + path.string());
    return a;
}

}  // namespace echoreg::nn
