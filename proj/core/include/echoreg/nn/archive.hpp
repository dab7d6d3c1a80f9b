#pragma once

// Versioned parameter archive:
//   "ERCK" | u32 version | str kind | u64 config_hash | str config_json |
//   u32 entries | { str name | u64 count | f64[count] }*
// Strings are u32 length + bytes; all integers little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace echoreg::nn {

inline constexpr std::uint32_t kArchiveVersion = 2;

struct ArchiveEntry {
    std::string name;
    std::vector<double> values;
};

struct Archive {
    std::string kind;  // "deform", "vae", "discriminator"
    std::uint64_t config_hash = 0;
    std::string config_json;
    std::vector<ArchiveEntry> entries;
};

/// FNV-1a 64-bit hash.
std::uint64_t fnv1a(const std::string& text);

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws CheckpointError if the file is missing, truncated or has the wrong magic/version.
Archive read_archive(const std::filesystem::path& path);

}  // namespace echoreg::nn
