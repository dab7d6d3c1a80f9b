#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace echoreg::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitCheckpoint = 4;
inline constexpr int kExitData = 5;
inline constexpr int kExitOther = 6;

/// Written to <out>/<command>.manifest.json when a command starts and again
/// when it ends (status "running", then "ok" or "failed").
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    std::string config_json;  // effective configuration, empty if the command takes none
    std::string config_hash;  // hex FNV-1a of config_json
    std::uint64_t seed = 0;
    std::string version;
    std::string started_at;
    std::string finished_at;
    std::string status;
    std::string error;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    std::string to_json() const;
    void write(const std::filesystem::path& path) const;
};

std::string artifact_version();

/// `args` excludes the program name. Diagnostics go to `err` as
/// "error[<kind>]: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace echoreg::cli
