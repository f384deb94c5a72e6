#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/kvconfig.hpp"
#include "dwpix/version.hpp"

namespace dwpix {

/// Provenance record written next to every CLI output. The manifest is run
/// metadata (it includes wall time); primary outputs stay byte-identical
/// across reruns with the same inputs.
struct RunManifest {
    std::string command;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    double wall_ms = 0.0;

    /// Atomic write: temp file in the target directory, then rename.
    void write(const std::string& path) const {
        KvConfig cfg;
        cfg.set("manifest.command", command);
        cfg.set("manifest.tool_version", std::string(kToolName) + " " + kToolVersion);
        cfg.set("manifest.config", config_path);
        if (seed) cfg.set_u64("manifest.seed", *seed);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            cfg.set("manifest.input." + std::to_string(i), inputs[i]);
        for (std::size_t i = 0; i < outputs.size(); ++i)
            cfg.set("manifest.output." + std::to_string(i), outputs[i]);
        cfg.set_double("manifest.wall_ms", wall_ms);
        const std::string tmp = path + ".tmp";
        cfg.save(tmp);
        std::filesystem::rename(tmp, path);
    }
};

class WallClock {
public:
    WallClock() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                         start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

} // namespace dwpix
