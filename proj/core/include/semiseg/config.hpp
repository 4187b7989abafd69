#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "semiseg/dataset.hpp"
#include "semiseg/network.hpp"
#include "semiseg/preprocess.hpp"
#include "semiseg/trainer.hpp"

namespace semiseg {

/// Everything a command needs, serialised as one JSON object:
///
///   {"preset": "desk", "seed": 0, "n_runs": 3,
///    "synthetic": {...}, "preprocess": {...}, "network": {...},
///    "split": {...}, "train": {..., "contrastive": {...}, "consistency": {...}, "augment": {...}}}
///
/// Missing keys take the preset's value; unknown keys are rejected. The
/// top-level seed feeds data generation, splitting and training.
struct ExperimentConfig {
    std::string preset = "desk";
    std::uint64_t seed = 0;
    int n_runs = 3;
    SyntheticSpec synthetic{};
    PreprocessConfig preprocess{};
    NetworkConfig network{};
    SplitOptions split{};
    TrainConfig train{};

    /// "paper" or "desk"; throws std::invalid_argument otherwise.
    static ExperimentConfig from_preset(const std::string& name);
    /// Throws std::invalid_argument with the offending key path.
    static ExperimentConfig from_json(const nlohmann::json& j);

    nlohmann::json to_json() const;
    /// Cross-field checks (class counts, input dims); throws std::invalid_argument.
    void validate() const;
    /// Training config with the top-level seed applied.
    TrainConfig resolved_train() const;
};

ExperimentConfig load_config_file(const std::filesystem::path& path);

/// Environment variable that overrides the seed of a loaded config.
inline constexpr const char* kSeedEnvVar = "SEMISEG_SEED";

/// Applies SEMISEG_SEED when set; throws on a malformed value.
void apply_env_overrides(ExperimentConfig& cfg);

}  // namespace semiseg
