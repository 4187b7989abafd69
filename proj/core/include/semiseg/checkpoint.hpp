#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semiseg/network.hpp"

namespace semiseg {

/// Checkpoint container, version 1:
///
///   bytes 0..7   magic "SSEGCKPT"
///   bytes 8..15  header length N (uint64, little endian)
///   N bytes      JSON header: format version, network config echo, iteration,
///                optimizer hyperparameters and step counters, user "extra"
///                record, and an array table {name, dtype, shape, offset, nbytes}
///   payload      raw little-endian array data, concatenated in table order
///
/// Array names: "net/<parameter or buffer path>" for the network and
/// "adam/<parameter path>/exp_avg|exp_avg_sq" for optimizer moments.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
    NetworkConfig config;
    std::int64_t iteration = 0;
    nlohmann::json extra;
    nlohmann::json optimizer;  // {"options": {...}, "steps": {name: step}}
    std::vector<std::pair<std::string, torch::Tensor>> arrays;

    const torch::Tensor* find(const std::string& name) const;
};

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, SegNet& net, const Adam* optimizer,
                     std::int64_t iteration, const nlohmann::json& extra = nlohmann::json::object());

CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Loads network (and optimizer moments when given) in place and returns the
/// stored iteration. Throws when the stored config differs from net's config.
std::int64_t load_checkpoint(const std::filesystem::path& path, SegNet& net, Adam* optimizer = nullptr);

/// Builds a network from the config stored in the checkpoint.
SegNet load_network(const std::filesystem::path& path);

/// Copies only backbone tensors from a checkpoint; both heads are re-drawn from
/// `head_seed`. Backbone shapes must match.
void load_pretrained_backbone(const std::filesystem::path& path, SegNet& net, std::uint64_t head_seed);

}  // namespace semiseg
