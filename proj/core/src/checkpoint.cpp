#include "semiseg/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "semiseg/rng.hpp"

namespace semiseg {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic{'S', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

std::string dtype_name(const torch::Tensor& t) {
    switch (t.scalar_type()) {
        case torch::kFloat32: return "f32";
        case torch::kInt64: return "i64";
        default: throw std::invalid_argument("unsupported checkpoint dtype");
    }
}

torch::ScalarType dtype_from(const std::string& name) {
    if (name == "f32") return torch::kFloat32;
    if (name == "i64") return torch::kInt64;
    throw std::runtime_error("corrupt checkpoint: unknown dtype " + name);
}

}  // namespace

json to_json(const NetworkConfig& cfg) {
    return json{{"num_enc_blocks", cfg.num_enc_blocks},
                {"num_dec_blocks", cfg.num_dec_blocks},
                {"base_channels", cfg.base_channels},
                {"num_classes_plus_bg", cfg.num_classes_plus_bg},
                {"contrastive_dim", cfg.contrastive_dim},
                {"input_dims", cfg.input_dims}};
}

NetworkConfig network_config_from_json(const json& j) {
    NetworkConfig cfg;
    cfg.num_enc_blocks = j.at("num_enc_blocks").get<int>();
    cfg.num_dec_blocks = j.at("num_dec_blocks").get<int>();
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.num_classes_plus_bg = j.at("num_classes_plus_bg").get<int>();
    cfg.contrastive_dim = j.at("contrastive_dim").get<int>();
    cfg.input_dims = j.at("input_dims").get<std::array<int, 2>>();
    return cfg;
}

const torch::Tensor* CheckpointData::find(const std::string& name) const {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const auto& kv) { return kv.first == name; });
    return it == arrays.end() ? nullptr : &it->second;
}

void save_checkpoint(const fs::path& path, SegNet& net, const Adam* optimizer, std::int64_t iteration,
                     const json& extra) {
    std::vector<std::pair<std::string, torch::Tensor>> arrays;
    for (const auto& p : net->named_parameters()) arrays.emplace_back("net/" + p.key(), p.value());
    for (const auto& b : net->named_buffers()) arrays.emplace_back("net/" + b.key(), b.value());

    json opt = json::object();
    if (optimizer) {
        const auto& o = optimizer->options();
        opt["options"] = {{"learning_rate", o.learning_rate}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
        opt["steps"] = json::object();
        for (const auto& [name, slot] : optimizer->state()) {
            opt["steps"][name] = slot.step;
            arrays.emplace_back("adam/" + name + "/exp_avg", slot.exp_avg);
            arrays.emplace_back("adam/" + name + "/exp_avg_sq", slot.exp_avg_sq);
        }
    }

    json table = json::array();
    std::uint64_t offset = 0;
    std::vector<torch::Tensor> contiguous;
    for (const auto& [name, t] : arrays) {
        auto c = t.detach().contiguous();
        const auto nbytes = static_cast<std::uint64_t>(c.numel()) * c.element_size();
        table.push_back({{"name", name}, {"dtype", dtype_name(c)}, {"shape", c.sizes().vec()},
                         {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
        contiguous.push_back(std::move(c));
    }

    json header{{"format", "semiseg-checkpoint"},
                {"version", kCheckpointVersion},
                {"network", to_json(net->config())},
                {"iteration", iteration},
                {"optimizer", opt},
                {"extra", extra},
                {"arrays", table}};
    const std::string text = header.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
        out.write(kMagic.data(), kMagic.size());
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& c : contiguous) {
            out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
        }
        if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
    }
    fs::rename(tmp, path);
}

CheckpointData read_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing checkpoint: " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw std::runtime_error("corrupt checkpoint (bad magic): " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint (header length): " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("corrupt checkpoint (truncated header): " + path.string());

    CheckpointData data;
    try {
        const json header = json::parse(text);
        if (header.at("format") != "semiseg-checkpoint") throw std::runtime_error("not a semiseg checkpoint");
        if (header.at("version").get<std::uint32_t>() != kCheckpointVersion) {
            throw std::runtime_error("unsupported checkpoint version");
        }
        data.config = network_config_from_json(header.at("network"));
        data.iteration = header.at("iteration").get<std::int64_t>();
        data.extra = header.at("extra");
        data.optimizer = header.at("optimizer");
        const auto payload_start = in.tellg();
        for (const auto& entry : header.at("arrays")) {
            const auto shape = entry.at("shape").get<std::vector<int64_t>>();
            auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
            const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
            if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
                throw std::runtime_error("array size mismatch for " + entry.at("name").get<std::string>());
            }
            in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
            in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
            if (!in) throw std::runtime_error("truncated payload");
            data.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(t));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
    }
    return data;
}

namespace {

void copy_into(const CheckpointData& data, const std::string& name, torch::Tensor& target) {
    const torch::Tensor* src = data.find(name);
    if (src == nullptr) throw std::runtime_error("checkpoint lacks array " + name);
    if (src->sizes() != target.sizes() || src->scalar_type() != target.scalar_type()) {
        throw std::runtime_error("checkpoint array " + name + " does not match the network");
    }
    target.copy_(*src);
}

}  // namespace

std::int64_t load_checkpoint(const fs::path& path, SegNet& net, Adam* optimizer) {
    const CheckpointData data = read_checkpoint(path);
    if (!(data.config == net->config())) {
        throw std::invalid_argument("config mismatch: checkpoint network config differs from the requested one");
    }
    torch::NoGradGuard no_grad;
    for (auto& p : net->named_parameters()) copy_into(data, "net/" + p.key(), p.value());
    for (auto& b : net->named_buffers()) copy_into(data, "net/" + b.key(), b.value());

    if (optimizer) {
        optimizer->reset();
        if (data.optimizer.contains("steps")) {
            for (const auto& [name, step] : data.optimizer.at("steps").items()) {
                Adam::Slot slot;
                slot.step = step.get<std::int64_t>();
                const auto* m = data.find("adam/" + name + "/exp_avg");
                const auto* v = data.find("adam/" + name + "/exp_avg_sq");
                if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer moments for " + name);
                slot.exp_avg = m->clone();
                slot.exp_avg_sq = v->clone();
                optimizer->state()[name] = std::move(slot);
            }
        }
    }
    return data.iteration;
}

SegNet load_network(const fs::path& path) {
    const CheckpointData data = read_checkpoint(path);
    SegNet net(data.config);
    load_checkpoint(path, net, nullptr);
    return net;
}

void load_pretrained_backbone(const fs::path& path, SegNet& net, std::uint64_t head_seed) {
    const CheckpointData data = read_checkpoint(path);
    reinit_module(*net->seg_head(), head_seed);
    reinit_module(*net->contrastive_head(), mix_seed(head_seed, 1));
    torch::NoGradGuard no_grad;
    for (auto& p : net->backbone()->named_parameters()) copy_into(data, "net/backbone." + p.key(), p.value());
    for (auto& b : net->backbone()->named_buffers()) copy_into(data, "net/backbone." + b.key(), b.value());
}

}  // namespace semiseg
