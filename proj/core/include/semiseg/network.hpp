#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "semiseg/grid.hpp"
#include "semiseg/volume.hpp"

namespace semiseg {

/// Encoder-decoder backbone with a segmentation head and a contrastive head.
///
/// Encoder block i has base_channels * 2^i channels; every block but the last
/// is followed by 2x2 max pooling, so num_dec_blocks = num_enc_blocks - 1.
struct NetworkConfig {
    int num_enc_blocks = 4;
    int num_dec_blocks = 3;
    int base_channels = 8;
    int num_classes_plus_bg = 4;
    int contrastive_dim = 16;
    std::array<int, 2> input_dims{64, 64};

    std::vector<int> encoder_channels() const;
    /// Channel width of the backbone output.
    int feature_width() const { return base_channels; }
    void validate() const;
    bool operator==(const NetworkConfig&) const = default;
};

/// Two 3x3 convolutions, each followed by batch-norm and ReLU.
class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int in_channels, int out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(ConvBlock);

class BackboneImpl : public torch::nn::Module {
public:
    explicit BackboneImpl(const NetworkConfig& cfg);
    /// [B, 1, H, W] -> [B, F, H, W].
    torch::Tensor forward(const torch::Tensor& x);

private:
    std::vector<ConvBlock> encoder_;
    std::vector<ConvBlock> decoder_;
};
TORCH_MODULE(Backbone);

/// Three 3x3 convolutions; the last one emits C+1 logits without BN/ReLU.
class SegHeadImpl : public torch::nn::Module {
public:
    SegHeadImpl(int features, int num_outputs);
    torch::Tensor forward(const torch::Tensor& features);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, out_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(SegHead);

/// Two 1x1 convolutions with BN+ReLU between; the hidden width is max(F, D).
class ContrastiveHeadImpl : public torch::nn::Module {
public:
    ContrastiveHeadImpl(int features, int dim);
    torch::Tensor forward(const torch::Tensor& features);

private:
    torch::nn::Conv2d conv1_{nullptr}, out_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr};
};
TORCH_MODULE(ContrastiveHead);

/// Parameters are split into theta (backbone), xi (seg head) and phi
/// (contrastive head), registered as "backbone", "seg_head", "contrastive_head".
class SegNetImpl : public torch::nn::Module {
public:
    explicit SegNetImpl(const NetworkConfig& cfg);

    /// Backbone features [B, F, H, W]; input [B, 1, H, W] must match cfg.input_dims.
    torch::Tensor features(const torch::Tensor& images);
    /// Pre-softmax segmentation scores [B, C+1, H, W].
    torch::Tensor seg_logits(const torch::Tensor& features);
    /// Per-pixel softmax over the C+1 channels.
    torch::Tensor segment(const torch::Tensor& features);
    /// Pixel representations z [B, D, H, W].
    torch::Tensor embed(const torch::Tensor& features);

    const NetworkConfig& config() const noexcept { return cfg_; }
    Backbone& backbone() noexcept { return backbone_; }
    SegHead& seg_head() noexcept { return seg_head_; }
    ContrastiveHead& contrastive_head() noexcept { return contrastive_head_; }

private:
    void check_features(const torch::Tensor& f) const;

    NetworkConfig cfg_;
    Backbone backbone_{nullptr};
    SegHead seg_head_{nullptr};
    ContrastiveHead contrastive_head_{nullptr};
};
TORCH_MODULE(SegNet);

/// He-normal convolution weights (std = sqrt(2 / fan_in)), zero biases,
/// batch-norm scale 1 / shift 0. Deterministic given seed.
SegNet init_parameters(const NetworkConfig& cfg, std::uint64_t seed);

/// Re-draws the weights of one submodule (e.g. the contrastive head) in place.
void reinit_module(torch::nn::Module& module, std::uint64_t seed);

/// Named parameters and buffers (running stats included) of the whole network.
using StateSnapshot = std::vector<std::pair<std::string, torch::Tensor>>;
StateSnapshot snapshot(SegNet& net);
void restore(SegNet& net, const StateSnapshot& state);

/// Scoped eval()/no-grad; restores the previous training flag.
class InferenceGuard {
public:
    explicit InferenceGuard(torch::nn::Module& m);
    ~InferenceGuard();
    InferenceGuard(const InferenceGuard&) = delete;
    InferenceGuard& operator=(const InferenceGuard&) = delete;

private:
    torch::nn::Module& module_;
    bool was_training_;
    torch::NoGradGuard no_grad_;
};

torch::Tensor images_to_tensor(std::span<const Image> images);
torch::Tensor labels_to_tensor(std::span<const LabelMap> labels);

/// Argmax labels of every slice (inference mode, no augmentation). Ties go to
/// the lowest class index.
LabelVolume segment_volume(SegNet& net, const Volume& volume, int batch_size = 16);
std::vector<LabelMap> segment_slices(SegNet& net, std::span<const Image> slices, int batch_size = 16);

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam keyed by parameter name so the state can be checkpointed, reset per
/// submodule, or dropped at a pseudo-label refresh. Parameters whose gradient
/// is undefined are skipped.
class Adam {
public:
    struct Slot {
        torch::Tensor exp_avg;
        torch::Tensor exp_avg_sq;
        std::int64_t step = 0;
    };

    Adam(std::vector<std::pair<std::string, torch::Tensor>> params, AdamOptions opts);

    void zero_grad();
    void step();
    /// Drops state for every parameter whose name starts with `prefix` (all when empty).
    void reset(const std::string& prefix = {});

    const AdamOptions& options() const noexcept { return opts_; }
    std::map<std::string, Slot>& state() noexcept { return state_; }
    const std::map<std::string, Slot>& state() const noexcept { return state_; }
    const std::vector<std::pair<std::string, torch::Tensor>>& params() const noexcept { return params_; }

private:
    std::vector<std::pair<std::string, torch::Tensor>> params_;
    AdamOptions opts_;
    std::map<std::string, Slot> state_;
};

Adam make_adam(SegNet& net, const AdamOptions& opts);

}  // namespace semiseg
