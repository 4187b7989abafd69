#include "semiseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace semiseg {

namespace nn = torch::nn;

std::vector<int> NetworkConfig::encoder_channels() const {
    std::vector<int> ch;
    for (int i = 0; i < num_enc_blocks; ++i) ch.push_back(base_channels << i);
    return ch;
}

void NetworkConfig::validate() const {
    if (num_enc_blocks < 1) throw std::invalid_argument("num_enc_blocks must be positive");
    if (num_dec_blocks != num_enc_blocks - 1) throw std::invalid_argument("num_dec_blocks must equal num_enc_blocks - 1");
    if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");
    if (num_classes_plus_bg < 2) throw std::invalid_argument("num_classes_plus_bg must be at least 2");
    if (contrastive_dim < 2) throw std::invalid_argument("contrastive_dim must be at least 2");
    const int div = 1 << num_dec_blocks;
    if (input_dims[0] <= 0 || input_dims[1] <= 0 || input_dims[0] % div != 0 || input_dims[1] % div != 0) {
        throw std::invalid_argument("input dims must be positive multiples of 2^num_dec_blocks");
    }
}

namespace {

nn::Conv2d conv(int in, int out, int k, bool bias) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).padding(k / 2).bias(bias));
}

}  // namespace

ConvBlockImpl::ConvBlockImpl(int in_channels, int out_channels)
    : conv1_(register_module("conv1", conv(in_channels, out_channels, 3, false))),
      conv2_(register_module("conv2", conv(out_channels, out_channels, 3, false))),
      bn1_(register_module("bn1", nn::BatchNorm2d(out_channels))),
      bn2_(register_module("bn2", nn::BatchNorm2d(out_channels))) {}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1_(conv1_(x)));
    return torch::relu(bn2_(conv2_(h)));
}

BackboneImpl::BackboneImpl(const NetworkConfig& cfg) {
    const auto ch = cfg.encoder_channels();
    for (int i = 0; i < cfg.num_enc_blocks; ++i) {
        encoder_.push_back(register_module("enc" + std::to_string(i), ConvBlock(i == 0 ? 1 : ch[i - 1], ch[i])));
    }
    // decoder_[j] upsamples from level (n-1-j) to level (n-2-j).
    for (int j = 0; j < cfg.num_dec_blocks; ++j) {
        const int level = cfg.num_enc_blocks - 2 - j;
        decoder_.push_back(register_module("dec" + std::to_string(j), ConvBlock(ch[level + 1] + ch[level], ch[level])));
    }
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> skips;
    auto h = x;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        h = encoder_[i]->forward(h);
        if (i + 1 < encoder_.size()) {
            skips.push_back(h);
            h = torch::max_pool2d(h, 2, 2);
        }
    }
    for (auto& block : decoder_) {
        h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
        h = block->forward(torch::cat({h, skips.back()}, 1));
        skips.pop_back();
    }
    return h;
}

SegHeadImpl::SegHeadImpl(int features, int num_outputs)
    : conv1_(register_module("conv1", conv(features, features, 3, false))),
      conv2_(register_module("conv2", conv(features, features, 3, false))),
      out_(register_module("out", conv(features, num_outputs, 3, true))),
      bn1_(register_module("bn1", nn::BatchNorm2d(features))),
      bn2_(register_module("bn2", nn::BatchNorm2d(features))) {}

torch::Tensor SegHeadImpl::forward(const torch::Tensor& features) {
    auto h = torch::relu(bn1_(conv1_(features)));
    h = torch::relu(bn2_(conv2_(h)));
    return out_(h);
}

ContrastiveHeadImpl::ContrastiveHeadImpl(int features, int dim)
    : conv1_(register_module("conv1", conv(features, std::max(features, dim), 1, false))),
      out_(register_module("out", conv(std::max(features, dim), dim, 1, true))),
      bn1_(register_module("bn1", nn::BatchNorm2d(std::max(features, dim)))) {}

torch::Tensor ContrastiveHeadImpl::forward(const torch::Tensor& features) {
    return out_(torch::relu(bn1_(conv1_(features))));
}

SegNetImpl::SegNetImpl(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    backbone_ = register_module("backbone", Backbone(cfg_));
    seg_head_ = register_module("seg_head", SegHead(cfg_.feature_width(), cfg_.num_classes_plus_bg));
    contrastive_head_ = register_module("contrastive_head", ContrastiveHead(cfg_.feature_width(), cfg_.contrastive_dim));
}

torch::Tensor SegNetImpl::features(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != cfg_.input_dims[0] ||
        images.size(3) != cfg_.input_dims[1]) {
        throw std::invalid_argument("dim mismatch: expected [B, 1, " + std::to_string(cfg_.input_dims[0]) + ", " +
                                    std::to_string(cfg_.input_dims[1]) + "] input");
    }
    return backbone_->forward(images);
}

void SegNetImpl::check_features(const torch::Tensor& f) const {
    if (f.dim() != 4 || f.size(1) != cfg_.feature_width()) {
        throw std::invalid_argument("dim mismatch: head expects [B, " + std::to_string(cfg_.feature_width()) +
                                    ", H, W] features");
    }
}

torch::Tensor SegNetImpl::seg_logits(const torch::Tensor& features) {
    check_features(features);
    return seg_head_->forward(features);
}

torch::Tensor SegNetImpl::segment(const torch::Tensor& features) {
    return torch::softmax(seg_logits(features), 1);
}

torch::Tensor SegNetImpl::embed(const torch::Tensor& features) {
    check_features(features);
    return contrastive_head_->forward(features);
}

void reinit_module(nn::Module& module, std::uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard no_grad;
    for (auto& m : module.modules(/*include_self=*/true)) {
        if (auto* c = m->as<nn::Conv2d>()) {
            const auto fan_in = c->weight.size(1) * c->weight.size(2) * c->weight.size(3);
            c->weight.normal_(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), gen);
            if (c->bias.defined()) c->bias.zero_();
        } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
            bn->weight.fill_(1.0);
            bn->bias.zero_();
            bn->running_mean.zero_();
            bn->running_var.fill_(1.0);
            bn->num_batches_tracked.zero_();
        }
    }
}

SegNet init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
    SegNet net(cfg);
    reinit_module(*net, seed);
    return net;
}

StateSnapshot snapshot(SegNet& net) {
    StateSnapshot out;
    torch::NoGradGuard no_grad;
    for (const auto& p : net->named_parameters()) out.emplace_back(p.key(), p.value().detach().clone());
    for (const auto& b : net->named_buffers()) out.emplace_back(b.key(), b.value().detach().clone());
    return out;
}

void restore(SegNet& net, const StateSnapshot& state) {
    torch::NoGradGuard no_grad;
    auto params = net->named_parameters();
    auto buffers = net->named_buffers();
    std::size_t matched = 0;
    for (const auto& [name, value] : state) {
        torch::Tensor* target = params.find(name);
        if (target == nullptr) target = buffers.find(name);
        if (target == nullptr) throw std::invalid_argument("unknown tensor in snapshot: " + name);
        if (target->sizes() != value.sizes()) throw std::invalid_argument("shape mismatch for " + name);
        target->copy_(value);
        ++matched;
    }
    if (matched != params.size() + buffers.size()) throw std::invalid_argument("snapshot does not cover the network");
}

InferenceGuard::InferenceGuard(nn::Module& m) : module_(m), was_training_(m.is_training()) { module_.eval(); }

InferenceGuard::~InferenceGuard() { module_.train(was_training_); }

torch::Tensor images_to_tensor(std::span<const Image> images) {
    if (images.empty()) throw std::invalid_argument("no images");
    const int rows = images.front().rows(), cols = images.front().cols();
    auto out = torch::empty({static_cast<int64_t>(images.size()), 1, rows, cols}, torch::kFloat32);
    float* dst = out.data_ptr<float>();
    for (const auto& img : images) {
        if (img.rows() != rows || img.cols() != cols) throw std::invalid_argument("image dims differ within batch");
        dst = std::copy(img.values().begin(), img.values().end(), dst);
    }
    return out;
}

torch::Tensor labels_to_tensor(std::span<const LabelMap> labels) {
    if (labels.empty()) throw std::invalid_argument("no label maps");
    const int rows = labels.front().rows(), cols = labels.front().cols();
    auto out = torch::empty({static_cast<int64_t>(labels.size()), rows, cols}, torch::kInt64);
    int64_t* dst = out.data_ptr<int64_t>();
    for (const auto& map : labels) {
        if (map.rows() != rows || map.cols() != cols) throw std::invalid_argument("label dims differ within batch");
        dst = std::copy(map.values().begin(), map.values().end(), dst);
    }
    return out;
}

std::vector<LabelMap> segment_slices(SegNet& net, std::span<const Image> slices, int batch_size) {
    InferenceGuard guard(*net);
    std::vector<LabelMap> out;
    out.reserve(slices.size());
    for (std::size_t start = 0; start < slices.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto n = std::min(static_cast<std::size_t>(batch_size), slices.size() - start);
        auto x = images_to_tensor(slices.subspan(start, n));
        auto pred = net->seg_logits(net->features(x)).argmax(1).to(torch::kUInt8).contiguous();
        const int rows = static_cast<int>(pred.size(1)), cols = static_cast<int>(pred.size(2));
        const auto* p = pred.data_ptr<std::uint8_t>();
        for (std::size_t b = 0; b < n; ++b) {
            const auto* first = p + b * static_cast<std::size_t>(rows) * cols;
            out.emplace_back(rows, cols, std::vector<std::uint8_t>(first, first + static_cast<std::size_t>(rows) * cols));
        }
    }
    return out;
}

LabelVolume segment_volume(SegNet& net, const Volume& volume, int batch_size) {
    std::vector<Image> slices;
    for (int s = 0; s < volume.slices; ++s) slices.push_back(volume.slice(s));
    const auto maps = segment_slices(net, slices, batch_size);
    LabelVolume out(volume.slices, volume.rows, volume.cols, net->config().num_classes_plus_bg - 1);
    for (int s = 0; s < volume.slices; ++s) out.set_slice(s, maps[static_cast<std::size_t>(s)]);
    return out;
}

Adam::Adam(std::vector<std::pair<std::string, torch::Tensor>> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
    if (opts_.learning_rate < 0.0) throw std::invalid_argument("learning rate must be nonnegative");
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) {
        if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
    }
}

void Adam::step() {
    torch::NoGradGuard no_grad;
    for (auto& [name, p] : params_) {
        const auto& g = p.grad();
        if (!g.defined()) continue;
        auto [it, inserted] = state_.try_emplace(name);
        Slot& s = it->second;
        if (inserted) {
            s.exp_avg = torch::zeros_like(p);
            s.exp_avg_sq = torch::zeros_like(p);
        }
        s.step += 1;
        s.exp_avg.mul_(opts_.beta1).add_(g, 1.0 - opts_.beta1);
        s.exp_avg_sq.mul_(opts_.beta2).addcmul_(g, g, 1.0 - opts_.beta2);
        const double bias1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(s.step));
        const double bias2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(s.step));
        auto denom = (s.exp_avg_sq.sqrt() / std::sqrt(bias2)).add_(opts_.eps);
        p.addcdiv_(s.exp_avg, denom, -opts_.learning_rate / bias1);
    }
}

void Adam::reset(const std::string& prefix) {
    std::erase_if(state_, [&](const auto& kv) { return kv.first.starts_with(prefix); });
}

Adam make_adam(SegNet& net, const AdamOptions& opts) {
    std::vector<std::pair<std::string, torch::Tensor>> params;
    for (const auto& p : net->named_parameters()) params.emplace_back(p.key(), p.value());
    return Adam(std::move(params), opts);
}

}  // namespace semiseg
