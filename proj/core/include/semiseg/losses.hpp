#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "semiseg/dataset.hpp"
#include "semiseg/rng.hpp"

namespace semiseg {

/// How the class means an anchor is contrasted against are chosen.
enum class MatchMode {
    intra,   ///< means from the anchor's own image
    inter,   ///< means from one partner drawn uniformly (with replacement) from the batch
    pooled,  ///< means pooled over every image of the batch
};

struct ContrastiveConfig {
    double temperature = 0.1;
    int samples_per_class = 3;
    MatchMode mode = MatchMode::intra;
    double lambda_cont = 0.1;

    void validate() const;
};

struct Coord {
    int row = 0;
    int col = 0;
    bool operator==(const Coord&) const = default;
};

/// Anchor coordinates per foreground class; per_class[c - 1] holds class c.
struct PixelCoordSet {
    std::vector<std::vector<Coord>> per_class;

    int num_classes() const noexcept { return static_cast<int>(per_class.size()); }
    const std::vector<Coord>& of(int c) const { return per_class.at(static_cast<std::size_t>(c - 1)); }
};

/// Per-class mean representation of one image (or of a pooled batch).
struct ClassMeanSet {
    torch::Tensor means;        ///< [C, D]; rows of absent classes are zero
    std::vector<bool> present;  ///< present[c - 1]

    int num_classes() const noexcept { return static_cast<int>(present.size()); }
    bool has(int c) const { return c >= 1 && c <= num_classes() && present[static_cast<std::size_t>(c - 1)]; }
};

/// a.b / (|a| |b|). Throws std::invalid_argument on a zero-norm input.
double cosine_sim(std::span<const double> a, std::span<const double> b);
torch::Tensor cosine_sim(const torch::Tensor& a, const torch::Tensor& b);

/// Mean of z over ALL pixels of each foreground class. z: [D, H, W], labels: [H, W].
ClassMeanSet class_means(const torch::Tensor& z, const torch::Tensor& labels, int num_classes);

/// min(n, |S_c|) coordinates drawn uniformly without replacement from the
/// pixels labelled c, returned in row-major order.
std::vector<Coord> sample_coords(const torch::Tensor& labels, int c, int n, Rng& rng);

/// sample_coords for c = 1..num_classes, in class order.
PixelCoordSet sample_anchor_coords(const torch::Tensor& labels, int num_classes, int n, Rng& rng);

/// -log( e^{s_c/tau} / sum_{k present} e^{s_k/tau} ) with s_k = sim(z_i, mean_k).
/// Negatives are the other present foreground classes. Throws if c is absent.
torch::Tensor contrastive_pixel_term(const torch::Tensor& z_i, const ClassMeanSet& means, int c, double tau);

/// Norm floor of the batched training losses below. Zero vectors there get
/// similarity 0 instead of the error raised by cosine_sim.
inline constexpr double kNormFloor = 1e-12;

struct PairLoss {
    torch::Tensor value;
    int shared_classes = 0;

    bool no_shared_classes() const noexcept { return shared_classes == 0; }
};

/// Average over classes with anchors in x and a mean in x' of the per-class
/// average pixel term. Zero with shared_classes == 0 when nothing is shared.
PairLoss contrastive_pair_loss(const torch::Tensor& z_x, const PixelCoordSet& anchors,
                               const ClassMeanSet& partner_means, double tau);

/// Samples anchors from labels_x (cfg.samples_per_class per class) first.
PairLoss contrastive_pair_loss(const torch::Tensor& z_x, const torch::Tensor& labels_x,
                               const ClassMeanSet& partner_means, const ContrastiveConfig& cfg, Rng& rng);

struct BatchContrastive {
    torch::Tensor value;
    int contributing_images = 0;
    std::vector<int> partners;  ///< partner index per anchor image (-1 in pooled mode)
};

/// z: [B, D, H, W], labels: [B, H, W]. For each anchor image b in order: draw the
/// partner (inter mode only), then sample anchors for classes 1..C. Returns the
/// mean pair loss over images sharing at least one class with their partner.
BatchContrastive contrastive_batch_loss(const torch::Tensor& z, const torch::Tensor& labels, int num_classes,
                                        const ContrastiveConfig& cfg, Rng& rng);

inline constexpr double kDiceEps = 1e-6;

/// Soft Dice: 1 - mean_c (2 sum p_c g_c + eps) / (sum p_c^2 + sum g_c^2 + eps),
/// sums pooled over the batch, mean over foreground classes present in the
/// ground truth (over all foreground classes when none is present).
/// probs: [B, C+1, H, W], labels: [B, H, W].
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& labels, double eps = kDiceEps);

enum class LossKind : std::uint8_t { dice, contrastive };

struct LossCall {
    std::int64_t iteration = 0;
    LossKind kind = LossKind::dice;
    int labeled_slices = 0;
    int pseudo_slices = 0;
};

/// Records every loss evaluation with the provenance of the slices it saw.
struct LossAudit {
    std::int64_t iteration = 0;
    std::vector<LossCall> calls;

    void record(LossKind kind, std::span<const SliceSource> sources);
};

struct LossTerms {
    torch::Tensor total;
    double seg = 0.0;
    double cont = 0.0;
    bool has_contrastive = false;
};

/// Inputs of one optimisation step. seg_* may contain labeled and (in the
/// self-training style modes) pseudo-labeled slices; cont_* every slice that
/// enters the contrastive term. Leave `embeddings` undefined to skip it.
struct LossInputs {
    torch::Tensor seg_probs;
    torch::Tensor seg_labels;
    std::vector<SliceSource> seg_sources;
    torch::Tensor embeddings;
    torch::Tensor cont_labels;
    std::vector<SliceSource> cont_sources;
};

/// L_seg + lambda_cont * L_cont. Throws when the segmentation slices contain no
/// labeled slice.
LossTerms total_loss(const LossInputs& in, int num_classes, const ContrastiveConfig& cfg, Rng& rng,
                     LossAudit* audit = nullptr);

}  // namespace semiseg
