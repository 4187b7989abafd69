#include "semiseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <stdexcept>

namespace semiseg {

void ContrastiveConfig::validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (samples_per_class < 1) throw std::invalid_argument("samples_per_class must be at least 1");
    if (lambda_cont < 0.0) throw std::invalid_argument("lambda_cont must be nonnegative");
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_sim: zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

torch::Tensor cosine_sim(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.dim() != 1 || b.dim() != 1 || a.size(0) != b.size(0)) {
        throw std::invalid_argument("cosine_sim: expects two vectors of equal length");
    }
    auto na = a.norm();
    auto nb = b.norm();
    if (na.item<double>() == 0.0 || nb.item<double>() == 0.0) {
        throw std::invalid_argument("cosine_sim: zero-norm vector");
    }
    return a.dot(b) / (na * nb);
}

namespace {

void check_map(const torch::Tensor& z, const torch::Tensor& labels) {
    if (z.dim() != 3 || labels.dim() != 2 || z.size(1) != labels.size(0) || z.size(2) != labels.size(1)) {
        throw std::invalid_argument("dims mismatch: expected z [D, H, W] and labels [H, W]");
    }
}

// Rows of `m` divided by their L2 norms; throws on a zero row.
torch::Tensor unit_rows(const torch::Tensor& m) {
    auto norms = m.norm(2, 1, /*keepdim=*/true);
    if ((norms == 0).any().item<bool>()) throw std::invalid_argument("cosine_sim: zero-norm vector");
    return m / norms;
}

// Sums and pixel counts of z per foreground class. z: [D, HW], labels: [HW].
std::pair<torch::Tensor, torch::Tensor> class_sums(const torch::Tensor& z_flat, const torch::Tensor& labels_flat,
                                                   int num_classes) {
    auto classes = torch::arange(1, num_classes + 1, labels_flat.options().dtype(torch::kInt64)).unsqueeze(1);
    auto onehot = (labels_flat.to(torch::kInt64).unsqueeze(0) == classes).to(z_flat.scalar_type());  // [C, HW]
    return {onehot.mm(z_flat.t()), onehot.sum(1)};
}

ClassMeanSet means_from_sums(const torch::Tensor& sums, const torch::Tensor& counts) {
    ClassMeanSet out;
    out.means = sums / counts.clamp_min(1.0).unsqueeze(1);
    auto counts_cpu = counts.detach().to(torch::kDouble).contiguous();
    const double* cnt = counts_cpu.data_ptr<double>();
    for (int64_t c = 0; c < counts_cpu.numel(); ++c) out.present.push_back(cnt[c] > 0.0);
    return out;
}

// Training-path normalization: a vector whose norm underflows kNormFloor
// (e.g. every ReLU feeding a pixel dead, zero head bias) gets similarity 0.
torch::Tensor guarded_unit_rows(const torch::Tensor& m) {
    return m / m.norm(2, 1, /*keepdim=*/true).clamp_min(kNormFloor);
}

}  // namespace

ClassMeanSet class_means(const torch::Tensor& z, const torch::Tensor& labels, int num_classes) {
    check_map(z, labels);
    if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
    auto [sums, counts] = class_sums(z.reshape({z.size(0), -1}), labels.reshape({-1}), num_classes);
    return means_from_sums(sums, counts);
}

std::vector<Coord> sample_coords(const torch::Tensor& labels, int c, int n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_coords: n must be at least 1");
    if (labels.dim() != 2) throw std::invalid_argument("sample_coords: labels must be [H, W]");
    auto lab = labels.to(torch::kInt64).contiguous();
    const int64_t* p = lab.data_ptr<int64_t>();
    const int rows = static_cast<int>(lab.size(0)), cols = static_cast<int>(lab.size(1));
    std::vector<Coord> pool;
    for (int r = 0; r < rows; ++r) {
        for (int col = 0; col < cols; ++col) {
            if (p[static_cast<std::size_t>(r) * cols + col] == c) pool.push_back({r, col});
        }
    }
    if (static_cast<int>(pool.size()) <= n) return pool;
    std::vector<Coord> out;
    out.reserve(static_cast<std::size_t>(n));
    std::sample(pool.begin(), pool.end(), std::back_inserter(out), n, rng.engine());
    return out;
}

PixelCoordSet sample_anchor_coords(const torch::Tensor& labels, int num_classes, int n, Rng& rng) {
    PixelCoordSet set;
    for (int c = 1; c <= num_classes; ++c) set.per_class.push_back(sample_coords(labels, c, n, rng));
    return set;
}

torch::Tensor contrastive_pixel_term(const torch::Tensor& z_i, const ClassMeanSet& means, int c, double tau) {
    if (!means.has(c)) throw std::invalid_argument("contrastive_pixel_term: class " + std::to_string(c) + " absent");
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
    std::vector<int64_t> present;
    int64_t own = -1;
    for (int k = 1; k <= means.num_classes(); ++k) {
        if (!means.has(k)) continue;
        if (k == c) own = static_cast<int64_t>(present.size());
        present.push_back(k - 1);
    }
    auto idx = torch::tensor(present, torch::kInt64);
    auto m = unit_rows(means.means.index_select(0, idx));
    auto a = unit_rows(z_i.reshape({1, -1}));
    auto logits = a.mm(m.t()).squeeze(0) / tau;
    return torch::logsumexp(logits, 0) - logits[own];
}

PairLoss contrastive_pair_loss(const torch::Tensor& z_x, const PixelCoordSet& anchors,
                               const ClassMeanSet& partner_means, double tau) {
    if (z_x.dim() != 3) throw std::invalid_argument("contrastive_pair_loss: z must be [D, H, W]");
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (anchors.num_classes() != partner_means.num_classes()) {
        throw std::invalid_argument("contrastive_pair_loss: class count mismatch");
    }
    const int64_t cols = z_x.size(2);

    // Columns of the similarity matrix: every class present in the partner.
    std::vector<int64_t> present;
    std::vector<int64_t> column_of(static_cast<std::size_t>(anchors.num_classes()), -1);
    for (int k = 1; k <= partner_means.num_classes(); ++k) {
        if (!partner_means.has(k)) continue;
        column_of[static_cast<std::size_t>(k - 1)] = static_cast<int64_t>(present.size());
        present.push_back(k - 1);
    }

    std::vector<int64_t> pixel_index, own_column;
    std::vector<double> weight;
    int shared = 0;
    for (int c = 1; c <= anchors.num_classes(); ++c) {
        if (!anchors.of(c).empty() && partner_means.has(c)) ++shared;
    }
    PairLoss out;
    out.shared_classes = shared;
    if (shared == 0) {
        out.value = torch::zeros({}, z_x.options());
        return out;
    }
    for (int c = 1; c <= anchors.num_classes(); ++c) {
        const auto& coords = anchors.of(c);
        if (coords.empty() || !partner_means.has(c)) continue;
        const double w = 1.0 / (static_cast<double>(coords.size()) * shared);
        for (const auto& p : coords) {
            if (p.row < 0 || p.col < 0 || p.row >= z_x.size(1) || p.col >= cols) {
                throw std::invalid_argument("anchor coordinate out of bounds");
            }
            pixel_index.push_back(p.row * cols + p.col);
            own_column.push_back(column_of[static_cast<std::size_t>(c - 1)]);
            weight.push_back(w);
        }
    }

    auto z_flat = z_x.reshape({z_x.size(0), -1}).t();  // [HW, D]
    auto a = guarded_unit_rows(z_flat.index_select(0, torch::tensor(pixel_index, torch::kInt64)));
    auto m = guarded_unit_rows(partner_means.means.index_select(0, torch::tensor(present, torch::kInt64)));
    auto logits = a.mm(m.t()) / tau;  // [N, K]
    auto own = logits.gather(1, torch::tensor(own_column, torch::kInt64).unsqueeze(1)).squeeze(1);
    auto per_anchor = torch::logsumexp(logits, 1) - own;
    auto w = torch::tensor(weight, torch::kDouble).to(z_x.scalar_type());
    out.value = (per_anchor * w).sum();
    return out;
}

PairLoss contrastive_pair_loss(const torch::Tensor& z_x, const torch::Tensor& labels_x,
                               const ClassMeanSet& partner_means, const ContrastiveConfig& cfg, Rng& rng) {
    check_map(z_x, labels_x);
    const auto anchors = sample_anchor_coords(labels_x, partner_means.num_classes(), cfg.samples_per_class, rng);
    return contrastive_pair_loss(z_x, anchors, partner_means, cfg.temperature);
}

BatchContrastive contrastive_batch_loss(const torch::Tensor& z, const torch::Tensor& labels, int num_classes,
                                        const ContrastiveConfig& cfg, Rng& rng) {
    cfg.validate();
    if (z.dim() != 4 || labels.dim() != 3 || z.size(0) != labels.size(0) || z.size(2) != labels.size(1) ||
        z.size(3) != labels.size(2)) {
        throw std::invalid_argument("dims mismatch: expected z [B, D, H, W] and labels [B, H, W]");
    }
    const int64_t batch = z.size(0);
    if (batch == 0) throw std::invalid_argument("contrastive_batch_loss: empty batch");

    std::vector<ClassMeanSet> means;
    ClassMeanSet pooled;
    if (cfg.mode == MatchMode::pooled) {
        torch::Tensor sums, counts;
        for (int64_t b = 0; b < batch; ++b) {
            auto [s, n] = class_sums(z[b].reshape({z.size(1), -1}), labels[b].reshape({-1}), num_classes);
            sums = sums.defined() ? sums + s : s;
            counts = counts.defined() ? counts + n : n;
        }
        pooled = means_from_sums(sums, counts);
    } else {
        for (int64_t b = 0; b < batch; ++b) means.push_back(class_means(z[b], labels[b], num_classes));
    }

    BatchContrastive out;
    torch::Tensor sum;
    for (int64_t b = 0; b < batch; ++b) {
        int partner = static_cast<int>(b);
        if (cfg.mode == MatchMode::inter) partner = rng.uniform_int(0, static_cast<int>(batch) - 1);
        if (cfg.mode == MatchMode::pooled) partner = -1;
        out.partners.push_back(partner);
        const ClassMeanSet& target = partner < 0 ? pooled : means[static_cast<std::size_t>(partner)];
        const auto anchors = sample_anchor_coords(labels[b], num_classes, cfg.samples_per_class, rng);
        auto pair = contrastive_pair_loss(z[b], anchors, target, cfg.temperature);
        if (pair.no_shared_classes()) continue;
        sum = sum.defined() ? sum + pair.value : pair.value;
        ++out.contributing_images;
    }
    out.value = out.contributing_images > 0 ? sum / static_cast<double>(out.contributing_images)
                                            : torch::zeros({}, z.options());
    return out;
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& labels, double eps) {
    if (probs.dim() != 4 || labels.dim() != 3 || probs.size(0) != labels.size(0) || probs.size(2) != labels.size(1) ||
        probs.size(3) != labels.size(2)) {
        throw std::invalid_argument("dims mismatch: expected probs [B, C+1, H, W] and labels [B, H, W]");
    }
    const int64_t channels = probs.size(1);
    if (channels < 2) throw std::invalid_argument("dice_loss needs at least one foreground channel");
    auto lab = labels.to(torch::kInt64);
    if (lab.numel() > 0 && (lab.min().item<int64_t>() < 0 || lab.max().item<int64_t>() >= channels)) {
        throw std::invalid_argument("label out of range");
    }

    std::vector<torch::Tensor> present_terms, all_terms;
    for (int64_t c = 1; c < channels; ++c) {
        auto g = (lab == c).to(probs.scalar_type());
        auto p = probs.select(1, c);
        const auto g_sum = g.sum();
        auto d = (2.0 * (p * g).sum() + eps) / ((p * p).sum() + g_sum + eps);
        all_terms.push_back(d);
        if (g_sum.item<double>() > 0.0) present_terms.push_back(d);
    }
    const auto& terms = present_terms.empty() ? all_terms : present_terms;
    return 1.0 - torch::stack(terms).mean();
}

void LossAudit::record(LossKind kind, std::span<const SliceSource> sources) {
    LossCall call;
    call.iteration = iteration;
    call.kind = kind;
    for (auto s : sources) {
        if (s == SliceSource::labeled) ++call.labeled_slices;
        else ++call.pseudo_slices;
    }
    calls.push_back(call);
}

LossTerms total_loss(const LossInputs& in, int num_classes, const ContrastiveConfig& cfg, Rng& rng,
                     LossAudit* audit) {
    if (std::none_of(in.seg_sources.begin(), in.seg_sources.end(),
                     [](SliceSource s) { return s == SliceSource::labeled; })) {
        throw std::invalid_argument("total_loss: no labeled slices in the segmentation batch");
    }
    if (static_cast<int64_t>(in.seg_sources.size()) != in.seg_probs.size(0)) {
        throw std::invalid_argument("total_loss: seg_sources size does not match the batch");
    }
    LossTerms out;
    auto seg = dice_loss(in.seg_probs, in.seg_labels);
    if (audit) audit->record(LossKind::dice, in.seg_sources);
    out.seg = seg.item<double>();
    out.total = seg;
    if (in.embeddings.defined()) {
        auto cont = contrastive_batch_loss(in.embeddings, in.cont_labels, num_classes, cfg, rng);
        if (audit) audit->record(LossKind::contrastive, in.cont_sources);
        out.cont = cont.value.item<double>();
        out.has_contrastive = true;
        out.total = seg + cfg.lambda_cont * cont.value;
    }
    return out;
}

}  // namespace semiseg
