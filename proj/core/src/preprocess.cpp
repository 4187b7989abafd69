#include "semiseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace semiseg {

void PreprocessConfig::validate() const {
    if (!(target_resolution[0] > 0.0) || !(target_resolution[1] > 0.0)) {
        throw std::invalid_argument("target resolution must be positive");
    }
    if (target_dims[0] <= 0 || target_dims[1] <= 0) throw std::invalid_argument("target dims must be positive");
    if (!(low_percentile >= 0.0 && low_percentile < high_percentile && high_percentile <= 100.0)) {
        throw std::invalid_argument("percentiles must satisfy 0 <= low < high <= 100");
    }
}

double percentile(std::span<const float> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    if (q < 0.0 || q > 100.0) throw std::invalid_argument("percentile outside [0, 100]");
    std::vector<float> v(values.begin(), values.end());
    const double rank = q / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, v.size() - 1);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
    const double v_lo = v[lo];
    if (hi == lo) return v_lo;
    const double v_hi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
    return v_lo + (rank - static_cast<double>(lo)) * (v_hi - v_lo);
}

Volume percentile_normalize(const Volume& vol, double low, double high) {
    if (vol.intensities.empty()) throw std::invalid_argument("empty volume");
    const double p_lo = percentile(vol.intensities, low);
    const double p_hi = percentile(vol.intensities, high);
    if (!(p_hi > p_lo)) throw std::invalid_argument("constant-intensity volume");
    Volume out = vol;
    const double scale = 1.0 / (p_hi - p_lo);
    for (auto& x : out.intensities) x = static_cast<float>((static_cast<double>(x) - p_lo) * scale);
    return out;
}

namespace {

// Source coordinate of output pixel `i` when resizing n_in -> n_out with aligned pixel centres.
double source_coord(int i, int n_in, int n_out) {
    return (i + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
}

int resampled_dim(int n, double spacing, double target) {
    return std::max(1, static_cast<int>(std::lround(n * spacing / target)));
}

}  // namespace

Image resample_bilinear(const Image& img, int out_rows, int out_cols) {
    if (out_rows == img.rows() && out_cols == img.cols()) return img;
    Image out(out_rows, out_cols);
    for (int r = 0; r < out_rows; ++r) {
        const double sr = std::clamp(source_coord(r, img.rows(), out_rows), 0.0, img.rows() - 1.0);
        const int r0 = static_cast<int>(std::floor(sr));
        const int r1 = std::min(r0 + 1, img.rows() - 1);
        const double fr = sr - r0;
        for (int c = 0; c < out_cols; ++c) {
            const double sc = std::clamp(source_coord(c, img.cols(), out_cols), 0.0, img.cols() - 1.0);
            const int c0 = static_cast<int>(std::floor(sc));
            const int c1 = std::min(c0 + 1, img.cols() - 1);
            const double fc = sc - c0;
            const double top = img(r0, c0) + fc * (img(r0, c1) - img(r0, c0));
            const double bot = img(r1, c0) + fc * (img(r1, c1) - img(r1, c0));
            out(r, c) = static_cast<float>(top + fr * (bot - top));
        }
    }
    return out;
}

LabelMap resample_nearest(const LabelMap& map, int out_rows, int out_cols) {
    if (out_rows == map.rows() && out_cols == map.cols()) return map;
    LabelMap out(out_rows, out_cols);
    for (int r = 0; r < out_rows; ++r) {
        const int sr = std::clamp(static_cast<int>(std::lround(source_coord(r, map.rows(), out_rows))), 0, map.rows() - 1);
        for (int c = 0; c < out_cols; ++c) {
            const int sc = std::clamp(static_cast<int>(std::lround(source_coord(c, map.cols(), out_cols))), 0, map.cols() - 1);
            out(r, c) = map(sr, sc);
        }
    }
    return out;
}

std::pair<Volume, std::optional<LabelVolume>> resample_inplane(const Volume& vol, const LabelVolume* labels,
                                                               const PreprocessConfig& cfg) {
    if (!(vol.spacing[0] > 0.0) || !(vol.spacing[1] > 0.0)) throw std::invalid_argument("missing spacing");
    if (labels && !labels->matches(vol)) throw std::invalid_argument("label dims do not match image dims");
    const int out_rows = resampled_dim(vol.rows, vol.spacing[0], cfg.target_resolution[0]);
    const int out_cols = resampled_dim(vol.cols, vol.spacing[1], cfg.target_resolution[1]);

    Volume out(vol.subject_id, vol.slices, out_rows, out_cols, cfg.target_resolution);
    for (int s = 0; s < vol.slices; ++s) out.set_slice(s, resample_bilinear(vol.slice(s), out_rows, out_cols));

    std::optional<LabelVolume> out_labels;
    if (labels) {
        out_labels.emplace(vol.slices, out_rows, out_cols, labels->num_classes);
        for (int s = 0; s < vol.slices; ++s) {
            out_labels->set_slice(s, resample_nearest(labels->slice(s), out_rows, out_cols));
        }
    }
    return {std::move(out), std::move(out_labels)};
}

Subject preprocess_subject(const Subject& subject, const PreprocessConfig& cfg) {
    cfg.validate();
    const Volume normalized = percentile_normalize(subject.image, cfg.low_percentile, cfg.high_percentile);
    auto [resampled, resampled_labels] =
        resample_inplane(normalized, subject.labels ? &*subject.labels : nullptr, cfg);

    Volume out(resampled.subject_id, resampled.slices, cfg.target_dims[0], cfg.target_dims[1], resampled.spacing);
    for (int s = 0; s < resampled.slices; ++s) out.set_slice(s, crop_or_pad(resampled.slice(s), cfg.target_dims, 0.0f));

    Subject result{std::move(out), std::nullopt};
    if (resampled_labels) {
        LabelVolume lab(resampled.slices, cfg.target_dims[0], cfg.target_dims[1], resampled_labels->num_classes);
        for (int s = 0; s < resampled.slices; ++s) {
            lab.set_slice(s, crop_or_pad(resampled_labels->slice(s), cfg.target_dims, std::uint8_t{0}));
        }
        result.labels = std::move(lab);
    }
    return result;
}

}  // namespace semiseg
