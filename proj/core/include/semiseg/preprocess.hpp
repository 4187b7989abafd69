#pragma once

#include <array>
#include <optional>
#include <span>
#include <utility>

#include "semiseg/grid.hpp"
#include "semiseg/volume.hpp"

namespace semiseg {

struct PreprocessConfig {
    /// Target in-plane pixel size (mm), (row, col).
    std::array<double, 2> target_resolution{1.367, 1.367};
    /// Output slice dims (rows, cols) after crop/pad.
    std::array<int, 2> target_dims{192, 192};
    double low_percentile = 1.0;
    double high_percentile = 99.0;

    void validate() const;
};

/// q-th percentile (q in [0, 100]) with linear interpolation between order
/// statistics: rank = q/100 * (n - 1), value = v[floor] + frac * (v[ceil] - v[floor]).
/// Matches numpy's default ("linear") method.
double percentile(std::span<const float> values, double q);

/// (x - p_low) / (p_high - p_low) over the whole volume, unclamped.
/// Throws std::invalid_argument("constant-intensity volume") when p_high == p_low.
Volume percentile_normalize(const Volume& vol, double low = 1.0, double high = 99.0);

/// Per-slice resampling to cfg.target_resolution: bilinear for intensities,
/// nearest for labels. Output dims are round(in_dims * in_spacing / target);
/// pixel centres are aligned, edges clamp.
std::pair<Volume, std::optional<LabelVolume>> resample_inplane(const Volume& vol, const LabelVolume* labels,
                                                               const PreprocessConfig& cfg);

Image resample_bilinear(const Image& img, int out_rows, int out_cols);
LabelMap resample_nearest(const LabelMap& map, int out_rows, int out_cols);

/// Centered crop or symmetric pad to `target` (rows, cols). Odd remainders go to
/// the high-index side.
template <typename T>
Grid<T> crop_or_pad(const Grid<T>& in, std::array<int, 2> target, T fill = T{}) {
    if (target[0] <= 0 || target[1] <= 0) throw std::invalid_argument("crop_or_pad target dims must be positive");
    auto offset = [](int in_dim, int out_dim) {
        return in_dim >= out_dim ? (in_dim - out_dim) / 2 : -((out_dim - in_dim) / 2);
    };
    const int off_r = offset(in.rows(), target[0]);
    const int off_c = offset(in.cols(), target[1]);
    Grid<T> out(target[0], target[1], fill);
    for (int r = 0; r < target[0]; ++r) {
        const int sr = r + off_r;
        if (sr < 0 || sr >= in.rows()) continue;
        for (int c = 0; c < target[1]; ++c) {
            const int sc = c + off_c;
            if (sc < 0 || sc >= in.cols()) continue;
            out(r, c) = in(sr, sc);
        }
    }
    return out;
}

/// Full pipeline: normalize, resample, then crop/pad every slice.
Subject preprocess_subject(const Subject& subject, const PreprocessConfig& cfg);

}  // namespace semiseg
