#pragma once

#include <array>
#include <optional>
#include <vector>

#include "semiseg/grid.hpp"
#include "semiseg/rng.hpp"

namespace semiseg {

/// Ranges for random augmentation. Parameters are drawn uniformly within them.
struct AugmentConfig {
    double rotation_deg = 15.0;          // rotation in [-r, r]
    double scale_min = 0.9;
    double scale_max = 1.1;
    double translate_px = 4.0;           // per axis, in [-t, t]
    double flip_prob = 0.5;              // per axis
    double elastic_prob = 0.5;
    double elastic_alpha = 2.0;          // max displacement (px) after smoothing
    double elastic_sigma = 6.0;          // Gaussian smoothing of the random field (px)
    double contrast_min = 0.8;
    double contrast_max = 1.2;
    double brightness = 0.1;             // additive in [-b, b]

    void validate() const;
};

/// Dense displacement field (pixels), sampled per output pixel.
struct ElasticField {
    Grid<float> d_row;
    Grid<float> d_col;
};

/// Applied as flip -> scale/rotate/translate -> elastic, about the image centre.
struct GeomTransform {
    double rotation_deg = 0.0;
    double scale = 1.0;
    std::array<double, 2> translation{0.0, 0.0};  // (row, col) pixels
    bool flip_h = false;                          // mirror columns
    bool flip_v = false;                          // mirror rows
    std::optional<ElasticField> elastic{};

    bool is_identity() const noexcept;
};

struct IntensityTransform {
    double contrast = 1.0;
    double brightness = 0.0;
};

enum class Interp { bilinear, nearest };

/// Full geometric augmentation, including an elastic field with probability
/// cfg.elastic_prob. `rows`/`cols` size the elastic field.
GeomTransform sample_geom(Rng& rng, const AugmentConfig& cfg, int rows, int cols);

/// Invertible subfamily (flip + scale/rotate/translate, no elastic field).
GeomTransform sample_affine(Rng& rng, const AugmentConfig& cfg);

IntensityTransform sample_intensity(Rng& rng, const AugmentConfig& cfg);

/// Out-of-bounds samples read 0.
Image apply_geom(const Image& img, const GeomTransform& t, Interp interp = Interp::bilinear);
/// Label maps are always resampled with nearest; Interp::bilinear throws.
LabelMap apply_geom(const LabelMap& map, const GeomTransform& t, Interp interp = Interp::nearest);

/// Exact inverse of an affine+flip transform; throws "not invertible" on elastic fields.
GeomTransform invert_geom(const GeomTransform& t);

/// contrast * x + brightness, unclamped.
Image apply_intensity(const Image& img, const IntensityTransform& t);

}  // namespace semiseg
