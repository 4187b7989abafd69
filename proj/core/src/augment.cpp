#include "semiseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace semiseg {

void AugmentConfig::validate() const {
    if (rotation_deg < 0.0 || translate_px < 0.0 || brightness < 0.0) {
        throw std::invalid_argument("augmentation half-widths must be nonnegative");
    }
    if (!(scale_min > 0.0) || scale_max < scale_min) throw std::invalid_argument("invalid scale range");
    if (!(contrast_min > 0.0) || contrast_max < contrast_min) throw std::invalid_argument("invalid contrast range");
    if (flip_prob < 0.0 || flip_prob > 1.0 || elastic_prob < 0.0 || elastic_prob > 1.0) {
        throw std::invalid_argument("probabilities must lie in [0, 1]");
    }
    if (elastic_alpha < 0.0 || !(elastic_sigma > 0.0)) throw std::invalid_argument("invalid elastic parameters");
}

bool GeomTransform::is_identity() const noexcept {
    return rotation_deg == 0.0 && scale == 1.0 && translation[0] == 0.0 && translation[1] == 0.0 && !flip_h &&
           !flip_v && !elastic;
}

namespace {

std::vector<float> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * i * i / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
        sum += w;
    }
    for (auto& w : k) w = static_cast<float>(w / sum);
    return k;
}

Grid<float> blur(const Grid<float>& in, const std::vector<float>& k) {
    const int radius = static_cast<int>(k.size() / 2);
    Grid<float> tmp(in.rows(), in.cols());
    Grid<float> out(in.rows(), in.cols());
    for (int r = 0; r < in.rows(); ++r) {
        for (int c = 0; c < in.cols(); ++c) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[static_cast<std::size_t>(i + radius)] * in(r, std::clamp(c + i, 0, in.cols() - 1));
            }
            tmp(r, c) = acc;
        }
    }
    for (int r = 0; r < in.rows(); ++r) {
        for (int c = 0; c < in.cols(); ++c) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[static_cast<std::size_t>(i + radius)] * tmp(std::clamp(r + i, 0, in.rows() - 1), c);
            }
            out(r, c) = acc;
        }
    }
    return out;
}

ElasticField sample_elastic(Rng& rng, const AugmentConfig& cfg, int rows, int cols) {
    Grid<float> dr(rows, cols), dc(rows, cols);
    for (auto& v : dr.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : dc.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const auto k = gaussian_kernel(cfg.elastic_sigma);
    dr = blur(dr, k);
    dc = blur(dc, k);
    float peak = 0.0f;
    for (std::size_t i = 0; i < dr.size(); ++i) {
        peak = std::max(peak, std::hypot(dr.values()[i], dc.values()[i]));
    }
    const float gain = peak > 0.0f ? static_cast<float>(cfg.elastic_alpha) / peak : 0.0f;
    for (auto& v : dr.values()) v *= gain;
    for (auto& v : dc.values()) v *= gain;
    return ElasticField{std::move(dr), std::move(dc)};
}

// Maps each output pixel back to its input coordinate and calls `emit(r, c, src_row, src_col)`.
template <typename Emit>
void for_each_source(int rows, int cols, const GeomTransform& t, Emit&& emit) {
    if (t.elastic && (t.elastic->d_row.rows() != rows || t.elastic->d_row.cols() != cols ||
                      t.elastic->d_col.rows() != rows || t.elastic->d_col.cols() != cols)) {
        throw std::invalid_argument("elastic field dims do not match image dims");
    }
    if (!(t.scale > 0.0)) throw std::invalid_argument("scale must be positive");
    const double cy = 0.5 * (rows - 1), cx = 0.5 * (cols - 1);
    const double theta = t.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double inv_s = 1.0 / t.scale;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double y = r - cy, x = c - cx;
            if (t.elastic) {
                y += t.elastic->d_row(r, c);
                x += t.elastic->d_col(r, c);
            }
            y -= t.translation[0];
            x -= t.translation[1];
            double xs = (ct * x + st * y) * inv_s;
            double ys = (-st * x + ct * y) * inv_s;
            if (t.flip_h) xs = -xs;
            if (t.flip_v) ys = -ys;
            emit(r, c, ys + cy, xs + cx);
        }
    }
}

}  // namespace

GeomTransform sample_geom(Rng& rng, const AugmentConfig& cfg, int rows, int cols) {
    GeomTransform t = sample_affine(rng, cfg);
    if (rng.bernoulli(cfg.elastic_prob) && cfg.elastic_alpha > 0.0) t.elastic = sample_elastic(rng, cfg, rows, cols);
    return t;
}

GeomTransform sample_affine(Rng& rng, const AugmentConfig& cfg) {
    GeomTransform t;
    t.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
    t.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    t.translation = {rng.uniform(-cfg.translate_px, cfg.translate_px), rng.uniform(-cfg.translate_px, cfg.translate_px)};
    t.flip_h = rng.bernoulli(cfg.flip_prob);
    t.flip_v = rng.bernoulli(cfg.flip_prob);
    // Zero-width symmetric ranges can yield -0.0; normalise so identity checks hold.
    if (t.rotation_deg == 0.0) t.rotation_deg = 0.0;
    if (t.translation[0] == 0.0) t.translation[0] = 0.0;
    if (t.translation[1] == 0.0) t.translation[1] = 0.0;
    return t;
}

IntensityTransform sample_intensity(Rng& rng, const AugmentConfig& cfg) {
    IntensityTransform t;
    t.contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    t.brightness = rng.uniform(-cfg.brightness, cfg.brightness);
    if (t.brightness == 0.0) t.brightness = 0.0;
    return t;
}

Image apply_geom(const Image& img, const GeomTransform& t, Interp interp) {
    if (t.is_identity()) return img;
    Image out(img.rows(), img.cols(), 0.0f);
    auto at = [&](int r, int c) -> double { return img.in_bounds(r, c) ? img(r, c) : 0.0; };
    for_each_source(img.rows(), img.cols(), t, [&](int r, int c, double sr, double sc) {
        if (interp == Interp::nearest) {
            out(r, c) = static_cast<float>(at(static_cast<int>(std::lround(sr)), static_cast<int>(std::lround(sc))));
            return;
        }
        if (sr <= -1.0 || sc <= -1.0 || sr >= img.rows() || sc >= img.cols()) return;
        const int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
        const double fr = sr - r0, fc = sc - c0;
        const double top = at(r0, c0) + fc * (at(r0, c0 + 1) - at(r0, c0));
        const double bot = at(r0 + 1, c0) + fc * (at(r0 + 1, c0 + 1) - at(r0 + 1, c0));
        out(r, c) = static_cast<float>(top + fr * (bot - top));
    });
    return out;
}

LabelMap apply_geom(const LabelMap& map, const GeomTransform& t, Interp interp) {
    if (interp == Interp::bilinear) throw std::invalid_argument("bilinear interpolation on integer label map");
    if (t.is_identity()) return map;
    LabelMap out(map.rows(), map.cols(), 0);
    for_each_source(map.rows(), map.cols(), t, [&](int r, int c, double sr, double sc) {
        const int ir = static_cast<int>(std::lround(sr)), ic = static_cast<int>(std::lround(sc));
        if (map.in_bounds(ir, ic)) out(r, c) = map(ir, ic);
    });
    return out;
}

GeomTransform invert_geom(const GeomTransform& t) {
    if (t.elastic) throw std::invalid_argument("not invertible: elastic deformation");
    if (!(t.scale > 0.0)) throw std::invalid_argument("scale must be positive");
    // Forward: q = s R(theta) F p + tr. Inverse: p = F R(-theta) (q - tr) / s, rewritten in
    // flip-first form using F R(a) = R(-a) F for a single mirror (F = -I commutes).
    GeomTransform inv;
    inv.flip_h = t.flip_h;
    inv.flip_v = t.flip_v;
    inv.scale = 1.0 / t.scale;
    const bool single_mirror = t.flip_h != t.flip_v;
    inv.rotation_deg = single_mirror ? t.rotation_deg : -t.rotation_deg;

    const double theta = t.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double ty = t.translation[0], tx = t.translation[1];
    double x = ct * tx + st * ty;   // R(-theta) tr
    double y = -st * tx + ct * ty;
    if (t.flip_h) x = -x;
    if (t.flip_v) y = -y;
    inv.translation = {-y / t.scale, -x / t.scale};
    if (inv.translation[0] == 0.0) inv.translation[0] = 0.0;
    if (inv.translation[1] == 0.0) inv.translation[1] = 0.0;
    if (inv.rotation_deg == 0.0) inv.rotation_deg = 0.0;
    return inv;
}

Image apply_intensity(const Image& img, const IntensityTransform& t) {
    Image out = img;
    for (auto& v : out.values()) v = static_cast<float>(t.contrast * v + t.brightness);
    return out;
}

}  // namespace semiseg
