#include "semiseg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace semiseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Volume / LabelVolume

Volume::Volume(std::string id, int s, int r, int c, std::array<double, 2> sp)
    : subject_id(std::move(id)), slices(s), rows(r), cols(c), spacing(sp),
      intensities(static_cast<std::size_t>(s) * r * c, 0.0f) {}

Image Volume::slice(int s) const {
    if (s < 0 || s >= slices) throw std::out_of_range("slice index out of range");
    const auto first = intensities.begin() + static_cast<std::ptrdiff_t>(s * slice_size());
    return Image(rows, cols, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(slice_size())));
}

void Volume::set_slice(int s, const Image& img) {
    if (s < 0 || s >= slices) throw std::out_of_range("slice index out of range");
    if (img.rows() != rows || img.cols() != cols) throw std::invalid_argument("slice dims mismatch");
    std::copy(img.values().begin(), img.values().end(),
              intensities.begin() + static_cast<std::ptrdiff_t>(s * slice_size()));
}

void Volume::validate() const {
    if (slices < 1 || rows < 1 || cols < 1) throw std::invalid_argument("volume needs at least one slice and positive dims");
    if (intensities.size() != static_cast<std::size_t>(slices) * slice_size()) {
        throw std::invalid_argument("volume intensity count does not match dims");
    }
    if (!(spacing[0] > 0.0) || !(spacing[1] > 0.0)) throw std::invalid_argument("volume spacing must be positive");
    for (float v : intensities) {
        if (!std::isfinite(v)) throw std::invalid_argument("volume contains non-finite intensity");
    }
}

LabelVolume::LabelVolume(int s, int r, int c, int nc)
    : slices(s), rows(r), cols(c), num_classes(nc),
      labels(static_cast<std::size_t>(s) * r * c, 0) {}

LabelMap LabelVolume::slice(int s) const {
    if (s < 0 || s >= slices) throw std::out_of_range("slice index out of range");
    const auto first = labels.begin() + static_cast<std::ptrdiff_t>(s * slice_size());
    return LabelMap(rows, cols, std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(slice_size())));
}

void LabelVolume::set_slice(int s, const LabelMap& map) {
    if (s < 0 || s >= slices) throw std::out_of_range("slice index out of range");
    if (map.rows() != rows || map.cols() != cols) throw std::invalid_argument("label slice dims mismatch");
    std::copy(map.values().begin(), map.values().end(),
              labels.begin() + static_cast<std::ptrdiff_t>(s * slice_size()));
}

void LabelVolume::validate() const {
    if (num_classes < 1 || num_classes > 254) throw std::invalid_argument("num_classes out of range");
    if (labels.size() != static_cast<std::size_t>(slices) * slice_size()) {
        throw std::invalid_argument("label count does not match dims");
    }
    for (auto v : labels) {
        if (v > num_classes) throw std::invalid_argument("label out of range");
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticSpec::validate() const {
    if (num_subjects < 1) throw std::invalid_argument("num_subjects must be positive");
    if (num_classes < 1 || num_classes > 16) throw std::invalid_argument("num_classes must be in [1, 16]");
    if (slices_per_volume < 1) throw std::invalid_argument("slices_per_volume must be positive");
    if (dims[0] < 1 || dims[1] < 1) throw std::invalid_argument("synthetic dims must be positive");
    if (!(spacing_range[0] > 0.0) || spacing_range[1] < spacing_range[0]) {
        throw std::invalid_argument("invalid spacing range");
    }
    if (noise_std < 0.0) throw std::invalid_argument("noise_std must be nonnegative");
    if (!intensity_ranges.empty() && static_cast<int>(intensity_ranges.size()) != num_classes + 1) {
        throw std::invalid_argument("intensity_ranges needs num_classes + 1 entries");
    }
    if (gain_range[0] <= 0.0 || gain_range[1] < gain_range[0]) throw std::invalid_argument("invalid gain range");
}

std::vector<IntensityRange> default_intensity_ranges(int num_classes) {
    // Background tissue sits between the dark ring and the bright pools, and the
    // bright structures share a range so shape and position must disambiguate.
    std::vector<IntensityRange> r;
    r.push_back({0.25, 0.45});
    if (num_classes == 1) {
        r.push_back({0.6, 1.0});
    } else if (num_classes == 2) {
        r.push_back({0.08, 0.3});
        r.push_back({0.6, 1.0});
    } else {
        r.push_back({0.55, 0.95});
        r.push_back({0.08, 0.3});
        r.push_back({0.6, 1.0});
        for (int c = 4; c <= num_classes; ++c) r.push_back({0.5, 0.9});
    }
    return r;
}

namespace {

struct Ellipse {
    double cx = 0, cy = 0;  // mm
    double a = 1, b = 1;    // semi-axes, mm
    double angle = 0;       // radians

    double radius(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double u = (ca * dx + sa * dy) / a;
        const double v = (-sa * dx + ca * dy) / b;
        return std::sqrt(u * u + v * v);
    }
    bool contains(double x, double y) const { return radius(x, y) <= 1.0; }
};

struct Wave {
    double amplitude, kx, ky, phase;
};

Subject generate_subject(const SyntheticSpec& spec, const std::vector<IntensityRange>& ranges,
                         int index, std::uint64_t seed) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
    const auto& jit = spec.shape_jitter;
    const int C = spec.num_classes;
    const int S = spec.slices_per_volume;
    const int H = spec.dims[0];
    const int W = spec.dims[1];
    constexpr double pi = std::numbers::pi;

    const double sp = rng.uniform(spec.spacing_range[0], spec.spacing_range[1]);
    const double gain = rng.uniform(spec.gain_range[0], spec.gain_range[1]);

    std::vector<double> level(static_cast<std::size_t>(C) + 1);
    for (int c = 0; c <= C; ++c) level[c] = rng.uniform(ranges[c].lo, ranges[c].hi);

    const double fov_y = H * sp, fov_x = W * sp;
    const double hx = rng.uniform(-jit.center_jitter_mm, jit.center_jitter_mm);
    const double hy = rng.uniform(-jit.center_jitter_mm, jit.center_jitter_mm);
    const double r_lv = rng.uniform(jit.lv_radius_mm_min, jit.lv_radius_mm_max);
    const double thick = rng.uniform(jit.myo_thickness_mm_min, jit.myo_thickness_mm_max);
    const double ecc = rng.uniform(-jit.ellipticity, jit.ellipticity);
    const double heart_angle = rng.uniform(0.0, pi);
    const double blob_dir = pi + rng.uniform(-jit.blob_angle_jitter_deg, jit.blob_angle_jitter_deg) * pi / 180.0;

    Ellipse body{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                 0.5 * fov_x * rng.uniform(0.82, 0.95), 0.5 * fov_y * rng.uniform(0.82, 0.95),
                 rng.uniform(-0.3, 0.3)};

    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k) {
        const double freq = rng.uniform(1.0, 3.0) * 2.0 * pi / std::max(fov_x, fov_y);
        const double dir = rng.uniform(0.0, 2.0 * pi);
        waves.push_back({spec.texture_amplitude * rng.uniform(0.5, 1.0), freq * std::cos(dir),
                         freq * std::sin(dir), rng.uniform(0.0, 2.0 * pi)});
    }

    const double heart_extent = 2.2 * (r_lv + thick);
    struct Distractor {
        Ellipse shape;
        double level;
    };
    std::vector<Distractor> distractors;
    for (int k = 0; k < spec.num_distractors; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            Ellipse e{rng.uniform(-0.45 * fov_x, 0.45 * fov_x), rng.uniform(-0.45 * fov_y, 0.45 * fov_y),
                      rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0), rng.uniform(0.0, pi)};
            const double d = std::hypot(e.cx - hx, e.cy - hy);
            if (d < heart_extent + std::max(e.a, e.b) + 3.0) continue;
            if (body.radius(e.cx, e.cy) > 0.85) continue;
            distractors.push_back({e, rng.uniform(spec.distractor_range.lo, spec.distractor_range.hi)});
            break;
        }
    }

    std::ostringstream id;
    id << "subj" << std::setw(3) << std::setfill('0') << index;
    Volume vol(id.str(), S, H, W, {sp, sp});
    LabelVolume lab(S, H, W, C);

    for (int s = 0; s < S; ++s) {
        const double f = S > 1 ? static_cast<double>(s) / (S - 1) : 0.0;
        const double shrink = 1.0 - jit.apex_shrink * f;
        const double t = thick * std::max(shrink, 0.7);
        Ellipse disk{hx, hy, r_lv * (1.0 + ecc) * shrink, r_lv * (1.0 - ecc) * shrink, heart_angle};
        Ellipse ring{hx, hy, disk.a + t, disk.b + t, heart_angle};
        const double outer = 0.5 * (ring.a + ring.b);

        // Adjacent blob hugging the ring; it fades out towards the apex.
        const double blob_scale = 1.0 - 1.2 * f;
        std::vector<std::pair<int, Ellipse>> blobs;
        if (C >= 3 && blob_scale >= 0.25) {
            const double along = 0.55 * outer * blob_scale;
            const double across = 1.15 * outer * blob_scale;
            const double d = outer + 0.5 * along;
            blobs.push_back({1, Ellipse{hx + d * std::cos(blob_dir), hy + d * std::sin(blob_dir), along, across, blob_dir}});
        }
        for (int c = 4; c <= C; ++c) {
            const double dir = blob_dir + 2.0 * pi * (c - 3) / (C - 2);
            const double rad = 0.4 * outer * std::max(shrink, 0.5);
            const double d = outer + 1.1 * rad;
            blobs.push_back({c, Ellipse{hx + d * std::cos(dir), hy + d * std::sin(dir), rad, rad, 0.0}});
        }
        const int disk_label = C == 1 ? 1 : (C == 2 ? 2 : 3);
        const int ring_label = C == 2 ? 1 : 2;
        const double dshrink = 1.0 - 0.3 * f;

        for (int r = 0; r < H; ++r) {
            const double y = (r - 0.5 * (H - 1)) * sp;
            for (int c = 0; c < W; ++c) {
                const double x = (c - 0.5 * (W - 1)) * sp;
                int label = 0;
                if (disk.contains(x, y)) {
                    label = disk_label;
                } else if (C >= 2 && ring.contains(x, y)) {
                    label = ring_label;
                } else {
                    for (const auto& [id, e] : blobs) {
                        if (e.contains(x, y)) {
                            label = id;
                            break;
                        }
                    }
                }

                double value = 0.0;
                if (label > 0) {
                    value = level[label];
                } else if (body.contains(x, y)) {
                    value = level[0];
                    for (const auto& w : waves) value += w.amplitude * std::sin(w.kx * x + w.ky * y + w.phase);
                    for (const auto& d : distractors) {
                        Ellipse e = d.shape;
                        e.a *= dshrink;
                        e.b *= dshrink;
                        if (e.contains(x, y)) {
                            value = d.level;
                            break;
                        }
                    }
                }
                value *= gain;
                if (spec.noise_std > 0.0) value += rng.normal(0.0, spec.noise_std * gain);

                const std::size_t idx = static_cast<std::size_t>(s) * H * W + static_cast<std::size_t>(r) * W + c;
                vol.intensities[idx] = static_cast<float>(value);
                lab.labels[idx] = static_cast<std::uint8_t>(label);
            }
        }
    }
    return Subject{std::move(vol), std::move(lab)};
}

}  // namespace

std::vector<Subject> generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto ranges = spec.intensity_ranges.empty() ? default_intensity_ranges(spec.num_classes)
                                                      : spec.intensity_ranges;
    std::vector<Subject> out;
    out.reserve(static_cast<std::size_t>(spec.num_subjects));
    for (int i = 0; i < spec.num_subjects; ++i) out.push_back(generate_subject(spec, ranges, i, seed));
    return out;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
    } else {
        for (T v : values) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            out.write(bytes.data(), sizeof(T));
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("missing file: " + path.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != count * sizeof(T)) {
        throw std::runtime_error("dim mismatch: " + path.string() + " holds " + std::to_string(bytes) +
                                 " bytes, expected " + std::to_string(count * sizeof(T)));
    }
    in.seekg(0);
    std::vector<T> values(count);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
        for (auto& v : values) {
            auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(b.begin(), b.end());
            v = std::bit_cast<T>(b);
        }
    }
    return values;
}

}  // namespace

void save_dataset(const fs::path& dir, std::span<const Subject> subjects, int num_classes) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "semiseg-dataset";
    manifest["version"] = 1;
    manifest["num_classes"] = num_classes;
    manifest["subjects"] = json::array();
    for (const auto& s : subjects) {
        s.image.validate();
        const std::string img_name = s.image.subject_id + "_image.f32";
        write_raw(dir / img_name, s.image.intensities);
        json entry{{"id", s.image.subject_id},
                   {"dims", {s.image.slices, s.image.rows, s.image.cols}},
                   {"spacing", {s.image.spacing[0], s.image.spacing[1]}},
                   {"image", img_name},
                   {"image_dtype", "float32le"}};
        if (s.labels) {
            if (!s.labels->matches(s.image)) throw std::invalid_argument("label dims do not match image dims");
            const std::string lbl_name = s.image.subject_id + "_labels.u8";
            write_raw(dir / lbl_name, s.labels->labels);
            entry["labels"] = lbl_name;
            entry["labels_dtype"] = "uint8";
        }
        manifest["subjects"].push_back(std::move(entry));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

std::vector<Subject> load_dataset(const fs::path& manifest_path) {
    fs::path manifest_file = manifest_path;
    if (fs::is_directory(manifest_file)) manifest_file /= "manifest.json";
    std::ifstream in(manifest_file);
    if (!in) throw std::runtime_error("missing file: " + manifest_file.string());
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed manifest " + manifest_file.string() + ": " + e.what());
    }
    const fs::path base = manifest_file.parent_path();

    try {
        if (manifest.at("format") != "semiseg-dataset") throw std::runtime_error("unknown dataset format");
        const int num_classes = manifest.at("num_classes").get<int>();
        std::vector<Subject> out;
        for (const auto& entry : manifest.at("subjects")) {
            const auto dims = entry.at("dims").get<std::array<int, 3>>();
            const auto spacing = entry.at("spacing").get<std::array<double, 2>>();
            if (entry.value("image_dtype", "float32le") != "float32le") throw std::runtime_error("unsupported image dtype");
            Volume vol(entry.at("id").get<std::string>(), dims[0], dims[1], dims[2], spacing);
            vol.intensities = read_raw<float>(base / entry.at("image").get<std::string>(), vol.intensities.size());
            vol.validate();
            Subject subject{std::move(vol), std::nullopt};
            if (entry.contains("labels")) {
                if (entry.value("labels_dtype", "uint8") != "uint8") throw std::runtime_error("unsupported label dtype");
                LabelVolume lab(dims[0], dims[1], dims[2], num_classes);
                lab.labels = read_raw<std::uint8_t>(base / entry.at("labels").get<std::string>(), lab.labels.size());
                lab.validate();
                subject.labels = std::move(lab);
            }
            out.push_back(std::move(subject));
        }
        return out;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed manifest " + manifest_file.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Splits and batches

const LabelVolume* HiddenTruth::find(const std::string& id) const {
    auto it = truth_.find(id);
    return it == truth_.end() ? nullptr : &it->second;
}

SplitResult make_split(std::vector<Subject> dataset, const SplitOptions& opts) {
    if (opts.n_labeled < 0 || opts.n_val < 0 || opts.n_test < 0) throw std::invalid_argument("negative split size");
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].labels) pool.push_back(i);
    }
    const auto needed = static_cast<std::size_t>(opts.n_labeled + opts.n_val + opts.n_test);
    if (needed > pool.size()) {
        throw std::invalid_argument("insufficient volumes: split needs " + std::to_string(needed) +
                                    " labeled volumes, dataset has " + std::to_string(pool.size()));
    }

    std::vector<std::size_t> test_idx;
    if (opts.test_seed) {
        Rng test_rng(*opts.test_seed);
        std::shuffle(pool.begin(), pool.end(), test_rng.engine());
        test_idx.assign(pool.begin(), pool.begin() + opts.n_test);
        pool.erase(pool.begin(), pool.begin() + opts.n_test);
        std::sort(pool.begin(), pool.end());
    }
    Rng rng(opts.seed);
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    auto it = pool.begin();
    std::vector<std::size_t> lab_idx(it, it + opts.n_labeled);
    it += opts.n_labeled;
    std::vector<std::size_t> val_idx(it, it + opts.n_val);
    it += opts.n_val;
    if (!opts.test_seed) {
        test_idx.assign(it, it + opts.n_test);
    }

    std::vector<char> used(dataset.size(), 0);
    SplitResult result;
    result.split.seed = opts.seed;
    auto take = [&](const std::vector<std::size_t>& idx, std::vector<LabeledVolume>& dst) {
        for (auto i : idx) {
            used[i] = 1;
            dst.push_back(LabeledVolume{std::move(dataset[i].image), std::move(*dataset[i].labels)});
        }
    };
    take(lab_idx, result.split.labeled);
    take(val_idx, result.split.validation);
    take(test_idx, result.split.test);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (used[i]) continue;
        if (dataset[i].labels) result.hidden.add(dataset[i].image.subject_id, std::move(*dataset[i].labels));
        result.split.unlabeled.push_back(std::move(dataset[i].image));
    }
    return result;
}

int SliceBatch::count(SliceSource s) const {
    return static_cast<int>(std::count_if(slices.begin(), slices.end(), [s](const auto& b) { return b.source == s; }));
}

namespace {

// Draws one (volume, slice) pair uniformly from all pairs of the pool.
std::pair<std::size_t, int> draw_pair(const std::vector<int>& slice_counts, Rng& rng) {
    const int total = std::accumulate(slice_counts.begin(), slice_counts.end(), 0);
    int k = rng.uniform_int(0, total - 1);
    for (std::size_t v = 0; v < slice_counts.size(); ++v) {
        if (k < slice_counts[v]) return {v, k};
        k -= slice_counts[v];
    }
    throw std::logic_error("draw_pair fell through");
}

}  // namespace

SliceBatch sample_slice_batch(const DatasetSplit& split, const PseudoLabelStore* pseudo_store,
                              int n_labeled_slices, int n_unlabeled_slices, Rng& rng) {
    if (n_labeled_slices < 0 || n_unlabeled_slices < 0) throw std::invalid_argument("negative slice count");
    if (n_labeled_slices + n_unlabeled_slices == 0) throw std::invalid_argument("empty batch requested");

    SliceBatch batch;
    batch.slices.reserve(static_cast<std::size_t>(n_labeled_slices + n_unlabeled_slices));
    if (n_labeled_slices > 0) {
        if (split.labeled.empty()) throw std::invalid_argument("empty pool: no labeled volumes");
        std::vector<int> counts;
        for (const auto& lv : split.labeled) counts.push_back(lv.image.slices);
        for (int i = 0; i < n_labeled_slices; ++i) {
            const auto [v, s] = draw_pair(counts, rng);
            const auto& lv = split.labeled[v];
            batch.slices.push_back({lv.image.slice(s), lv.labels.slice(s), SliceSource::labeled, lv.image.subject_id, s});
        }
    }
    if (n_unlabeled_slices > 0) {
        if (pseudo_store == nullptr) throw std::invalid_argument("unlabeled slices requested without pseudo-labels");
        std::vector<const Volume*> pool;
        std::vector<const LabelVolume*> pool_labels;
        std::vector<int> counts;
        for (const auto& vol : split.unlabeled) {
            if (!pseudo_store->is_retained(vol.subject_id)) continue;
            pool.push_back(&vol);
            pool_labels.push_back(&pseudo_store->labels.at(vol.subject_id));
            counts.push_back(vol.slices);
        }
        if (pool.empty()) throw std::invalid_argument("empty pool: no retained unlabeled volumes");
        for (int i = 0; i < n_unlabeled_slices; ++i) {
            const auto [v, s] = draw_pair(counts, rng);
            batch.slices.push_back({pool[v]->slice(s), pool_labels[v]->slice(s), SliceSource::pseudo, pool[v]->subject_id, s});
        }
    }
    return batch;
}

}  // namespace semiseg
