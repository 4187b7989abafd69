#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "semiseg/pseudo_store.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/volume.hpp"

namespace semiseg {

/// Geometric variability of the synthetic cardiac-like phantom. Lengths in mm.
struct ShapeJitter {
    double center_jitter_mm = 8.0;
    double lv_radius_mm_min = 9.0;
    double lv_radius_mm_max = 15.0;
    double myo_thickness_mm_min = 4.0;
    double myo_thickness_mm_max = 7.0;
    /// Max relative difference between ellipse semi-axes.
    double ellipticity = 0.15;
    /// Fraction by which structures shrink from the first (base) to the last (apex) slice.
    double apex_shrink = 0.5;
    /// Angular jitter (degrees) of the adjacent blob around its nominal direction.
    double blob_angle_jitter_deg = 30.0;
};

/// Closed intensity interval; one value is drawn per subject and structure.
struct IntensityRange {
    double lo = 0.0;
    double hi = 1.0;
};

/// Parameters of the synthetic phantom generator.
///
/// Layout by class count: C=1 disk; C=2 ring enclosing a disk; C>=3 an adjacent
/// blob (label 1), a ring (label 2) enclosing a disk (label 3), plus C-3 extra
/// blobs around the ring. Background is a textured body ellipse with unlabeled
/// distractor blobs whose intensities overlap the foreground ranges.
struct SyntheticSpec {
    int num_subjects = 70;
    int num_classes = 3;
    int slices_per_volume = 10;
    std::array<int, 2> dims{64, 64};
    /// Per-subject isotropic in-plane spacing range (mm).
    std::array<double, 2> spacing_range{1.2, 1.55};
    double noise_std = 0.04;
    ShapeJitter shape_jitter{};
    /// Index 0 = background tissue, index c = foreground class c. Empty selects
    /// the defaults returned by default_intensity_ranges().
    std::vector<IntensityRange> intensity_ranges{};
    int num_distractors = 3;
    IntensityRange distractor_range{0.45, 1.0};
    double texture_amplitude = 0.06;
    /// Per-subject global gain range; percentile normalization removes it.
    std::array<double, 2> gain_range{0.5, 2.0};

    void validate() const;
};

std::vector<IntensityRange> default_intensity_ranges(int num_classes);

/// Deterministic given (spec, seed). Subject ids are "subj000", "subj001", ...
std::vector<Subject> generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Writes `manifest.json` plus raw little-endian arrays into `dir`.
void save_dataset(const std::filesystem::path& dir, std::span<const Subject> subjects,
                  int num_classes);

/// Accepts a dataset directory or the path of its manifest file.
std::vector<Subject> load_dataset(const std::filesystem::path& manifest_path);

/// Ground truth of unlabeled volumes, kept apart from the split so the trainer
/// cannot read it. Only diagnostics receive this object.
class HiddenTruth {
public:
    void add(const std::string& id, LabelVolume labels) { truth_.emplace(id, std::move(labels)); }
    const LabelVolume* find(const std::string& id) const;
    std::size_t size() const noexcept { return truth_.size(); }
    bool empty() const noexcept { return truth_.empty(); }

private:
    std::map<std::string, LabelVolume> truth_;
};

struct DatasetSplit {
    std::vector<LabeledVolume> labeled;
    std::vector<Volume> unlabeled;
    std::vector<LabeledVolume> validation;
    std::vector<LabeledVolume> test;
    std::uint64_t seed = 0;
};

struct SplitOptions {
    int n_labeled = 1;
    int n_val = 2;
    int n_test = 20;
    std::uint64_t seed = 0;
    /// When set, the test set is drawn with this seed first and stays fixed while
    /// `seed` resamples the labeled and validation sets.
    std::optional<std::uint64_t> test_seed{};
};

struct SplitResult {
    DatasetSplit split;
    HiddenTruth hidden;
};

/// Random disjoint split. Labeled/validation/test are drawn from subjects that
/// carry labels; every remaining subject becomes unlabeled with its labels moved
/// into the returned HiddenTruth.
SplitResult make_split(std::vector<Subject> dataset, const SplitOptions& opts);

enum class SliceSource : std::uint8_t { labeled, pseudo };

struct BatchSlice {
    Image image;
    LabelMap labels;
    SliceSource source = SliceSource::labeled;
    std::string subject_id;
    int slice_index = 0;
};

struct SliceBatch {
    std::vector<BatchSlice> slices;

    int count(SliceSource s) const;
    std::size_t size() const noexcept { return slices.size(); }
};

/// Labeled slices come first, then unlabeled slices carrying pseudo-labels.
/// Each group is sampled uniformly over (volume, slice) pairs with replacement.
/// The unlabeled pool is restricted to subjects retained by `pseudo_store`.
SliceBatch sample_slice_batch(const DatasetSplit& split, const PseudoLabelStore* pseudo_store,
                              int n_labeled_slices, int n_unlabeled_slices, Rng& rng);

}  // namespace semiseg
