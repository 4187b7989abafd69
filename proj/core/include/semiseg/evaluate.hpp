#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/grid.hpp"
#include "semiseg/network.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/volume.hpp"

namespace semiseg {

/// 2|A_c ∩ B_c| / (|A_c| + |B_c|); 1.0 when class c is absent from both.
double dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int c);
double dsc(const LabelMap& a, const LabelMap& b, int c);
double dsc(const LabelVolume& a, const LabelVolume& b, int c);

/// DSC per class 1..num_classes (index c - 1).
std::vector<double> per_class_dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int num_classes);

/// Mean over classes 1..num_classes. With skip_absent, classes absent from both
/// masks are left out, and the result is 1.0 when every class is absent.
double foreground_mean_dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int num_classes,
                           bool skip_absent = false);

struct VolumeScore {
    std::string subject_id;
    std::vector<double> per_class;
    double foreground_mean = 0.0;
};

struct EvalReport {
    int num_classes = 0;
    /// Mean over volumes of the per-volume 3D DSC, per class.
    std::vector<double> per_class;
    double foreground_mean = 0.0;
    std::vector<VolumeScore> volumes;
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

EvalReport evaluate_predictions(std::span<const LabelVolume> predictions, std::span<const LabeledVolume> truth);

/// Slice-wise argmax prediction in inference mode, scored per volume in 3D.
EvalReport evaluate_model(SegNet& net, std::span<const LabeledVolume> volumes);

struct RunSummary {
    int num_runs = 0;
    double mean = 0.0;
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    double std = 0.0;
    std::vector<double> per_class_mean;
    std::vector<double> run_values;

    nlohmann::json to_json() const;
};

RunSummary aggregate_runs(std::span<const EvalReport> reports);

struct RepresentationSlice {
    std::string subject_id;
    int slice_index = 0;
    Image image;
    LabelMap labels;  ///< ground truth or pseudo-labels
};

/// Samples up to n_per_class pixels of every foreground class per slice and
/// writes "class_id,subject_id,slice,row,col,f0,...,f{F-1}" rows taken from the
/// backbone output. Returns the number of data rows.
std::size_t export_pixel_representations(SegNet& net, std::span<const RepresentationSlice> slices, int n_per_class,
                                         Rng& rng, const std::filesystem::path& out_path);

}  // namespace semiseg
