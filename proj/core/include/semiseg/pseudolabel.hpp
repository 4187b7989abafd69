#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semiseg/augment.hpp"
#include "semiseg/dataset.hpp"
#include "semiseg/network.hpp"
#include "semiseg/pseudo_store.hpp"

namespace semiseg {

struct ConsistencyConfig {
    /// Minimum agreement for a subject to stay eligible; 0 disables the filter.
    double threshold = 0.0;
    int num_transform_pairs = 1;
    /// Ranges of the affine+flip transforms. Elastic fields are never drawn.
    AugmentConfig transforms{};
    /// Requesting elastic transforms is rejected: they cannot be inverted.
    bool elastic = false;

    void validate() const;
};

/// Maps a batch of slices to argmax label maps.
using SlicePredictor = std::function<std::vector<LabelMap>(std::span<const Image>)>;

SlicePredictor network_predictor(SegNet& net);

/// Argmax of every unlabeled slice in inference mode. All subjects retained.
PseudoLabelStore estimate_pseudo_labels(SegNet& net, std::span<const Volume> unlabeled,
                                        std::int64_t estimation_iteration = 0);

/// Agreement of the back-mapped predictions on t1(volume) and t2(volume):
/// foreground-mean DSC over the volume, classes absent from both skipped.
double consistency_score(const SlicePredictor& predict, const Volume& volume, const GeomTransform& t1,
                         const GeomTransform& t2, int num_classes);

/// Draws cfg.num_transform_pairs invertible pairs and averages their scores.
double consistency_score(const SlicePredictor& predict, const Volume& volume, Rng& rng, const ConsistencyConfig& cfg,
                         int num_classes);
double consistency_score(SegNet& net, const Volume& volume, Rng& rng, const ConsistencyConfig& cfg);

/// Retains every subject when threshold is 0, otherwise those scoring at least
/// the threshold. Label contents are left unchanged.
PseudoLabelStore filter_by_consistency(PseudoLabelStore store, const std::map<std::string, double>& scores,
                                       double threshold);

/// Mean foreground DSC of the stored pseudo-labels against hidden truth, or
/// nothing when no stored subject has hidden truth.
std::optional<double> pseudo_label_quality(const PseudoLabelStore& store, const HiddenTruth& truth);

/// Writes "<id>_labels.u8" files plus "pseudo_labels.json" (dims, estimation
/// iteration, retained set) into `dir`.
void save_pseudo_labels(const std::filesystem::path& dir, const PseudoLabelStore& store);
PseudoLabelStore load_pseudo_labels(const std::filesystem::path& dir);

}  // namespace semiseg
