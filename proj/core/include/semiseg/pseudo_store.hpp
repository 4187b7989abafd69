#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "semiseg/volume.hpp"

namespace semiseg {

/// Current pseudo-labels for the unlabeled pool, keyed by subject id.
struct PseudoLabelStore {
    std::map<std::string, LabelVolume> labels;
    /// Training iteration (within phase 2) at which the labels were estimated.
    std::int64_t estimation_iteration = 0;
    /// Subjects whose pseudo-labels may enter training batches; subset of `labels` keys.
    std::set<std::string> retained;

    bool is_retained(const std::string& id) const {
        return retained.contains(id) && labels.contains(id);
    }
};

}  // namespace semiseg
