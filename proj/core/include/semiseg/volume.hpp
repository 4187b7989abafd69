#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "semiseg/grid.hpp"

namespace semiseg {

/// 3D intensity array stored slice-major (slice, row, column).
struct Volume {
    std::string subject_id;
    int slices = 0;
    int rows = 0;
    int cols = 0;
    /// In-plane pixel size in mm, (row, col).
    std::array<double, 2> spacing{1.0, 1.0};
    std::vector<float> intensities;

    Volume() = default;
    Volume(std::string id, int slices, int rows, int cols, std::array<double, 2> spacing);

    std::size_t slice_size() const noexcept { return static_cast<std::size_t>(rows) * cols; }
    Image slice(int s) const;
    void set_slice(int s, const Image& img);

    /// Throws std::invalid_argument when an invariant is broken.
    void validate() const;

    bool operator==(const Volume&) const = default;
};

/// Integer label array paired with a Volume; values in {0..num_classes}, 0 = background.
struct LabelVolume {
    int slices = 0;
    int rows = 0;
    int cols = 0;
    int num_classes = 0;
    std::vector<std::uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(int slices, int rows, int cols, int num_classes);

    std::size_t slice_size() const noexcept { return static_cast<std::size_t>(rows) * cols; }
    LabelMap slice(int s) const;
    void set_slice(int s, const LabelMap& map);

    bool matches(const Volume& v) const noexcept {
        return slices == v.slices && rows == v.rows && cols == v.cols;
    }
    void validate() const;

    bool operator==(const LabelVolume&) const = default;
};

struct Subject {
    Volume image;
    std::optional<LabelVolume> labels;

    bool operator==(const Subject&) const = default;
};

struct LabeledVolume {
    Volume image;
    LabelVolume labels;
};

}  // namespace semiseg
