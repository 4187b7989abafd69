#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace semiseg {

/// Dense row-major 2D array. Used for image slices and label maps.
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), values_(checked_size(rows, cols), fill) {}
    Grid(int rows, int cols, std::vector<T> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != checked_size(rows, cols)) {
            throw std::invalid_argument("grid value count does not match dims");
        }
    }

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    T& operator()(int r, int c) noexcept {
        assert(in_bounds(r, c));
        return values_[static_cast<std::size_t>(r) * cols_ + c];
    }
    const T& operator()(int r, int c) const noexcept {
        assert(in_bounds(r, c));
        return values_[static_cast<std::size_t>(r) * cols_ + c];
    }

    bool in_bounds(int r, int c) const noexcept {
        return r >= 0 && c >= 0 && r < rows_ && c < cols_;
    }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    T* data() noexcept { return values_.data(); }
    const T* data() const noexcept { return values_.data(); }

    bool operator==(const Grid&) const = default;

private:
    static std::size_t checked_size(int rows, int cols) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("negative grid dims");
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> values_;
};

using Image = Grid<float>;
using LabelMap = Grid<std::uint8_t>;

}  // namespace semiseg
