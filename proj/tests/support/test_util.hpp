#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "semiseg/dataset.hpp"
#include "semiseg/grid.hpp"

namespace testutil {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

/// Small noiseless-by-default synthetic spec for fast tests.
semiseg::SyntheticSpec small_spec(int subjects = 4, int classes = 3, int dims = 32, int slices = 4);

semiseg::LabelMap random_labels(std::mt19937_64& gen, int rows, int cols, int num_classes);
semiseg::Image random_image(std::mt19937_64& gen, int rows, int cols);

}  // namespace testutil
