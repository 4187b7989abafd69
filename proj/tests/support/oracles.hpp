#pragma once

// Brute-force reference implementations used only by tests. They loop over
// pixels and classes directly and share no code with the library.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace oracle {

/// Toy representation map: z[(r * cols + c) * dim + d], labels[r * cols + c].
struct ToyMap {
    int rows = 0;
    int cols = 0;
    int dim = 0;
    std::vector<double> z;
    std::vector<int> labels;

    std::vector<double> at(int r, int c) const;
    /// [D, H, W] double tensor.
    torch::Tensor z_tensor() const;
    /// [H, W] int64 tensor.
    torch::Tensor label_tensor() const;
};

struct Pixel {
    int row = 0;
    int col = 0;
};

/// anchors[c - 1] = anchor pixels of class c.
using Anchors = std::vector<std::vector<Pixel>>;

double cosine(const std::vector<double>& a, const std::vector<double>& b);

/// Mean representation of class c over all its pixels; empty when absent.
std::optional<std::vector<double>> class_mean(const ToyMap& m, int c);

/// -log(exp(s_c / tau) / sum_k exp(s_k / tau)), k over classes with a mean.
double pixel_term(const std::vector<double>& zi, const std::vector<std::optional<std::vector<double>>>& means, int c,
                  double tau);

/// Pair loss with anchors from x and means from xp, averaged over classes that
/// have anchors in x and a mean in xp. Returns 0 and shared = 0 when none.
double pair_loss(const ToyMap& x, const Anchors& anchors, const ToyMap& xp, double tau, int num_classes,
                 int* shared = nullptr);

/// Soft Dice loss summed directly: probs[b][k][r][c] layout of a [B, K, H, W]
/// tensor, labels [B, H, W].
double dice_loss(const std::vector<double>& probs, const std::vector<int>& labels, int batch, int channels, int rows,
                 int cols, double eps);

/// Sort-based percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// Central finite-difference gradient of f at x (double tensor), step h.
torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x, double h);

/// ||a - b||_2 / max(||a||_2, ||b||_2, tiny).
double relative_error(const torch::Tensor& a, const torch::Tensor& b);

/// Random toy map with classes 0..num_classes; every class in 1..num_classes
/// gets at least `min_per_class` pixels when the map is large enough.
ToyMap random_map(std::mt19937_64& gen, int rows, int cols, int dim, int num_classes, int min_per_class = 1);

}  // namespace oracle
