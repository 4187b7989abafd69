#pragma once

#include <cstdint>
#include <random>

namespace semiseg {

/// splitmix64 finalizer over (seed, stream); used to derive per-purpose seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

/// Seeded random stream. Every stochastic operation in the library takes one
/// of these explicitly; there is no global random state outside of libtorch.
///
/// Draws go through the standard library distributions, so sequences are
/// reproducible for a given standard library implementation (libstdc++ here)
/// but not guaranteed identical across implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform real in [lo, hi). Returns lo when lo == hi.
    double uniform(double lo, double hi);
    /// Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi);
    double normal(double mean, double stddev);
    bool bernoulli(double p);
    std::uint64_t next_u64() { return engine_(); }

    /// Independent child stream; consumes one draw from this stream.
    Rng fork() { return Rng(mix_seed(engine_(), 0x9e3779b97f4a7c15ULL)); }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};


}  // namespace semiseg
