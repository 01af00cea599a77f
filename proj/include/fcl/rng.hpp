#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace fcl {

// Finalizer of the SplitMix64 generator (Steele, Lea, Flood 2014).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a tag path.
// Pure function: the same (seed, tags) always yields the same stream,
// no generator state is shared between call sites.
inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = mix64(seed);
    for (std::uint64_t t : tags) {
        s = mix64(s ^ mix64(t));
    }
    return s;
}

// Stream tags used to keep derived seeds disjoint across purposes.
namespace stream {
constexpr std::uint64_t kInit = 1;
constexpr std::uint64_t kShuffle = 2;
constexpr std::uint64_t kDropout = 3;
constexpr std::uint64_t kSharedWeights = 4;
constexpr std::uint64_t kCellWeights = 5;
constexpr std::uint64_t kCellSamples = 6;
constexpr std::uint64_t kSplit = 7;
constexpr std::uint64_t kFraction = 8;
constexpr std::uint64_t kAugment = 9;
}  // namespace stream

// Small deterministic PRNG. std::mt19937_64 itself is portable but the
// standard distributions are not; every draw here is fully specified so
// outputs are bit-identical across compilers and platforms.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1), never exactly 0 or 1; safe under log().
    double next_unit_open() {
        return (static_cast<double>(next() >> 12) + 0.5) * 0x1.0p-52;
    }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_unit();
    }

    // Unbiased-enough index draw via 128-bit multiply (bias < 2^-64 * n).
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    // Standard normal via Box-Muller.
    double next_gaussian() {
        double u1 = next_unit_open();
        double u2 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

private:
    std::uint64_t state_;
};

// Fisher-Yates permutation of {0, ..., n-1}.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    SplitMix64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace fcl
