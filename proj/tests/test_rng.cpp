#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "fcl/rng.hpp"

using namespace fcl;

TEST_CASE("splitmix stream is deterministic", "[rng]") {
    SplitMix64 a(123);
    SplitMix64 b(123);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.next() == b.next());
    }
    SplitMix64 c(124);
    bool any_diff = false;
    SplitMix64 a2(123);
    for (int i = 0; i < 10; ++i) any_diff |= (a2.next() != c.next());
    REQUIRE(any_diff);
}

TEST_CASE("unit draws stay in range", "[rng]") {
    SplitMix64 rng(42);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.next_unit();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        double v = rng.next_unit_open();
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
        REQUIRE(rng.next_below(7) < 7);
    }
}

TEST_CASE("derived seeds separate streams", "[rng]") {
    auto s1 = derive_seed(5, {stream::kShuffle, 0, 0});
    auto s2 = derive_seed(5, {stream::kShuffle, 0, 1});
    auto s3 = derive_seed(5, {stream::kDropout, 0, 0});
    REQUIRE(s1 != s2);
    REQUIRE(s1 != s3);
    REQUIRE(derive_seed(5, {stream::kShuffle, 0, 0}) == s1);
}

TEST_CASE("shuffled_indices yields a permutation", "[rng]") {
    auto idx = shuffled_indices(100, 7);
    auto sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expected(100);
    std::iota(expected.begin(), expected.end(), std::size_t{0});
    REQUIRE(sorted == expected);
    REQUIRE(shuffled_indices(100, 7) == idx);
    REQUIRE(shuffled_indices(100, 8) != idx);
}

TEST_CASE("gaussian draws have unit moments", "[rng]") {
    SplitMix64 rng(2024);
    const int n = 100000;
    double sum = 0.0;
    double sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double g = rng.next_gaussian();
        sum += g;
        sumsq += g * g;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.01);
    REQUIRE(var == Catch::Approx(1.0).margin(0.02));
}
