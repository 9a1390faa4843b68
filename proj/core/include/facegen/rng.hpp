#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace facegen {

// Deterministic random source used everywhere seeded randomness is needed.
//
// Engine: std::mt19937_64 (bit-exact sequence is pinned by the standard).
// Normal deviates: basic Box-Muller over 53-bit uniforms, with the spare
// value cached, so the stream depends only on the seed and the call sequence.
// Distribution code is hand-rolled on purpose: std::normal_distribution is
// implementation-defined and would break reproducibility across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Unbiased uniform integer in [0, n), rejection sampling. n must be > 0.
    std::uint64_t uniform_below(std::uint64_t n);

    // Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(uniform_below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    double normal(double mean, double stddev);

    // Fisher-Yates, descending index, draws from this stream.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// splitmix64 of (seed + stream * golden gamma): cheap derivation of
// independent child seeds from one run seed.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace facegen
