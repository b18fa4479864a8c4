#pragma once

#include <cstdint>
#include <vector>

namespace certlab {

// Deterministic 64-bit PRNG (splitmix64). Every stochastic choice in the
// library draws from one of these so that runs are reproducible bit-for-bit
// across platforms from a single integer seed; nothing here depends on
// std::random distributions, whose outputs are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();

    // Uniform in [0, 1) with 24 bits of precision (exact in float).
    float next_float();

    // Uniform in [lo, hi).
    float next_float(float lo, float hi);

    // Uniform integer in [0, n). n must be positive.
    uint64_t next_below(uint64_t n);

    // A fresh generator whose stream is decorrelated from this one; `stream`
    // distinguishes siblings derived from the same parent.
    Rng fork(uint64_t stream) const;

private:
    uint64_t state_;
};

// Fisher-Yates shuffle driven by `rng`.
void shuffle(std::vector<int32_t>& values, Rng& rng);

// k distinct values sampled from {0, ..., n-1} without replacement,
// in the order drawn.
std::vector<int32_t> sample_without_replacement(int64_t n, int64_t k, Rng& rng);

} // namespace certlab
