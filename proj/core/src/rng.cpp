#include "certlab/rng.hpp"

#include "certlab/errors.hpp"

namespace certlab {

uint64_t Rng::next_u64() {
    // splitmix64 (Vigna). Full-period, passes BigCrush, two multiplies.
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

float Rng::next_float() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

float Rng::next_float(float lo, float hi) {
    return lo + (hi - lo) * next_float();
}

uint64_t Rng::next_below(uint64_t n) {
    if (n == 0) throw ConfigError("Rng::next_below: n must be positive");
    // Lemire's multiply-shift; bias is < 2^-32 for the ranges used here.
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

Rng Rng::fork(uint64_t stream) const {
    Rng mix(state_ ^ (0xa0761d6478bd642fULL + stream));
    uint64_t seed = mix.next_u64();
    mix.next_u64();
    return Rng(seed);
}

void shuffle(std::vector<int32_t>& values, Rng& rng) {
    for (size_t i = values.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(values[i - 1], values[j]);
    }
}

std::vector<int32_t> sample_without_replacement(int64_t n, int64_t k, Rng& rng) {
    if (k < 0 || n < 0 || k > n)
        throw ConfigError("sample_without_replacement: need 0 <= k <= n");
    // Partial Fisher-Yates over an index table; O(n) memory is fine at the
    // dataset sizes this library handles.
    std::vector<int32_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    std::vector<int32_t> out(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
        int64_t j = i + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        out[static_cast<size_t>(i)] = pool[static_cast<size_t>(i)];
    }
    return out;
}

} // namespace certlab
