#ifndef TRISR_RNG_HPP
#define TRISR_RNG_HPP

#include <cmath>
#include <cstdint>

namespace trisr {

// Counter-based generator: every draw is a pure function of (key, counter),
// so streams keyed by (seed, iteration, role) are order-independent and
// trivially resumable. splitmix64 finalizer on a Weyl sequence.
namespace rng {

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Combine stream identifiers into one key.
inline uint64_t key(uint64_t seed, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t k = mix64(seed);
    k = mix64(k ^ (a + 0x243f6a8885a308d3ull));
    k = mix64(k ^ (b + 0x13198a2e03707344ull));
    k = mix64(k ^ (c + 0xa4093822299f31d0ull));
    return k;
}

inline uint64_t bits(uint64_t stream_key, uint64_t counter) {
    return mix64(stream_key + counter * 0x9e3779b97f4a7c15ull);
}

/// Uniform in (0, 1]; never returns 0 so it is safe under log().
inline double uniform(uint64_t stream_key, uint64_t counter) {
    return (static_cast<double>(bits(stream_key, counter) >> 11) + 1.0) * 0x1p-53;
}

/// Standard normal via Box-Muller; one value per counter.
inline double normal(uint64_t stream_key, uint64_t counter) {
    const double u1 = uniform(stream_key, 2 * counter);
    const double u2 = uniform(stream_key, 2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

/// Uniform integer in [0, n).
inline uint64_t below(uint64_t stream_key, uint64_t counter, uint64_t n) {
    return bits(stream_key, counter) % n;
}

} // namespace rng
} // namespace trisr

#endif
