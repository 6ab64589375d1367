#include "dyncls/rng.hpp"

#include <cmath>

namespace dyncls {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

} // namespace

uint64_t fnv1a64(const void* data, size_t len, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(std::string_view s, uint64_t h) {
    return fnv1a64(s.data(), s.size(), h);
}

Rng::Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_)
        w = splitmix64(x);
}

uint64_t Rng::next_u64() {
    // xoshiro256**
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
}

uint64_t Rng::below(uint64_t n) {
    uint64_t threshold = (0 - n) % n; // 2^64 mod n
    for (;;) {
        uint64_t r = next_u64();
        if (r >= threshold)
            return r % n;
    }
}

double Rng::normal() {
    double u1 = 0.0;
    do {
        u1 = next_double();
    } while (u1 <= 0.0);
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

Rng Rng::derive(std::string_view name, uint64_t index) const {
    uint64_t h = fnv1a64(name);
    h = fnv1a64(&index, sizeof(index), h);
    Rng out;
    for (int i = 0; i < 4; ++i) {
        uint64_t x = s_[i] ^ (h + 0x632be59bd9b4e019ull * (i + 1));
        out.s_[i] = splitmix64(x);
    }
    return out;
}

} // namespace dyncls
