#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dyncls {

// Deterministic PRNG (xoshiro256**) with named substream derivation.
// std:: distributions are implementation-defined, so every sampling
// helper the engine needs lives here; results are identical across
// platforms and stdlib versions for a given seed.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // uniform in [0,1) with 53 random bits
    double next_double();

    // uniform in [lo,hi)
    double uniform(double lo, double hi);

    // uniform in [0,n), unbiased; n must be > 0
    uint64_t below(uint64_t n);

    // standard normal via Box-Muller (no cached spare: state advances by
    // exactly two draws per call)
    double normal();

    // Independent substream keyed on (current state, name, index); does not
    // advance this generator. The same (seed, name, index) always yields the
    // same stream, which is what makes per-stage reproducibility work.
    Rng derive(std::string_view name, uint64_t index = 0) const;

    // Fisher-Yates
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Shuffles the first k slots of v (each a uniform draw from the rest);
    // v[0..k) is then a uniform sample without replacement and v[k..) the
    // remainder.
    template <class T>
    void partial_shuffle(std::vector<T>& v, size_t k) {
        for (size_t i = 0; i < k && i + 1 < v.size(); ++i) {
            size_t j = i + static_cast<size_t>(below(v.size() - i));
            std::swap(v[i], v[j]);
        }
    }

private:
    Rng() = default;
    uint64_t s_[4];
};

// FNV-1a, used for substream naming and content digests.
uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull);

} // namespace dyncls
