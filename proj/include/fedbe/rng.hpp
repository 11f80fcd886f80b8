#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedbe {

// Deterministic RNG with self-contained distributions. std::mt19937_64 is
// bit-specified by the standard; the distribution code below is ours, so a
// given seed produces the same draws on every platform and toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    std::uint64_t bounded(std::uint64_t n);

    // Standard normal via Box-Muller (both draws consumed, one returned).
    double normal();

    // Gamma(shape, 1) via Marsaglia-Tsang, with the alpha<1 boost.
    double gamma(double shape);

    // Dirichlet(alpha * 1_K): K iid Gamma(alpha) draws, normalized.
    std::vector<double> dirichlet(double alpha, std::size_t k);

    // Index draw proportional to non-negative weights.
    std::size_t categorical(const std::vector<double>& weights);

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

// Derives the seed of a named substream from a root seed. Separate streams
// (init, partition, batch order, mode switch, ...) stay independent: changing
// how one stage consumes draws never perturbs another stage.
std::uint64_t substream_seed(std::uint64_t root, std::string_view name,
                             std::uint64_t a = 0, std::uint64_t b = 0);

inline Rng substream(std::uint64_t root, std::string_view name,
                     std::uint64_t a = 0, std::uint64_t b = 0) {
    return Rng(substream_seed(root, name, a, b));
}

} // namespace fedbe
