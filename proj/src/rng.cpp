#include "fedbe/rng.hpp"

#include <cmath>

namespace fedbe {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

std::uint64_t substream_seed(std::uint64_t root, std::string_view name,
                             std::uint64_t a, std::uint64_t b) {
    std::uint64_t h = splitmix64(root ^ fnv1a(name));
    h = splitmix64(h ^ (a * 0xd6e8feb86659fd93ULL));
    h = splitmix64(h ^ (b * 0xa5a3564fe4a6c15fULL));
    return h;
}

std::uint64_t Rng::bounded(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = eng_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    // u1 must be strictly positive for the log.
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

double Rng::gamma(double shape) {
    if (shape < 1.0) {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

std::vector<double> Rng::dirichlet(double alpha, std::size_t k) {
    std::vector<double> p(k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        p[i] = gamma(alpha);
        sum += p[i];
    }
    if (sum <= 0.0) {
        // All draws underflowed (pathologically small alpha); fall back to a
        // single concentrated class so the vector still sums to one.
        p.assign(k, 0.0);
        p[bounded(k)] = 1.0;
        return p;
    }
    for (double& x : p) x /= sum;
    return p;
}

std::size_t Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        r -= weights[i];
        if (r < 0.0) return i;
    }
    return weights.size() - 1;
}

} // namespace fedbe
