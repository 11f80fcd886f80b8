#include <doctest.h>

#include <cmath>

#include "fedbe/rng.hpp"

using namespace fedbe;

TEST_CASE("substreams are independent and deterministic") {
    CHECK(substream_seed(1, "init") == substream_seed(1, "init"));
    CHECK(substream_seed(1, "init") != substream_seed(2, "init"));
    CHECK(substream_seed(1, "init") != substream_seed(1, "partition"));
    CHECK(substream_seed(1, "local", 3, 7) != substream_seed(1, "local", 3, 8));
    CHECK(substream_seed(1, "local", 3, 7) != substream_seed(1, "local", 4, 7));

    Rng a = substream(9, "batch");
    Rng b = substream(9, "batch");
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform stays in range, bounded stays below n") {
    Rng rng(42);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(rng.bounded(7) < 7);
    }
}

TEST_CASE("dirichlet draws are simplex points") {
    Rng rng(5);
    for (double alpha : {0.05, 0.5, 1.0, 100.0}) {
        const std::vector<double> p = rng.dirichlet(alpha, 6);
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("gamma moments roughly match for a few shapes") {
    Rng rng(11);
    for (double shape : {0.3, 1.0, 4.0}) {
        double sum = 0.0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) sum += rng.gamma(shape);
        CHECK(sum / n == doctest::Approx(shape).epsilon(0.05));
    }
}

TEST_CASE("categorical respects weights") {
    Rng rng(13);
    std::vector<double> w = {1.0, 3.0};
    int ones = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) ones += rng.categorical(w) == 1 ? 1 : 0;
    CHECK(static_cast<double>(ones) / n == doctest::Approx(0.75).epsilon(0.03));
}
