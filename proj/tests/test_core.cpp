#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "prism/core.hpp"
#include "prism/tensor.hpp"

using namespace prism;

TEST_CASE("rng is deterministic for a fixed seed") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(1234), d(1235);
    int diff = 0;
    for (int i = 0; i < 10; ++i) diff += c.next_u64() != d.next_u64();
    CHECK(diff == 10);
}

TEST_CASE("uniform stays in [0,1) and fills the range") {
    Rng rng(7);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
}

TEST_CASE("uniform_int covers inclusive bounds") {
    Rng rng(8);
    std::set<int64_t> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(rng.uniform_int(-2, 3));
    CHECK(seen.size() == 6);
    CHECK(*seen.begin() == -2);
    CHECK(*seen.rbegin() == 3);
}

TEST_CASE("normal has sane first moments") {
    Rng rng(9);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("forked streams are independent of later parent draws") {
    Rng parent(42);
    Rng f1 = parent.fork(1);
    std::vector<uint64_t> seq;
    for (int i = 0; i < 8; ++i) seq.push_back(f1.next_u64());

    Rng parent2(42);
    (void)parent2.next_u64();  // advancing the parent must not change the fork
    Rng f2 = parent2.fork(1);
    for (int i = 0; i < 8; ++i) CHECK(f2.next_u64() == seq[size_t(i)]);

    Rng parent3(42);
    Rng g = parent3.fork(2);
    CHECK(g.next_u64() != seq[0]);
}

TEST_CASE("tensor shape bookkeeping") {
    Tensor<float> t = Tensor<float>::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.ndim() == 3);
    CHECK(t.dim(1) == 3);
    t.at(1, 2, 3) = 5.0f;
    CHECK(t[23] == 5.0f);

    Tensor<float> r = t.reshaped({6, 4});
    CHECK(r.at(5, 3) == 5.0f);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
}

TEST_CASE("tensor from initializer and arithmetic helpers") {
    auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    CHECK(t.sum() == 10.0);
    t.scale_(2.0);
    CHECK(t.at(1, 1) == 8.0);
    auto u = Tensor<double>::full({2, 2}, 1.0);
    t.add_(u);
    CHECK(t.at(0, 0) == 3.0);
    CHECK(t.all_finite());
    t[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK(!t.all_finite());
}

TEST_CASE("error hierarchy") {
    CHECK_THROWS_AS(throw ShapeError("x"), Error);
    CHECK_THROWS_AS(throw ValueError("x"), Error);
    CHECK_THROWS_AS(throw IoError("x"), Error);
    CHECK_THROWS_AS(throw ConfigError("x"), Error);
    CHECK_THROWS_AS(throw DegeneratePruningError("x"), Error);
    CHECK_THROWS_AS(throw NoPoseError("x"), Error);
    CHECK_THROWS_AS(throw EmptyKeyError("x"), Error);
}
