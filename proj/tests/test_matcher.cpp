#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "prism/matcher.hpp"
#include "testutil.hpp"

using namespace prism;
using testutil::check_gradients;

namespace {

Tensor<double> dual_softmax_values(const Tensor<double>& s, const Tensor<double>& sa,
                                   const Tensor<double>& sb) {
    Tape<double> tape;
    Var<double> p = weighted_dual_softmax(tape, tape.constant(s), tape.constant(sa),
                                          tape.constant(sb));
    return tape.value(p);
}

// Literal restatement of the selection rule with independent max scans.
std::vector<CoarseMatch<double>> brute_force_mnn(const Tensor<double>& p, double theta,
                                                 const Tensor<double>& ma,
                                                 const Tensor<double>& mb) {
    const int64_t m = p.dim(0), n = p.dim(1);
    std::vector<CoarseMatch<double>> out;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double row_max = -1e300, col_max = -1e300;
            for (int64_t jj = 0; jj < n; ++jj) row_max = std::max(row_max, p.at(i, jj));
            for (int64_t ii = 0; ii < m; ++ii) col_max = std::max(col_max, p.at(ii, j));
            int64_t row_arg = -1, col_arg = -1;
            for (int64_t jj = 0; jj < n && row_arg < 0; ++jj)
                if (p.at(i, jj) == row_max) row_arg = jj;
            for (int64_t ii = 0; ii < m && col_arg < 0; ++ii)
                if (p.at(ii, j) == col_max) col_arg = ii;
            if (row_arg == j && col_arg == i && p.at(i, j) > theta && ma[i] != 0.0 &&
                mb[j] != 0.0)
                out.push_back({i, j, p.at(i, j)});
        }
    return out;
}

struct RefinedOracle {
    double dx, dy, phi;
};

RefinedOracle refine_oracle(const Tensor<double>& fa, const Tensor<double>& fb, int64_t ya,
                            int64_t xa, int64_t yb, int64_t xb, int window) {
    const int64_t c_f = fa.dim(0);
    const int hw = (window - 1) / 2;
    std::vector<double> logits;
    for (int dy = -hw; dy <= hw; ++dy)
        for (int dx = -hw; dx <= hw; ++dx) {
            double dot = 0;
            for (int64_t c = 0; c < c_f; ++c)
                dot += fa.at(c, ya, xa) * fb.at(c, yb + dy, xb + dx);
            logits.push_back(dot / std::sqrt(double(c_f)));
        }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    double ex = 0, ey = 0, e2 = 0;
    int64_t k = 0;
    for (int dy = -hw; dy <= hw; ++dy)
        for (int dx = -hw; dx <= hw; ++dx, ++k) {
            const double w = logits[size_t(k)] / z;
            ex += w * dx;
            ey += w * dy;
            e2 += w * (dx * dx + dy * dy);
        }
    return {ex, ey, 2.0 * std::sqrt(std::max(0.0, e2 - ex * ex - ey * ey))};
}

}  // namespace

TEST_CASE("similarity matches a double-loop oracle and scales linearly") {
    Tape<double> tape;
    Var<double> eye = tape.constant(
        Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    const Tensor<double>& id = tape.value(similarity(tape, eye, eye, 1.0));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) CHECK(id.at(i, j) == (i == j ? 1.0 : 0.0));

    Rng rng(401);
    Tensor<double> a = random_normal<double>({4, 3}, rng);
    Tensor<double> b = random_normal<double>({5, 3}, rng);
    const Tensor<double>& s = tape.value(similarity(tape, tape.constant(a), tape.constant(b), 0.7));
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            double dot = 0;
            for (int64_t c = 0; c < 3; ++c) dot += a.at(i, c) * b.at(j, c);
            CHECK(s.at(i, j) == doctest::Approx(0.7 * dot).epsilon(1e-12));
        }

    Tensor<double> s1 = tape.value(similarity(tape, tape.constant(a), tape.constant(b), 1.0));
    Tensor<double> s2 = tape.value(similarity(tape, tape.constant(a), tape.constant(b), 2.0));
    for (int64_t t = 0; t < s1.numel(); ++t) s1[t] *= 2.0;
    CHECK(max_abs_diff(s1, s2) == 0.0);

    CHECK_THROWS_AS(similarity(tape, eye, eye, 0.0), ValueError);
    CHECK_THROWS_AS(similarity(tape, eye, tape.constant(Tensor<double>::ones({2, 4})), 1.0),
                    ShapeError);
}

TEST_CASE("weighted dual-softmax pinned values and trivial cases") {
    Tensor<double> one = Tensor<double>::ones({1, 1});
    Tensor<double> p1 = dual_softmax_values(Tensor<double>::from({1, 1}, {3.7}), one, one);
    CHECK(p1[0] == 1.0);

    Tensor<double> s = Tensor<double>::from({2, 2}, {10, 0, 0, 10});
    Tensor<double> ones2 = Tensor<double>::ones({2, 1});
    Tensor<double> p = dual_softmax_values(s, ones2, ones2);
    const double e10 = std::exp(10.0);
    const double diag = (e10 / (e10 + 1.0)) * (e10 / (e10 + 1.0));
    const double off = (1.0 / (e10 + 1.0)) * (1.0 / (e10 + 1.0));
    CHECK(p.at(0, 0) == doctest::Approx(diag).epsilon(1e-12));
    CHECK(p.at(1, 1) == doctest::Approx(diag).epsilon(1e-12));
    CHECK(p.at(0, 1) == doctest::Approx(off).epsilon(1e-12));
    CHECK(p.at(1, 0) == doctest::Approx(off).epsilon(1e-12));
    CHECK(diag == doctest::Approx(0.99991).epsilon(1e-4));
    CHECK(off == doctest::Approx(2.06e-9).epsilon(5e-3));

    Rng rng(402);
    Tensor<double> sr = random_normal<double>({3, 4}, rng);
    Tensor<double> ones3 = Tensor<double>::ones({3, 1});
    Tensor<double> ones4 = Tensor<double>::ones({4, 1});
    Tensor<double> base = dual_softmax_values(sr, ones3, ones4);
    Tensor<double> half = dual_softmax_values(sr, Tensor<double>::from({3, 1}, {0.5, 1, 1}), ones4);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(half.at(0, j) == 0.5 * base.at(0, j));
        CHECK(half.at(1, j) == base.at(1, j));
        CHECK(half.at(2, j) == base.at(2, j));
    }
}

TEST_CASE("dual-softmax invariants on random problems") {
    Rng rng(403);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor<double> s = random_normal<double>({7, 5}, rng);
        for (int64_t t = 0; t < s.numel(); ++t) s[t] *= 3.0;
        Tensor<double> sa = random_uniform<double>({7, 1}, rng, 0.05, 0.95);
        Tensor<double> sb = random_uniform<double>({5, 1}, rng, 0.05, 0.95);
        Tensor<double> p = dual_softmax_values(s, sa, sb);
        for (int64_t i = 0; i < 7; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                CHECK(p.at(i, j) >= 0.0);
                CHECK(p.at(i, j) <= sa[i] * sb[j] + 1e-15);
            }
    }

    // The row-softmax factor itself is a distribution over columns.
    Tape<double> tape;
    Rng row_rng(404);
    Tensor<double> s = random_normal<double>({6, 9}, row_rng);
    const Tensor<double>& row = tape.value(softmax_rows(tape.constant(s)));
    for (int64_t i = 0; i < 6; ++i) {
        double acc = 0;
        for (int64_t j = 0; j < 9; ++j) acc += row.at(i, j);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("dual-softmax gradients") {
    Rng rng(405);
    Tensor<double> s = random_normal<double>({3, 4}, rng);
    Tensor<double> sa = random_uniform<double>({3, 1}, rng, 0.2, 0.8);
    Tensor<double> sb = random_uniform<double>({4, 1}, rng, 0.2, 0.8);
    Tensor<double> w = random_normal<double>({3, 4}, rng);
    check_gradients({&s, &sa, &sb}, [&](Tape<double>& tape) {
        Var<double> p = weighted_dual_softmax(tape, tape.param(s), tape.param(sa), tape.param(sb));
        return sum(mul(p, tape.constant(w)));
    });
}

TEST_CASE("select_coarse pinned cases") {
    Tensor<double> p = Tensor<double>::full({4, 4}, 0.05);
    for (int64_t i = 0; i < 4; ++i) p.at(i, i) = 0.9;
    Tensor<double> ones4 = Tensor<double>::ones({4});
    auto diag = select_coarse(p, 0.2, ones4, ones4);
    REQUIRE(diag.size() == 4);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(diag[size_t(i)].i == i);
        CHECK(diag[size_t(i)].j == i);
        CHECK(diag[size_t(i)].confidence == 0.9);
    }

    CHECK(select_coarse(p, 0.95, ones4, ones4).empty());

    // (0,1) is row 0's max but not column 1's max, so only (1,0) and (2,1) survive.
    Tensor<double> q = Tensor<double>::from(
        {3, 3}, {0.1, 0.5, 0.2, 0.6, 0.1, 0.1, 0.1, 0.7, 0.15});
    Tensor<double> ones3 = Tensor<double>::ones({3});
    auto mnn = select_coarse(q, 0.2, ones3, ones3);
    REQUIRE(mnn.size() == 2);
    CHECK(mnn[0].i == 1);
    CHECK(mnn[0].j == 0);
    CHECK(mnn[0].confidence == 0.6);
    CHECK(mnn[1].i == 2);
    CHECK(mnn[1].j == 1);

    Tensor<double> ma = Tensor<double>::from({3}, {1, 0, 1});
    auto pruned_a = select_coarse(q, 0.2, ma, ones3);
    REQUIRE(pruned_a.size() == 1);
    CHECK(pruned_a[0].i == 2);
    Tensor<double> mb = Tensor<double>::from({3}, {1, 0, 1});
    auto pruned_b = select_coarse(q, 0.2, ones3, mb);
    REQUIRE(pruned_b.size() == 1);
    CHECK(pruned_b[0].i == 1);

    CHECK_THROWS_AS(select_coarse(q, 0.2, ones4, ones3), ShapeError);
}

TEST_CASE("select_coarse equals brute force on random instances") {
    Rng rng(406);
    for (int rep = 0; rep < 200; ++rep) {
        Tensor<double> p = random_uniform<double>({6, 6}, rng, 0.0, 1.0);
        Tensor<double> ma({6}), mb({6});
        for (int64_t t = 0; t < 6; ++t) {
            ma[t] = rng.uniform() < 0.8 ? 1.0 : 0.0;
            mb[t] = rng.uniform() < 0.8 ? 1.0 : 0.0;
        }
        auto got = select_coarse(p, 0.15, ma, mb);
        auto want = brute_force_mnn(p, 0.15, ma, mb);
        REQUIRE(got.size() == want.size());
        std::set<int64_t> seen_i, seen_j;
        for (size_t k = 0; k < got.size(); ++k) {
            CHECK(got[k].i == want[k].i);
            CHECK(got[k].j == want[k].j);
            CHECK(got[k].confidence == want[k].confidence);
            CHECK(seen_i.insert(got[k].i).second);
            CHECK(seen_j.insert(got[k].j).second);
        }
    }
}

TEST_CASE("refine offsets match a weighted-average oracle") {
    Rng rng(407);
    Tensor<double> fa = random_normal<double>({6, 16, 16}, rng);
    Tensor<double> fb = random_normal<double>({6, 16, 16}, rng);
    std::vector<CoarseMatch<double>> coarse;
    for (int64_t i = 0; i < 16; ++i) coarse.push_back({i, (i * 7 + 3) % 16, 0.5});

    Tape<double> tape;
    auto fine = refine(tape, coarse, tape.constant(fa), tape.constant(fb), 3);
    REQUIRE(fine.kept.size() == 16);
    CHECK(fine.dropped == 0);
    const Tensor<double>& off = tape.value(fine.offsets);
    for (size_t k = 0; k < fine.kept.size(); ++k) {
        const auto& cm = coarse[size_t(fine.kept[k])];
        const int64_t ra = cm.i / 4, ca = cm.i % 4, rb = cm.j / 4, cb = cm.j % 4;
        RefinedOracle o =
            refine_oracle(fa, fb, 4 * ra + 2, 4 * ca + 2, 4 * rb + 2, 4 * cb + 2, 3);
        CHECK(off.at(int64_t(k), 0) == doctest::Approx(o.dx).epsilon(1e-10));
        CHECK(off.at(int64_t(k), 1) == doctest::Approx(o.dy).epsilon(1e-10));
        CHECK(fine.phi[int64_t(k)] == doctest::Approx(o.phi).epsilon(1e-10));
        CHECK(fine.p_a.at(int64_t(k), 0) == double(8 * ca + 4));
        CHECK(fine.p_a.at(int64_t(k), 1) == double(8 * ra + 4));
        CHECK(fine.p_b.at(int64_t(k), 0) ==
              doctest::Approx(8 * cb + 5 + 2 * o.dx).epsilon(1e-10));
        CHECK(fine.p_b.at(int64_t(k), 1) ==
              doctest::Approx(8 * rb + 5 + 2 * o.dy).epsilon(1e-10));
        CHECK(fine.confidence[int64_t(k)] == 0.5);
    }
}

TEST_CASE("refine pinned geometry, bounds, and drops") {
    // One-hot heatmap placed at offset (+1,-1) has that exact expectation.
    Tensor<double> grid = matcher_detail::offset_grid<double>(5);
    Tensor<double> onehot = Tensor<double>::zeros({25});
    onehot[(-1 + 2) * 5 + (1 + 2)] = 1.0;
    double ex = 0, ey = 0;
    for (int64_t k = 0; k < 25; ++k) {
        ex += onehot[k] * grid.at(k, 0);
        ey += onehot[k] * grid.at(k, 1);
    }
    CHECK(ex == 1.0);
    CHECK(ey == -1.0);

    // A constant B map gives a uniform heatmap: zero offset, pinned spread.
    Rng rng(408);
    Tensor<double> fa = random_normal<double>({4, 16, 16}, rng);
    Tensor<double> fb = Tensor<double>::ones({4, 16, 16});
    Tape<double> tape;
    auto uniform = refine(tape, {{5, 5, 0.8}}, tape.constant(fa), tape.constant(fb), 5);
    REQUIRE(uniform.kept.size() == 1);
    const Tensor<double>& u_off = tape.value(uniform.offsets);
    CHECK(std::abs(u_off.at(0, 0)) < 1e-13);
    CHECK(std::abs(u_off.at(0, 1)) < 1e-13);
    // Total variance of a uniform 5x5 heatmap is 4 in fine units -> phi = 4 px.
    CHECK(uniform.phi[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(uniform.p_a.at(0, 0) == 12.0);
    CHECK(uniform.p_a.at(0, 1) == 12.0);
    CHECK(uniform.anchor_b.at(0, 0) == 13.0);
    CHECK(uniform.anchor_b.at(0, 1) == 13.0);

    // Window 5 cannot fit at the last row/column of either grid.
    Tensor<double> fb2 = random_normal<double>({4, 16, 16}, rng);
    std::vector<CoarseMatch<double>> coarse = {
        {5, 3, 0.9},   // j in the rightmost coarse column of B -> dropped
        {5, 12, 0.9},  // j in the bottom coarse row of B -> dropped
        {3, 5, 0.9},   // i in the rightmost coarse column of A -> dropped
        {5, 6, 0.9},   // interior -> kept
    };
    Tape<double> tape2;
    auto edge = refine(tape2, coarse, tape2.constant(fa), tape2.constant(fb2), 5);
    CHECK(edge.dropped == 3);
    REQUIRE(edge.kept.size() == 1);
    CHECK(edge.kept[0] == 3);

    // Offsets stay inside the window radius.
    std::vector<CoarseMatch<double>> all;
    for (int64_t i = 0; i < 16; ++i) all.push_back({i, 15 - i, 0.5});
    Tape<double> tape3;
    auto bounded = refine(tape3, all, tape3.constant(fa), tape3.constant(fb2), 5);
    const Tensor<double>& b_off = tape3.value(bounded.offsets);
    CHECK(int64_t(bounded.kept.size()) + bounded.dropped == 16);
    for (int64_t k = 0; k < int64_t(bounded.kept.size()); ++k) {
        CHECK(std::abs(b_off.at(k, 0)) <= 2.0 + 1e-12);
        CHECK(std::abs(b_off.at(k, 1)) <= 2.0 + 1e-12);
    }

    // Degenerate inputs.
    Tape<double> tape4;
    auto empty = refine(tape4, {}, tape4.constant(fa), tape4.constant(fb2), 5);
    CHECK(empty.kept.empty());
    CHECK(empty.dropped == 0);
    CHECK(tape4.value(empty.offsets).dim(0) == 0);
    CHECK_THROWS_AS(refine(tape4, {{99, 0, 0.5}}, tape4.constant(fa), tape4.constant(fb2), 5),
                    ShapeError);
    CHECK_THROWS_AS(refine(tape4, {}, tape4.constant(fa), tape4.constant(fb2), 4), ValueError);
}

TEST_CASE("refine gradients flow into both fine maps") {
    Rng rng(409);
    Tensor<double> fa = random_normal<double>({3, 8, 8}, rng);
    Tensor<double> fb = random_normal<double>({3, 8, 8}, rng);
    Tensor<double> w = random_normal<double>({3, 2}, rng);
    std::vector<CoarseMatch<double>> coarse = {{0, 3, 0.9}, {3, 0, 0.8}, {1, 1, 0.7}};
    check_gradients({&fa, &fb}, [&](Tape<double>& tape) {
        auto fine = refine(tape, coarse, tape.param(fa), tape.param(fb), 3);
        return sum(mul(fine.offsets, tape.constant(w)));
    });
}

TEST_CASE("match file format round trip") {
    FineMatchSet<double> m;
    m.kept = {0, 1};
    m.p_a = Tensor<double>::from({2, 2}, {12, 20, 123.456789, 4});
    m.p_b = Tensor<double>::from({2, 2}, {13.25, 21.0625, 99.5, 5.5});
    m.anchor_b = m.p_b;
    m.phi = Tensor<double>::from({2}, {1.0, 2.0});
    m.confidence = Tensor<double>::from({2}, {0.987654321, 0.25});

    std::ostringstream os;
    write_matches(os, m);
    std::istringstream is(os.str());
    auto rows = read_matches(is);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0][0] == 12.0);
    CHECK(rows[0][1] == 20.0);
    CHECK(rows[0][2] == 13.25);
    CHECK(rows[0][3] == 21.0625);
    CHECK(rows[0][4] == doctest::Approx(0.987654321).epsilon(1e-5));
    CHECK(rows[1][0] == doctest::Approx(123.456789).epsilon(1e-5));
    CHECK(os.str().find("123.457") != std::string::npos);

    std::istringstream bad("1 2 3\n");
    CHECK_THROWS_AS(read_matches(bad), IoError);
}
