#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dmatch/density.hpp"
#include "oracles.hpp"

using dmatch::Tensor;

namespace {

Tensor rows(const std::vector<std::vector<double>>& r) {
    std::vector<double> flat;
    for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
    return Tensor::from_data({r.size(), r[0].size()}, std::move(flat));
}

}  // namespace

TEST_CASE("bandwidth of {0,1,3} against the exhaustive pairwise oracle") {
    auto nn = oracle::nn_distances_exhaustive({{0}, {1}, {3}});
    CHECK(nn == std::vector<double>{1, 1, 2});

    auto samples = rows({{0}, {1}, {3}});
    const double sigma = dmatch::estimate_bandwidth(samples, dmatch::BandwidthMode::MeanNnDistance);
    CHECK(sigma == 4.0 / 3.0);
    CHECK(sigma == (nn[0] + nn[1] + nn[2]) / 3.0);

    const double sq = dmatch::estimate_bandwidth(samples, dmatch::BandwidthMode::MeanNnSquared);
    CHECK(sq == 2.0);
}

TEST_CASE("two points at distance delta give sigma = delta") {
    dmatch::RandomEngine rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        const double delta = 0.1 + 3.0 * rng.uniform();
        const double base = -1.0 + 2.0 * rng.uniform();
        auto s = rows({{base}, {base + delta}});
        CHECK_THAT(dmatch::estimate_bandwidth(s), Catch::Matchers::WithinRel(delta, 1e-12));
    }
}

TEST_CASE("bandwidth agrees with the exhaustive oracle on random banks") {
    dmatch::RandomEngine rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> pts;
        const std::size_t n = 3 + rng.uniform_int(6);
        for (std::size_t i = 0; i < n; ++i) pts.push_back({rng.normal(), rng.normal()});
        auto nn = oracle::nn_distances_exhaustive(pts);
        double want = 0.0;
        for (double v : nn) want += v;
        want /= static_cast<double>(n);
        CHECK_THAT(dmatch::estimate_bandwidth(rows(pts)), Catch::Matchers::WithinRel(want, 1e-12));
    }
}

TEST_CASE("degenerate banks are rejected") {
    CHECK_THROWS_AS(dmatch::estimate_bandwidth(rows({{1, 2}, {1, 2}, {1, 2}})),
                    dmatch::DegenerateBandwidth);
    // pairwise duplicates: every NN distance zero without all rows identical
    CHECK_THROWS_AS(dmatch::estimate_bandwidth(rows({{0}, {0}, {5}, {5}})),
                    dmatch::DegenerateBandwidth);
    CHECK_THROWS_AS(dmatch::estimate_bandwidth(rows({{0}})), dmatch::ShapeError);
}

TEST_CASE("build_kde validates inputs") {
    CHECK_THROWS_AS(dmatch::build_kde(rows({{0}}), 1.0), dmatch::ShapeError);
    CHECK_THROWS_AS(dmatch::build_kde(rows({{0}, {1}}), 0.0), dmatch::NumericError);
    CHECK_THROWS_AS(dmatch::build_kde(rows({{0}, {1}}), -1.0), dmatch::NumericError);
    auto bad = rows({{0}, {1}});
    bad.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(dmatch::build_kde(bad, 1.0), dmatch::NumericError);
}

TEST_CASE("log_density at 0 for samples {-1,+1}, sigma 1") {
    auto model = dmatch::build_kde(rows({{-1}, {1}}), 1.0);
    const double got = model.log_density(rows({{0}})).item();
    const double want = std::log(oracle::gaussian_mixture_pdf({{-1}, {1}}, 1.0, {0}));
    CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 1e-12));
    CHECK_THAT(got, Catch::Matchers::WithinAbs(-1.4189385332046727, 1e-12));
    CHECK_THAT(std::exp(got), Catch::Matchers::WithinAbs(0.24197072451914337, 1e-12));
}

TEST_CASE("log_density matches the direct mixture oracle on random cases") {
    dmatch::RandomEngine rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 1 + rng.uniform_int(4);
        const std::size_t n = 2 + rng.uniform_int(8);
        std::vector<std::vector<double>> pts;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> p;
            for (std::size_t k = 0; k < d; ++k) p.push_back(2.0 * rng.normal());
            pts.push_back(p);
        }
        const double sigma = 0.3 + rng.uniform();
        auto model = dmatch::build_kde(rows(pts), sigma);
        std::vector<double> q;
        for (std::size_t k = 0; k < d; ++k) q.push_back(2.0 * rng.normal());
        const double got = model.log_density(rows({q})).item();
        const double want = std::log(oracle::gaussian_mixture_pdf(pts, sigma, q));
        CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 1e-10));
    }
}

TEST_CASE("permuting samples leaves densities unchanged") {
    dmatch::RandomEngine rng(53);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 8; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
    auto shuffled = pts;
    rng.shuffle(shuffled);
    auto a = dmatch::build_kde(rows(pts), 0.7);
    auto b = dmatch::build_kde(rows(shuffled), 0.7);
    auto queries = rows({{0, 0, 0}, {1, -1, 0.5}, {-2, 0.3, 1}});
    auto la = a.log_density(queries);
    auto lb = b.log_density(queries);
    for (std::size_t i = 0; i < la.numel(); ++i) {
        CHECK_THAT(la.data()[i], Catch::Matchers::WithinAbs(lb.data()[i], 1e-12));
    }
}

TEST_CASE("densities at the sample points are finite and positive") {
    auto pts = rows({{0, 0}, {1, 0}, {0, 2}});
    auto model = dmatch::build_kde(pts, dmatch::estimate_bandwidth(pts));
    auto ld = model.log_density(pts);
    for (double v : ld.data()) {
        CHECK(std::isfinite(v));
        CHECK(std::exp(v) > 0.0);
    }
}

TEST_CASE("far queries underflow gracefully up to 100 sigma") {
    for (std::size_t d : {std::size_t(1), std::size_t(4), std::size_t(16)}) {
        std::vector<std::vector<double>> pts = {std::vector<double>(d, 0.0),
                                                std::vector<double>(d, 0.5)};
        auto model = dmatch::build_kde(rows(pts), 1.0);
        std::vector<double> far(d, 0.0);
        far[0] = 100.0;
        const double ld = model.log_density(rows({far})).item();
        CHECK(std::isfinite(ld));
        CHECK(ld < -1000.0);
    }
}

TEST_CASE("1-d quadrature of the KDE integrates to 1 within 1e-3") {
    dmatch::RandomEngine rng(59);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::vector<double>> pts;
        double lo = 1e30, hi = -1e30;
        for (int i = 0; i < 6; ++i) {
            const double v = 3.0 * rng.normal();
            pts.push_back({v});
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double sigma = dmatch::estimate_bandwidth(rows(pts));
        auto model = dmatch::build_kde(rows(pts), sigma);
        auto pdf = [&](double x) { return std::exp(model.log_density(rows({{x}})).item()); };
        const double mass = oracle::trapezoid(pdf, lo - 10 * sigma, hi + 10 * sigma, 4000);
        CHECK_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-3));
    }
}

TEST_CASE("2-d quadrature of the KDE integrates to 1 within 1e-3") {
    dmatch::RandomEngine rng(61);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 5; ++i) pts.push_back({rng.normal(), rng.normal()});
    const double sigma = dmatch::estimate_bandwidth(rows(pts));
    auto model = dmatch::build_kde(rows(pts), sigma);
    double lo = 1e30, hi = -1e30;
    for (const auto& p : pts) {
        for (double v : p) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    auto pdf = [&](double x, double y) { return std::exp(model.log_density(rows({{x, y}})).item()); };
    const double mass =
        oracle::trapezoid2d(pdf, lo - 8 * sigma, hi + 8 * sigma, lo - 8 * sigma, hi + 8 * sigma, 400);
    CHECK_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-3));
}

TEST_CASE("increasing sigma raises log-density at a far query") {
    auto pts = rows({{0}, {1}, {2}});
    double prev = -std::numeric_limits<double>::infinity();
    for (double s : {0.5, 1.0, 2.0, 4.0}) {
        auto model = dmatch::build_kde(pts, s);
        const double ld = model.log_density(rows({{50.0}})).item();
        CHECK(ld > prev);
        prev = ld;
    }
}

TEST_CASE("translation equivariance within 1e-10") {
    dmatch::RandomEngine rng(67);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::vector<double>> pts;
        for (int i = 0; i < 5; ++i) pts.push_back({rng.normal(), rng.normal()});
        std::vector<double> shift{10.0 * rng.normal(), 10.0 * rng.normal()};
        auto shifted = pts;
        for (auto& p : shifted) {
            p[0] += shift[0];
            p[1] += shift[1];
        }
        std::vector<double> q{rng.normal(), rng.normal()};
        std::vector<double> q2{q[0] + shift[0], q[1] + shift[1]};
        auto a = dmatch::build_kde(rows(pts), 0.8);
        auto b = dmatch::build_kde(rows(shifted), 0.8);
        CHECK_THAT(a.log_density(rows({q})).item(),
                   Catch::Matchers::WithinAbs(b.log_density(rows({q2})).item(), 1e-10));
    }
}

TEST_CASE("gradient of log_density w.r.t. queries and samples matches central differences") {
    dmatch::RandomEngine rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 1 + rng.uniform_int(8);
        std::vector<Tensor> leaves{oracle::rand_uniform({3, d}, rng, -2, 2),
                                   oracle::rand_uniform({4, d}, rng, -2, 2)};
        auto w = oracle::rand_uniform({3}, rng, -1, 1, false);
        auto f = [&](const std::vector<Tensor>& in) {
            auto model = dmatch::build_kde(in[1], 0.9);
            return dmatch::sum(dmatch::mul(model.log_density(in[0]), w));
        };
        CHECK(oracle::max_grad_rel_err(leaves, f) < 1e-4);
    }
}

TEST_CASE("query dimension mismatch is rejected") {
    auto model = dmatch::build_kde(rows({{0, 0}, {1, 1}}), 1.0);
    CHECK_THROWS_AS(model.log_density(rows({{0}})), dmatch::ShapeError);
}
