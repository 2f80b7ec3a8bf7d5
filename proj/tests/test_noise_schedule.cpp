#include "doctest.h"
#include "helpers.hpp"

#include "dblocks/noise_schedule.hpp"

#include <algorithm>
#include <numbers>

using namespace dblocks;
using testing::adaptive_simpson;

namespace {

double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

// Phi by quadrature of the density from 0.
double cdf_by_quadrature(double x) { return 0.5 + adaptive_simpson(phi, 0.0, x, 1e-14); }

// Truncated log-normal mass on [lo, hi] by quadrature over log sigma.
double mass_by_quadrature(const NoiseConfig& cfg, double lo, double hi) {
    const auto density = [&](double s) { return phi((s - cfg.p_mean) / cfg.p_std) / cfg.p_std; };
    const double total = adaptive_simpson(density, std::log(cfg.sigma_min), std::log(cfg.sigma_max), 1e-13);
    return adaptive_simpson(density, std::log(lo), std::log(hi), 1e-13) / total;
}

// sigma with quadrature mass `target` below it, by bisection.
double bisect_boundary(const NoiseConfig& cfg, double target) {
    double lo = cfg.sigma_min, hi = cfg.sigma_max;
    for (int i = 0; i < 200; ++i) {
        const double mid = std::sqrt(lo * hi);
        (mass_by_quadrature(cfg, cfg.sigma_min, mid) < target ? lo : hi) = mid;
    }
    return std::sqrt(lo * hi);
}

double bisect_quantile(double q) {
    double lo = -10.0, hi = 10.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (normal_cdf(mid) < q ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

NoiseConfig random_config(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    NoiseConfig cfg;
    cfg.p_mean = -2.0 + 3.0 * u(rng);
    cfg.p_std = 0.5 + 1.5 * u(rng);
    cfg.sigma_min = 0.001 + 0.01 * u(rng);
    cfg.sigma_max = 10.0 + 90.0 * u(rng);
    cfg.sigma_data = 0.25 + u(rng);
    return cfg;
}

}  // namespace

TEST_SUITE("noise_schedule") {

TEST_CASE("normal cdf examples") {
    CHECK(normal_cdf(0.0) == 0.5);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (int i = 0; i < 100; ++i) {
        const double x = u(rng);
        CHECK(std::abs(normal_cdf(x) + normal_cdf(-x) - 1.0) < 1e-15);
    }
    CHECK(std::abs(normal_cdf(1.959964) - 0.975) < 1e-7);
    CHECK(std::abs(cdf_by_quadrature(1.959964) - 0.975) < 1e-7);
    for (double x : {-3.0, -0.7, 0.2, 1.1, 2.5}) CHECK(std::abs(normal_cdf(x) - cdf_by_quadrature(x)) < 1e-12);
}

TEST_CASE("normal quantile examples") {
    CHECK(std::abs(normal_inv_cdf(0.5)) < 1e-15);
    CHECK(std::abs(normal_inv_cdf(1.0 / 3.0) - (-0.43073)) < 1e-4);
    CHECK(std::abs(normal_inv_cdf(1.0 / 3.0) - bisect_quantile(1.0 / 3.0)) < 1e-12);
    // Above zero the double q = Phi(x) itself is coarse; one ulp of q moves x by ulp / pdf.
    for (double x = -6.0; x <= 6.0; x += 0.01) {
        const double q = normal_cdf(x);
        const double conditioning = x > 0.0 ? (std::nextafter(q, 2.0) - q) / phi(x) : 0.0;
        CHECK(std::abs(normal_inv_cdf(q) - x) < 1e-9 + conditioning);
    }
    for (double q : {1e-12, 1e-6, 0.01, 0.3, 0.7, 0.99, 1 - 1e-9}) {
        CHECK(std::abs(normal_cdf(normal_inv_cdf(q)) - q) < 1e-10 * std::max(1.0, q));
    }
    CHECK_THROWS_AS(normal_inv_cdf(0.0), std::domain_error);
    CHECK_THROWS_AS(normal_inv_cdf(1.0), std::domain_error);
}

TEST_CASE("partition boundaries examples") {
    const NoiseConfig cfg;
    const Partition one = partition_boundaries(cfg, 1);
    CHECK(one.boundaries == std::vector<double>{cfg.sigma_max, cfg.sigma_min});

    const Partition three = partition_boundaries(cfg, 3);
    REQUIRE(three.boundaries.size() == 4);
    CHECK(three.boundaries[1] == doctest::Approx(0.5051).epsilon(2e-3));
    CHECK(three.boundaries[2] == doctest::Approx(0.1796).epsilon(6e-3));
    CHECK(std::abs(three.boundaries[1] - bisect_boundary(cfg, 2.0 / 3.0)) < 1e-3);
    CHECK(std::abs(three.boundaries[2] - bisect_boundary(cfg, 1.0 / 3.0)) < 1e-3);
    CHECK_THROWS(partition_boundaries(cfg, 0));
}

TEST_CASE("equi-probability holds for random configurations") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 4; ++trial) {
        const NoiseConfig cfg = trial == 0 ? NoiseConfig{} : random_config(rng);
        for (std::size_t B = 1; B <= 8; ++B) {
            const Partition p = partition_boundaries(cfg, B);
            CHECK(p.boundaries.front() == cfg.sigma_max);
            CHECK(p.boundaries.back() == cfg.sigma_min);
            for (std::size_t b = 1; b <= B; ++b) {
                const NoiseRange r = p.interval(b);
                CHECK(r.lo < r.hi);
                CHECK(std::abs(interval_mass(cfg, r.lo, r.hi) - 1.0 / static_cast<double>(B)) < 1e-10);
                CHECK(std::abs(mass_by_quadrature(cfg, r.lo, r.hi) - 1.0 / static_cast<double>(B)) < 1e-6);
            }
            // refinement: B' = 2B splits every coarse interval into two fine ones
            const Partition fine = partition_boundaries(cfg, 2 * B);
            for (std::size_t b = 0; b <= B; ++b) {
                CHECK(std::abs(fine.boundaries[2 * b] - p.boundaries[b]) < 1e-9 * p.boundaries[b]);
            }
        }
    }
}

TEST_CASE("interval mass examples") {
    const NoiseConfig cfg;
    CHECK(interval_mass(cfg, cfg.sigma_min, cfg.sigma_max) == 1.0);
    const double split = 0.3;
    CHECK(std::abs(interval_mass(cfg, cfg.sigma_min, split) + interval_mass(cfg, split, cfg.sigma_max) - 1.0) < 1e-15);
    CHECK(std::abs(interval_mass(cfg, 0.1796, 0.5051) - 1.0 / 3.0) < 1e-3);
    CHECK(std::abs(mass_by_quadrature(cfg, 0.1796, 0.5051) - interval_mass(cfg, 0.1796, 0.5051)) < 1e-9);
    CHECK_THROWS(interval_mass(cfg, 0.5, 0.1));
}

TEST_CASE("overlap expansion examples") {
    NoiseConfig cfg;
    Partition p;
    p.boundaries = {cfg.sigma_max, 1.0, 0.25, cfg.sigma_min};
    const Partition same = expand_overlap(p, 0.0, cfg);
    for (std::size_t b = 1; b <= 3; ++b) {
        CHECK(same.training_range(b).lo == same.interval(b).lo);
        CHECK(same.training_range(b).hi == same.interval(b).hi);
    }
    const Partition wide = expand_overlap(p, 0.05, cfg);
    const double a = std::pow(4.0, 0.05);
    CHECK(a == doctest::Approx(1.0718).epsilon(1e-4));
    CHECK(wide.training_range(2).lo == doctest::Approx(0.25 / a).epsilon(1e-12));
    CHECK(wide.training_range(2).lo == doctest::Approx(0.2333).epsilon(1e-3));
    CHECK(wide.training_range(2).hi == doctest::Approx(1.0718).epsilon(1e-4));
    CHECK(wide.training_range(1).hi == cfg.sigma_max);
    CHECK(wide.training_range(3).lo == cfg.sigma_min);
    for (std::size_t b = 1; b <= 3; ++b) {
        CHECK(wide.training_range(b).lo <= wide.interval(b).lo);
        CHECK(wide.training_range(b).hi >= wide.interval(b).hi);
    }
}

TEST_CASE("truncated sampling examples") {
    const NoiseConfig cfg;
    std::mt19937_64 rng(3);
    CHECK(sample_sigma(cfg, NoiseRange{0.7, 0.7}, rng) == 0.7);

    const Partition p = partition_boundaries(cfg, 3);
    const NoiseRange r = p.interval(2);
    const double mid = std::sqrt(r.lo * r.hi);
    const double expected_low = mass_by_quadrature(cfg, r.lo, mid) / mass_by_quadrature(cfg, r.lo, r.hi);
    const int n = 100000;
    std::vector<double> draws(n);
    int low = 0;
    for (auto& s : draws) {
        s = sample_sigma(cfg, r, rng);
        REQUIRE(r.contains(s));
        low += s < mid;
    }
    CHECK(std::abs(static_cast<double>(low) / n - expected_low) < 0.01);

    // Kolmogorov-Smirnov against the closed-form truncated CDF, alpha = 0.01.
    std::sort(draws.begin(), draws.end());
    const double flo = normal_cdf(cfg.standardize(r.lo)), fhi = normal_cdf(cfg.standardize(r.hi));
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
        const double f = (normal_cdf(cfg.standardize(draws[static_cast<std::size_t>(i)])) - flo) / (fhi - flo);
        d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(f - static_cast<double>(i + 1) / n)});
    }
    CHECK(d < 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("loss weight examples") {
    const NoiseConfig cfg;
    CHECK(loss_weight(cfg, 0.5) == doctest::Approx(8.0).epsilon(1e-15));
    CHECK(loss_weight(cfg, 1.0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(std::abs(loss_weight(cfg, 80.0) / 4.0 - 1.0) < 1e-3);
}

TEST_CASE("preconditioning examples and identities") {
    const NoiseConfig cfg;
    const auto c = precondition_coeffs(cfg, 0.5);
    CHECK(c.c_skip == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(c.c_in == doctest::Approx(1.41421356).epsilon(1e-8));
    CHECK(c.c_out == doctest::Approx(0.35355339).epsilon(1e-8));
    CHECK(precondition_coeffs(cfg, 1.0).c_noise == 0.0);
    for (double s : {0.002, 0.1, 0.5, 3.0, 80.0}) {
        const auto k = precondition_coeffs(cfg, s);
        const double total = s * s + cfg.sigma_data * cfg.sigma_data;
        CHECK(std::abs(k.c_in * k.c_in * total - 1.0) < 1e-12);
        CHECK(std::abs(k.c_skip * total - cfg.sigma_data * cfg.sigma_data) < 1e-12);
        CHECK(std::abs(k.c_out * k.c_out - s * s * cfg.sigma_data * cfg.sigma_data / total) < 1e-12);
    }
}

}  // TEST_SUITE
