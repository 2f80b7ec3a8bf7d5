#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

namespace dblocks {

// ---------------------------------------------------------------------------
// Standard normal CDF and quantile.

template <typename Scalar>
Scalar normal_cdf(Scalar x) {
    using std::erfc;
    return Scalar(0.5) * erfc(-x / std::sqrt(Scalar(2)));
}

// 1 - normal_cdf(x) without cancellation for large x.
template <typename Scalar>
Scalar normal_ccdf(Scalar x) {
    using std::erfc;
    return Scalar(0.5) * erfc(x / std::sqrt(Scalar(2)));
}

template <typename Scalar>
Scalar normal_pdf(Scalar x) {
    using std::exp;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return Scalar(inv_sqrt_2pi) * exp(Scalar(-0.5) * x * x);
}

/// Quantile of the standard normal. Acklam's rational approximation
/// (relative error ~1e-9) followed by one Newton step against normal_cdf.
/// Throws std::domain_error unless 0 < q < 1.
template <typename Scalar>
Scalar normal_inv_cdf(Scalar q) {
    using std::log;
    using std::sqrt;
    if (!(q > Scalar(0) && q < Scalar(1))) {
        throw std::domain_error("normal_inv_cdf requires 0 < q < 1");
    }
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double q_low = 0.02425;
    constexpr double q_high = 1.0 - q_low;

    Scalar x;
    if (q < Scalar(q_low)) {
        const Scalar t = sqrt(Scalar(-2) * log(q));
        x = (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
            ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + Scalar(1));
    } else if (q <= Scalar(q_high)) {
        const Scalar u = q - Scalar(0.5);
        const Scalar r = u * u;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + Scalar(1));
    } else {
        const Scalar t = sqrt(Scalar(-2) * log(Scalar(1) - q));
        x = -(((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
            ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + Scalar(1));
    }
    // Residual evaluated on the side of the distribution where it is accurate.
    const Scalar residual = x <= Scalar(0) ? normal_cdf(x) - q : (Scalar(1) - q) - normal_ccdf(x);
    return x - residual / normal_pdf(x);
}

// ---------------------------------------------------------------------------
// Log-normal noise law and block partitions.

struct NoiseConfig {
    double p_mean = -1.2;
    double p_std = 1.2;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double sigma_data = 0.5;

    // Throws std::invalid_argument when the configuration is unusable.
    void validate() const;

    // Standardized log-noise coordinate (ln(sigma) - p_mean) / p_std.
    double standardize(double sigma) const { return (std::log(sigma) - p_mean) / p_std; }
    double destandardize(double u) const { return std::exp(p_mean + p_std * u); }
    double quantile_min() const { return normal_cdf(standardize(sigma_min)); }
    double quantile_max() const { return normal_cdf(standardize(sigma_max)); }
};

struct NoiseRange {
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double sigma) const { return sigma >= lo && sigma <= hi; }
};

enum class PartitionStrategy { equi_probability, uniform_log };

/// Descending noise boundaries sigma_0 = sigma_max > ... > sigma_B = sigma_min.
/// Block b (1-based) owns [boundaries[b], boundaries[b-1]]; `expanded` holds the
/// overlapped training range of each block.
struct Partition {
    std::vector<double> boundaries;
    double gamma = 0.0;
    std::vector<NoiseRange> expanded;

    std::size_t blocks() const { return boundaries.empty() ? 0 : boundaries.size() - 1; }
    NoiseRange interval(std::size_t block) const;  // 1-based
    NoiseRange training_range(std::size_t block) const;
};

Partition partition_boundaries(const NoiseConfig& cfg, std::size_t blocks,
                               PartitionStrategy strategy = PartitionStrategy::equi_probability);

// Mass of the log-normal law truncated to [sigma_min, sigma_max] on [lo, hi].
double interval_mass(const NoiseConfig& cfg, double lo, double hi);

// Block b's training range becomes [sigma_b / a_b, a_b * sigma_{b-1}] with
// a_b = (sigma_{b-1} / sigma_b)^gamma, clamped to [sigma_min, sigma_max].
Partition expand_overlap(const Partition& partition, double gamma, const NoiseConfig& cfg);

// Inverse-CDF draw from the noise law restricted and renormalized to `range`.
double sample_sigma(const NoiseConfig& cfg, NoiseRange range, std::mt19937_64& rng);

// Equal-mass noise levels strictly inside-or-on a range: `count` levels starting at
// range.hi and stepping down in probability mass by 1/count of the range's mass.
std::vector<double> equal_mass_levels(const NoiseConfig& cfg, NoiseRange range, std::size_t count);

// ---------------------------------------------------------------------------
// EDM weighting and preconditioning.

template <typename Scalar>
Scalar loss_weight(Scalar sigma, Scalar sigma_data) {
    return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
}

template <typename Scalar>
struct Preconditioning {
    Scalar c_in;
    Scalar c_skip;
    Scalar c_out;
    Scalar c_noise;
};

template <typename Scalar>
Preconditioning<Scalar> precondition_coeffs(Scalar sigma, Scalar sigma_data) {
    using std::log;
    using std::sqrt;
    const Scalar total = sigma * sigma + sigma_data * sigma_data;
    const Scalar root = sqrt(total);
    return {Scalar(1) / root, sigma_data * sigma_data / total, sigma * sigma_data / root,
            log(sigma) / Scalar(4)};
}

inline double loss_weight(const NoiseConfig& cfg, double sigma) {
    if (!(sigma > 0.0)) throw std::domain_error("loss_weight requires sigma > 0");
    return loss_weight(sigma, cfg.sigma_data);
}

inline Preconditioning<double> precondition_coeffs(const NoiseConfig& cfg, double sigma) {
    if (!(sigma > 0.0)) throw std::domain_error("precondition_coeffs requires sigma > 0");
    return precondition_coeffs(sigma, cfg.sigma_data);
}

}  // namespace dblocks
