#include "dblocks/noise_schedule.hpp"

#include <algorithm>
#include <string>

namespace dblocks {

void NoiseConfig::validate() const {
    if (!(p_std > 0.0)) throw std::invalid_argument("p_std must be positive");
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) {
        throw std::invalid_argument("noise range requires 0 < sigma_min < sigma_max");
    }
    if (!(sigma_data > 0.0)) throw std::invalid_argument("sigma_data must be positive");
    if (!std::isfinite(p_mean) || !std::isfinite(sigma_max)) {
        throw std::invalid_argument("noise configuration must be finite");
    }
}

NoiseRange Partition::interval(std::size_t block) const {
    if (block < 1 || block > blocks()) throw std::out_of_range("block index out of range");
    return {boundaries[block], boundaries[block - 1]};
}

NoiseRange Partition::training_range(std::size_t block) const {
    if (block < 1 || block > blocks()) throw std::out_of_range("block index out of range");
    return expanded.empty() ? interval(block) : expanded[block - 1];
}

Partition partition_boundaries(const NoiseConfig& cfg, std::size_t blocks, PartitionStrategy strategy) {
    cfg.validate();
    if (blocks == 0) throw std::invalid_argument("partition requires at least one block");
    Partition p;
    p.boundaries.resize(blocks + 1);
    const double n = static_cast<double>(blocks);
    if (strategy == PartitionStrategy::equi_probability) {
        const double q_min = cfg.quantile_min();
        const double q_max = cfg.quantile_max();
        for (std::size_t b = 1; b < blocks; ++b) {
            const double q = q_max - (static_cast<double>(b) / n) * (q_max - q_min);
            p.boundaries[b] = cfg.destandardize(normal_inv_cdf(q));
        }
    } else {
        const double log_hi = std::log(cfg.sigma_max);
        const double log_lo = std::log(cfg.sigma_min);
        for (std::size_t b = 1; b < blocks; ++b) {
            p.boundaries[b] = std::exp(log_hi - (static_cast<double>(b) / n) * (log_hi - log_lo));
        }
    }
    p.boundaries.front() = cfg.sigma_max;
    p.boundaries.back() = cfg.sigma_min;
    for (std::size_t b = 1; b <= blocks; ++b) p.expanded.push_back(p.interval(b));
    return p;
}

double interval_mass(const NoiseConfig& cfg, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("interval_mass: inverted bounds");
    if (lo < cfg.sigma_min || hi > cfg.sigma_max) {
        throw std::invalid_argument("interval_mass: bounds outside [sigma_min, sigma_max]");
    }
    const double q_min = cfg.quantile_min();
    const double q_max = cfg.quantile_max();
    const double q_lo = lo == cfg.sigma_min ? q_min : normal_cdf(cfg.standardize(lo));
    const double q_hi = hi == cfg.sigma_max ? q_max : normal_cdf(cfg.standardize(hi));
    return (q_hi - q_lo) / (q_max - q_min);
}

Partition expand_overlap(const Partition& partition, double gamma, const NoiseConfig& cfg) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("overlap gamma must be non-negative");
    Partition out = partition;
    out.gamma = gamma;
    out.expanded.clear();
    for (std::size_t b = 1; b <= partition.blocks(); ++b) {
        const NoiseRange r = partition.interval(b);
        if (gamma == 0.0) {
            out.expanded.push_back(r);
            continue;
        }
        const double alpha = std::pow(r.hi / r.lo, gamma);
        out.expanded.push_back({std::max(cfg.sigma_min, r.lo / alpha), std::min(cfg.sigma_max, alpha * r.hi)});
    }
    return out;
}

double sample_sigma(const NoiseConfig& cfg, NoiseRange range, std::mt19937_64& rng) {
    if (!(range.lo > 0.0) || range.lo > range.hi) {
        throw std::invalid_argument("sample_sigma: degenerate noise range");
    }
    if (range.lo == range.hi) return range.lo;
    const double q_lo = normal_cdf(cfg.standardize(range.lo));
    const double q_hi = normal_cdf(cfg.standardize(range.hi));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = q_lo + unit(rng) * (q_hi - q_lo);
    if (!(u > 0.0 && u < 1.0)) return u <= 0.0 ? range.lo : range.hi;
    return std::clamp(cfg.destandardize(normal_inv_cdf(u)), range.lo, range.hi);
}

std::vector<double> equal_mass_levels(const NoiseConfig& cfg, NoiseRange range, std::size_t count) {
    std::vector<double> levels;
    if (count == 0) return levels;
    levels.push_back(range.hi);
    const double q_lo = normal_cdf(cfg.standardize(range.lo));
    const double q_hi = normal_cdf(cfg.standardize(range.hi));
    for (std::size_t j = 1; j < count; ++j) {
        const double q = q_hi - (static_cast<double>(j) / static_cast<double>(count)) * (q_hi - q_lo);
        levels.push_back(std::clamp(cfg.destandardize(normal_inv_cdf(q)), range.lo, range.hi));
    }
    return levels;
}

}  // namespace dblocks
