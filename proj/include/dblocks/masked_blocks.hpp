#pragma once

#include "dblocks/nn.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace dblocks {

/// Masking schedule alpha(t): probability that a token is still unmasked at
/// time t, decreasing from alpha(0) = 1 to alpha(1) = 0.
struct MaskSchedule {
    std::string kind;
    std::function<double(double)> alpha;
    std::function<double(double)> alpha_prime;
    // t such that 1 - alpha(t) == fraction; defaults to bisection on alpha.
    std::function<double(double)> time_at_masked_fraction;

    static MaskSchedule linear();

    // -alpha'(t) / (1 - alpha(t))
    double weight(double t) const { return -alpha_prime(t) / (1.0 - alpha(t)); }
    double masked_fraction_time(double fraction) const;
};

/// t_0 = 0 < t_1 < ... < t_B = 1 with equal alpha decrements 1/B per interval.
std::vector<double> time_boundaries(const MaskSchedule& schedule, std::size_t blocks);

// Block b (1-based) owns (t_{b-1}, t_b]; t == 0 belongs to block 1.
std::size_t select_time_block(const std::vector<double>& boundaries, double t);

/// `sequences` token sequences of `length` ids stored row-major.
struct MaskedBatch {
    Index sequences = 0;
    Index length = 0;
    std::vector<int> x0;
    std::vector<int> xt;
    std::vector<double> t;     // per sequence
    std::vector<char> masked;  // per position
    std::vector<Index> masked_rows() const;
};

MaskedBatch mask_forward(const std::vector<int>& x0, Index length, const std::vector<double>& t, int mask_id,
                         const MaskSchedule& schedule, std::mt19937_64& rng);

// Masks exactly round(length * (1 - alpha(t))) positions of every sequence.
MaskedBatch mask_exact_count(const std::vector<int>& x0, Index length, double t, int mask_id,
                             const MaskSchedule& schedule, std::mt19937_64& rng);

/// (xt, length, per-sequence t, rows to score) -> logits, one row per requested row.
using MaskedPredictor =
    std::function<Tensor(const std::vector<int>&, Index, const std::vector<double>&, const std::vector<Index>&)>;

/// Token denoiser for one block: embeddings over vocab + MASK, learned
/// positions, time-conditioned residual layers and a zero-initialized head.
class MaskedDenoiser {
public:
    MaskedDenoiser() = default;
    MaskedDenoiser(const std::string& prefix, const std::vector<LayerSpec>& layers, int vocab, Index length,
                   std::mt19937_64& rng);

    Tensor logits(const std::vector<int>& xt, Index length, const std::vector<double>& t,
                  const std::vector<Index>& rows, Counters* counters = nullptr) const;
    MaskedPredictor predictor(Counters* counters = nullptr) const;

    const ParameterList& parameters() const { return params_; }
    int vocab() const { return vocab_; }
    int mask_id() const { return vocab_; }
    std::size_t layer_count() const { return layers_.size(); }

private:
    int vocab_ = 0;
    Index length_ = 0;
    ParameterList params_;
    Tensor token_embed_, pos_embed_;
    NoiseEmbedding time_embed_;
    std::vector<ResidualLayer> layers_;
    Linear final_scale_, final_shift_, head_;
};

struct QuadratureNodes {
    std::vector<double> t;
    std::vector<double> weight;
};

// Midpoints of `count` equal sub-intervals of [a, b], each weighted by its width.
QuadratureNodes midpoint_nodes(double a, double b, std::size_t count);

/// Deterministic-quadrature estimate of
///   integral_{t in nodes} -alpha'(t)/(1-alpha(t)) E[sum_masked CE] dt,
/// averaged over sequences. masks[j] is the masked batch used at node j.
Tensor block_loss_masked(const MaskedPredictor& model, const QuadratureNodes& nodes,
                         const std::vector<MaskedBatch>& masks, const MaskSchedule& schedule);

/// Global loss with each node routed to the block owning its time.
Tensor global_loss_masked(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                          const QuadratureNodes& nodes, const std::vector<MaskedBatch>& masks,
                          const MaskSchedule& schedule);

/// Monte Carlo training loss for the interval [t_lo, t_hi]: stratified t per
/// sequence, Bernoulli masks, scaled by the interval width.
struct MaskedLossResult {
    Tensor loss;
    double mean_t = 0.0;
};
MaskedLossResult masked_mc_loss(const MaskedDenoiser& model, const std::vector<int>& x0, Index length, double t_lo,
                                double t_hi, const MaskSchedule& schedule, std::mt19937_64& rng,
                                Counters* counters = nullptr);

enum class CommitRule { argmax, sample };

struct DemaskStep {
    double t = 0.0;
    double t_next = 0.0;
    std::size_t block = 0;
    Index unmasked = 0;  // per sequence after the step
};

/// Starts from all-MASK at t = 1 and walks down to t = 0, committing the most
/// confident masked positions so that round(length * alpha(t)) tokens are
/// unmasked after each step. Committed tokens are never re-masked.
std::vector<int> demask_sample(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                               Index sequences, Index length, int mask_id, std::size_t steps,
                               const MaskSchedule& schedule, std::mt19937_64& rng,
                               CommitRule rule = CommitRule::argmax, std::vector<DemaskStep>* trace = nullptr);

}  // namespace dblocks
