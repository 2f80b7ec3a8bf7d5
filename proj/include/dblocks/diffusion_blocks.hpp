#pragma once

#include "dblocks/nn.hpp"
#include "dblocks/noise_schedule.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dblocks {

/// Token geometry shared by every block of a converted network. Each sample is
/// one sequence of `x_tokens` conditioning tokens followed by `z_tokens` noisy
/// target tokens.
struct TokenShape {
    Index width = 32;
    Index x_tokens = 0;
    Index x_dim = 0;
    Index z_tokens = 1;
    Index z_dim = 2;
    // Optional (x_tokens + z_tokens) square mask; full attention when empty.
    std::shared_ptr<const AttentionMask> mask;

    Index seq_len() const { return x_tokens + z_tokens; }
};

/// The trainable map f(c_in z, x | c_noise): per-token input projections,
/// learned positions, a stack of residual layers, an AdaLN-modulated final norm
/// and a zero-initialized output projection. Only the z tokens are read out.
class DenoiserNet {
public:
    DenoiserNet() = default;
    DenoiserNet(const std::string& prefix, const std::vector<LayerSpec>& layers, const TokenShape& shape,
                std::mt19937_64& rng);

    // x: (groups * x_tokens) x x_dim; z: (groups * z_tokens) x z_dim; c_noise: groups x 1.
    // `loops` > 1 runs the layer stack that many times in depth (weight-tied).
    Tensor forward(const Matrix& x, const Tensor& z, const Matrix& c_noise, Counters* counters,
                   std::size_t loops = 1) const;

    const ParameterList& parameters() const { return params_; }
    const TokenShape& shape() const { return shape_; }
    std::size_t layer_count() const { return layers_.size(); }
    const std::vector<LayerSpec>& layer_specs() const { return specs_; }
    // Forces the network output to zero.
    void zero_output();

private:
    TokenShape shape_;
    std::vector<LayerSpec> specs_;
    ParameterList params_;
    NoiseEmbedding embedding_;
    Linear x_in_, z_in_;
    Tensor x_pos_, z_pos_;
    std::vector<ResidualLayer> layers_;
    Linear final_scale_, final_shift_, out_;
};

/// EDM-preconditioned denoiser: c_skip * z + c_out * f(c_in * z, x | c_noise),
/// with one noise level per sequence.
Tensor precondition_denoise(const DenoiserNet& net, const NoiseConfig& cfg, const Matrix& x,
                            const Matrix& z, const ColVector& sigma, Counters* counters = nullptr,
                            std::size_t loops = 1);
// Differentiable in z as well.
Tensor precondition_denoise(const DenoiserNet& net, const NoiseConfig& cfg, const Matrix& x,
                            const Tensor& z, const ColVector& sigma, Counters* counters = nullptr,
                            std::size_t loops = 1);

struct DenoiseInput {
    Matrix x;          // conditioning tokens
    Matrix z;          // noisy target tokens y + sigma * eps
    ColVector sigma;   // one noise level per sequence
};

/// One independently trainable block: a contiguous group of layers conditioned
/// on noise, owning the unexpanded range [sigma_b, sigma_{b-1}] and its
/// overlapped training range.
class BlockDenoiser {
public:
    BlockDenoiser() = default;
    BlockDenoiser(std::size_t index, NoiseRange range, NoiseRange training_range, DenoiserNet net);

    Tensor denoise(const DenoiseInput& input, const NoiseConfig& cfg, Counters* counters = nullptr) const;

    std::size_t index() const { return index_; }
    NoiseRange range() const { return range_; }
    NoiseRange training_range() const { return training_range_; }
    const DenoiserNet& net() const { return net_; }
    DenoiserNet& net() { return net_; }
    const ParameterList& parameters() const { return net_.parameters(); }
    std::string prefix() const { return "block" + std::to_string(index_) + "."; }

private:
    std::size_t index_ = 0;
    NoiseRange range_;
    NoiseRange training_range_;
    DenoiserNet net_;
};

struct BlockPlan {
    std::size_t total_layers = 0;
    std::vector<std::size_t> block_sizes;
    Partition partition;

    std::size_t blocks() const { return block_sizes.size(); }
    std::string layer_distribution() const;  // e.g. "[4,4,4]"
};

struct ConvertedModel {
    BlockPlan plan;
    std::vector<BlockDenoiser> blocks;

    ParameterList parameters() const;
    const BlockDenoiser& block(std::size_t index) const { return blocks.at(index - 1); }
    BlockDenoiser& block(std::size_t index) { return blocks.at(index - 1); }
};

struct ConvertOptions {
    std::size_t blocks = 1;
    double gamma = 0.0;
    // Explicit layer counts per block; empty means as even as possible.
    std::vector<std::size_t> distribution;
    PartitionStrategy strategy = PartitionStrategy::equi_probability;
    std::uint64_t seed = 0;
};

/// Splits L layer specs into B contiguous noise-conditioned blocks, block 1
/// taking the highest-noise interval. Throws std::invalid_argument if B > L or
/// the distribution does not sum to L.
ConvertedModel convert(std::vector<LayerSpec> layers, const TokenShape& shape, const NoiseConfig& cfg,
                       const ConvertOptions& options);

// Wraps one network as a B = 1 model over [sigma_min, sigma_max]; shares its parameters.
ConvertedModel single_block_model(const DenoiserNet& net, const NoiseConfig& cfg);

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { squared_error, cross_entropy };

/// Discrete targets live in a frozen, L2-normalized embedding space; the head
/// scores a denoised token against every embedding: logits = scale * y_hat E^T.
struct TiedHead {
    Matrix embeddings;  // classes x dim, unit rows
    double logit_scale = 10.0;

    Tensor logits(const Tensor& y_hat) const;
    std::vector<int> predict(const Matrix& y_hat) const;
};

struct DenoisingBatch {
    Index groups = 0;
    Matrix x;                 // (groups * x_tokens) x x_dim
    Matrix y;                 // (groups * z_tokens) x z_dim, clean targets
    std::vector<int> labels;  // per target token, cross-entropy only
};

struct LossObjective {
    LossKind kind = LossKind::squared_error;
    const TiedHead* head = nullptr;
    bool weighted = true;  // multiply by w(sigma)
};

struct LossResult {
    Tensor loss;            // mean over sequences of w(sigma) * Loss
    double raw_loss = 0.0;  // same without w(sigma)
    double mean_sigma = 0.0;
};

/// Draws one sigma per sequence from the noise law restricted to `range`,
/// then the Gaussian noise, in that order.
struct NoiseDraw {
    ColVector sigma;
    Matrix eps;
};
NoiseDraw draw_noise(const NoiseConfig& cfg, NoiseRange range, Index groups, Index rows_per_group,
                     Index dim, std::mt19937_64& rng);

// Per-sequence loss of a prediction against a batch (groups x 1).
Tensor sequence_losses(const Tensor& y_hat, const DenoisingBatch& batch, const LossObjective& objective,
                       Index z_tokens);

LossResult denoising_loss(const DenoiserNet& net, const DenoisingBatch& batch, const NoiseConfig& cfg,
                          const NoiseDraw& noise, const LossObjective& objective, Counters* counters,
                          std::size_t loops = 1);

/// Per-block objective: sigma drawn from the block's (expanded) training range.
LossResult block_loss(const BlockDenoiser& block, const DenoisingBatch& batch, const NoiseConfig& cfg,
                      const LossObjective& objective, std::mt19937_64& rng, Counters* counters = nullptr);

/// Global denoising objective over [sigma_min, sigma_max] for a single network.
LossResult global_denoising_loss(const DenoiserNet& net, const DenoisingBatch& batch, const NoiseConfig& cfg,
                                 const LossObjective& objective, std::mt19937_64& rng,
                                 Counters* counters = nullptr);

// ---------------------------------------------------------------------------
// Sampling

enum class EulerForm {
    contraction,  // z + (dsigma / sigma_prev) (y_hat - z)
    printed,      // z + (dsigma / sigma_prev) (z - y_hat); moves away from the data, debug only
};

Matrix euler_step(const Matrix& z, const Matrix& y_hat, double sigma_prev, double sigma_next,
                  EulerForm form = EulerForm::contraction);

/// Block owning sigma under the unexpanded partition. Intervals are
/// (sigma_b, sigma_{b-1}], so a sigma on an interior boundary goes to the
/// lower-noise block; sigma_min maps to block B. Throws std::out_of_range
/// outside [sigma_min, sigma_max].
std::size_t select_block(const Partition& partition, double sigma);

Matrix score_estimate(const Matrix& y_hat, const Matrix& z, double sigma);

/// T + 1 descending noise levels from sigma_max to sigma_min. Each block is
/// used floor(T/B) or ceil(T/B) times (earlier blocks take the remainder), with
/// its levels placed at equal probability mass inside its interval.
struct InferenceSchedule {
    std::vector<double> levels;
    std::vector<std::size_t> block_of_step;
};
InferenceSchedule inference_schedule(const Partition& partition, const NoiseConfig& cfg, std::size_t steps);

struct SampleTraceRow {
    std::size_t step = 0;
    double sigma = 0.0;
    double sigma_next = 0.0;
    std::size_t block = 0;
    std::uint64_t layer_evals = 0;
};

// (block index, conditioning, current z, sigma) -> y_hat
using DenoiseFn = std::function<Matrix(std::size_t, const Matrix&, const Matrix&, double)>;

Matrix euler_sample(const DenoiseFn& denoiser, const Partition& partition, const NoiseConfig& cfg,
                    const Matrix& x, Matrix z0, std::size_t steps,
                    std::vector<SampleTraceRow>* trace = nullptr, EulerForm form = EulerForm::contraction);

/// Starts from z0 ~ N(0, sigma_max^2 I) with `groups` sequences and runs the
/// block-wise Euler sampler. Layer evaluations per step are measured. `loops`
/// is passed to every denoiser call (weight-tied depth).
Matrix sample(const ConvertedModel& model, const Matrix& x, Index groups, std::size_t steps,
              const NoiseConfig& cfg, std::mt19937_64& rng, std::vector<SampleTraceRow>* trace = nullptr,
              std::size_t loops = 1);

Matrix sample_from(const ConvertedModel& model, const Matrix& x, Matrix z0, std::size_t steps,
                   const NoiseConfig& cfg, std::vector<SampleTraceRow>* trace = nullptr, std::size_t loops = 1);

}  // namespace dblocks
