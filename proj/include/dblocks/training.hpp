#pragma once

#include "dblocks/diffusion_blocks.hpp"
#include "dblocks/masked_blocks.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace dblocks {

enum class LrSchedule { constant, cosine };
enum class BlockSampling { uniform, round_robin, forced };

struct TrainConfig {
    std::size_t steps = 1000;  // optimizer updates over the whole run
    Index batch_size = 64;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    std::size_t warmup_steps = 0;
    LrSchedule schedule = LrSchedule::constant;
    std::uint64_t seed = 0;
    BlockSampling block_sampling = BlockSampling::uniform;
    std::size_t forced_block = 1;
    LossKind loss = LossKind::squared_error;
    bool weighted_loss = true;
    // One worker per block, each with its own RNG streams; see train_units.
    bool parallel = false;
    std::size_t threads = 1;

    void validate() const;
};

// Seeds derived from (seed, stream, block); block 0 means "shared".
enum class Stream : std::uint64_t { block_choice = 1, data = 2, noise = 3 };
std::mt19937_64 make_stream(std::uint64_t seed, Stream stream, std::uint64_t block = 0);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamWState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t step = 0;
};

AdamWState adamw_init(const ParameterList& params);

/// One AdamW update with decoupled weight decay, reading the gradients stored
/// on the parameter tensors (a missing gradient counts as zero). Throws
/// std::invalid_argument when the state does not match the parameters.
void adamw_step(const ParameterList& params, AdamWState& state, double lr, const AdamWConfig& cfg);

// Linear warmup over warmup_steps, then constant or cosine decay to zero at `total`.
double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total);

struct TrainRow {
    std::size_t iteration = 0;
    std::size_t block = 0;
    double sigma = 0.0;  // mean noise level (masked runs: mean time)
    double raw_loss = 0.0;
    double weighted_loss = 0.0;
};

struct TrainRecord {
    std::vector<TrainRow> rows;
    Counters counters;
    std::vector<std::size_t> iterations_per_block;
    std::vector<std::uint64_t> peak_per_block;

    // Mean weighted loss over the last `window` rows of a block (1-based).
    double final_loss(std::size_t block, std::size_t window = 50) const;
    void write_csv(const std::filesystem::path& path) const;
};

/// A trainable group: its parameters and a closure producing one minibatch
/// loss. Every call must build a fresh graph.
struct StepLoss {
    Tensor loss;
    double raw_loss = 0.0;
    double sigma = 0.0;
};
using LossFn = std::function<StepLoss(std::mt19937_64& data_rng, std::mt19937_64& noise_rng, Counters* counters)>;

struct TrainUnit {
    ParameterList params;
    LossFn loss;
};

/// Shared engine. Each iteration picks one unit, evaluates its loss, runs
/// backward and updates only that unit's parameters with its own AdamW
/// state. Sequential mode draws data and noise from shared streams; parallel
/// mode runs each unit on its own thread for its share of `steps`, with streams
/// derived from (seed, unit). Throws NumericError on a non-finite loss.
TrainRecord train_units(std::vector<TrainUnit>& units, const TrainConfig& cfg);

// Yields `batch_size` clean (x, y[, labels]) examples.
using BatchSource = std::function<DenoisingBatch(Index batch_size, std::mt19937_64& rng)>;

TrainRecord train_blockwise(ConvertedModel& model, const BatchSource& data, const NoiseConfig& noise,
                            const LossObjective& objective, const TrainConfig& cfg);

/// Global denoising objective over [sigma_min, sigma_max] on one network.
TrainRecord train_end_to_end(DenoiserNet& net, const BatchSource& data, const NoiseConfig& noise,
                             const LossObjective& objective, const TrainConfig& cfg);

/// Recurrent-depth mode: a single shared block trained with one forward pass
/// per iteration at a random sigma; at inference it is iterated K times.
TrainRecord train_recurrent_single_pass(DenoiserNet& shared, const BatchSource& data, const NoiseConfig& noise,
                                        const LossObjective& objective, const TrainConfig& cfg);

/// BPTT baseline for the recurrent mode: a looped denoiser that runs the
/// shared block K times in depth per call, trained on the global denoising
/// objective with gradients through all K passes. Sampled with the same
/// K-step Euler sampler, each step costing K passes.
LossResult unrolled_loss(const DenoiserNet& shared, const DenoisingBatch& batch, const NoiseConfig& noise,
                         std::size_t iterations, std::mt19937_64& rng, Counters* counters = nullptr);
TrainRecord train_unrolled(DenoiserNet& shared, const BatchSource& data, const NoiseConfig& noise,
                           std::size_t iterations, const TrainConfig& cfg);

/// Standard classifier: [CLS, feature tokens] through unconditioned layers,
/// linear head on CLS.
class ClassifierNet {
public:
    ClassifierNet() = default;
    ClassifierNet(const std::string& prefix, const std::vector<LayerSpec>& layers, Index x_tokens, Index x_dim,
                  int classes, std::mt19937_64& rng);

    Tensor logits(const Matrix& x, Index groups, Counters* counters = nullptr) const;
    std::vector<int> predict(const Matrix& x, Index groups) const;
    const ParameterList& parameters() const { return params_; }
    std::size_t layer_count() const { return layers_.size(); }

private:
    Index x_tokens_ = 0, x_dim_ = 0;
    ParameterList params_;
    Tensor cls_, pos_;
    Linear x_in_, head_;
    Tensor norm_gain_, norm_bias_;
    std::vector<ResidualLayer> layers_;
};

TrainRecord train_classifier(ClassifierNet& net, const BatchSource& data, const TrainConfig& cfg);

// Yields `batch_size` token sequences, row-major.
using SequenceSource = std::function<std::vector<int>(Index batch_size, std::mt19937_64& rng)>;

/// Block b trains on its time interval (t_{b-1}, t_b].
TrainRecord train_masked_blockwise(std::vector<MaskedDenoiser>& blocks, const std::vector<double>& boundaries,
                                   const SequenceSource& data, Index length, const MaskSchedule& schedule,
                                   const TrainConfig& cfg);
TrainRecord train_masked_end_to_end(MaskedDenoiser& model, const SequenceSource& data, Index length,
                                    const MaskSchedule& schedule, const TrainConfig& cfg);

/// 2n x 2n mask over [clean 1..n, noisy 1..n]: clean attends causally to clean;
/// noisy i attends to clean j < i and to itself only.
AttentionMask build_ar_mask(Index n);

struct MemoryModel {
    double P = 1.0;  // per-layer parameter size
    double A = 1.0;  // per-layer activation size
    std::size_t L = 1;
    std::size_t B = 1;
    double optimizer_multiplier = 4.0;

    void validate() const;
};

enum class MemoryMode { standard, checkpointing, diffblocks, diffblocks_checkpointing };
const char* to_string(MemoryMode mode);

// Throws std::invalid_argument for non-positive sizes or B > L.
double memory_model_eval(const MemoryModel& m, MemoryMode mode);

}  // namespace dblocks
