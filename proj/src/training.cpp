#include "dblocks/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <thread>

namespace dblocks {

void TrainConfig::validate() const {
    if (steps == 0) throw std::invalid_argument("steps must be positive");
    if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be positive");
    }
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
    if (block_sampling == BlockSampling::forced && forced_block == 0) {
        throw std::invalid_argument("forced_block is 1-based");
    }
    if (threads == 0) throw std::invalid_argument("threads must be positive");
}

std::mt19937_64 make_stream(std::uint64_t seed, Stream stream, std::uint64_t block) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(block)};
    return std::mt19937_64(seq);
}

AdamWState adamw_init(const ParameterList& params) {
    AdamWState s;
    for (const auto& p : params) {
        s.m.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
        s.v.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
    return s;
}

void adamw_step(const ParameterList& params, AdamWState& state, double lr, const AdamWConfig& cfg) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("optimizer state does not match the parameters");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].tensor;
        Matrix& value = p.mutable_value();
        if (state.m[i].rows() != value.rows() || state.m[i].cols() != value.cols()) {
            throw std::invalid_argument("optimizer state shape differs from parameter " + params[i].name);
        }
        if (p.has_grad()) {
            const Matrix& g = p.grad();
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + ((1.0 - cfg.beta2) * g.array().square()).matrix();
        } else {
            state.m[i] *= cfg.beta1;
            state.v[i] *= cfg.beta2;
        }
        if (cfg.weight_decay != 0.0) value *= (1.0 - lr * cfg.weight_decay);
        value.array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.eps);
    }
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.schedule == LrSchedule::constant) return cfg.learning_rate;
    const double span = static_cast<double>(std::max<std::size_t>(1, total > cfg.warmup_steps ? total - cfg.warmup_steps : 1));
    const double progress = std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double TrainRecord::final_loss(std::size_t block, std::size_t window) const {
    double total = 0.0;
    std::size_t n = 0;
    for (auto it = rows.rbegin(); it != rows.rend() && n < window; ++it) {
        if (it->block != block) continue;
        total += it->weighted_loss;
        ++n;
    }
    return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

void TrainRecord::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "iteration,block,sigma,raw_loss,weighted_loss\n" << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.iteration << ',' << r.block << ',' << r.sigma << ',' << r.raw_loss << ',' << r.weighted_loss << '\n';
    }
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t gradient_bytes(const ParameterList& params) {
    return static_cast<std::uint64_t>(parameter_count(params) * sizeof(double));
}

struct UnitState {
    AdamWState optimizer;
    std::size_t horizon = 1;
};

// One update of unit `b`; returns the recorded row.
TrainRow run_iteration(TrainUnit& unit, UnitState& state, std::size_t b, std::size_t iteration,
                       const TrainConfig& cfg, std::mt19937_64& data_rng, std::mt19937_64& noise_rng,
                       Counters& counters, std::uint64_t& peak) {
    counters.begin_iteration();
    StepLoss step = unit.loss(data_rng, noise_rng, &counters);
    const double value = step.loss.item();
    if (!std::isfinite(value) || !std::isfinite(step.raw_loss)) {
        throw NumericError("loss diverged at iteration " + std::to_string(iteration) + " (block " +
                           std::to_string(b + 1) + "): " + std::to_string(value));
    }
    zero_grads(unit.params);
    backward(step.loss);
    counters.end_iteration(gradient_bytes(unit.params));
    peak = std::max(peak, counters.stored_this_iteration);
    AdamWConfig opt;
    opt.weight_decay = cfg.weight_decay;
    adamw_step(unit.params, state.optimizer, learning_rate_at(cfg, state.optimizer.step, state.horizon), opt);
    return {iteration, b + 1, step.sigma, step.raw_loss, value};
}

}  // namespace

TrainRecord train_units(std::vector<TrainUnit>& units, const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t B = units.size();
    if (B == 0) throw std::invalid_argument("nothing to train");
    if (cfg.block_sampling == BlockSampling::forced && cfg.forced_block > B) {
        throw std::invalid_argument("forced_block exceeds the block count");
    }
    for (const auto& u : units) require_unique_names(u.params);

    TrainRecord record;
    record.iterations_per_block.assign(B, 0);
    record.peak_per_block.assign(B, 0);
    std::vector<UnitState> states(B);
    for (std::size_t b = 0; b < B; ++b) {
        states[b].optimizer = adamw_init(units[b].params);
        states[b].horizon = cfg.block_sampling == BlockSampling::forced ? cfg.steps : (cfg.steps + B - 1) / B;
    }

    if (!cfg.parallel || B == 1) {
        auto block_rng = make_stream(cfg.seed, Stream::block_choice);
        auto data_rng = make_stream(cfg.seed, Stream::data);
        auto noise_rng = make_stream(cfg.seed, Stream::noise);
        std::uniform_int_distribution<std::size_t> pick(0, B - 1);
        for (std::size_t it = 0; it < cfg.steps; ++it) {
            std::size_t b = 0;
            switch (cfg.block_sampling) {
                case BlockSampling::uniform: b = pick(block_rng); break;
                case BlockSampling::round_robin: b = it % B; break;
                case BlockSampling::forced: b = cfg.forced_block - 1; break;
            }
            record.rows.push_back(run_iteration(units[b], states[b], b, it, cfg, data_rng, noise_rng,
                                                record.counters, record.peak_per_block[b]));
            ++record.iterations_per_block[b];
        }
        return record;
    }

    // Parallel: unit b runs its share of the steps on its own streams.
    std::vector<Counters> counters(B);
    std::vector<std::vector<TrainRow>> rows(B);
    std::vector<std::exception_ptr> errors(B);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t b = next++; b < B; b = next++) {
            try {
                auto data_rng = make_stream(cfg.seed, Stream::data, b + 1);
                auto noise_rng = make_stream(cfg.seed, Stream::noise, b + 1);
                const std::size_t share = cfg.steps / B + (b < cfg.steps % B ? 1 : 0);
                states[b].horizon = share;
                for (std::size_t it = 0; it < share; ++it) {
                    rows[b].push_back(run_iteration(units[b], states[b], b, it, cfg, data_rng, noise_rng, counters[b],
                                                    record.peak_per_block[b]));
                }
            } catch (...) {
                errors[b] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::min(cfg.threads, B);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    for (std::size_t b = 0; b < B; ++b) {
        record.counters += counters[b];
        record.iterations_per_block[b] = rows[b].size();
        record.rows.insert(record.rows.end(), rows[b].begin(), rows[b].end());
    }
    std::stable_sort(record.rows.begin(), record.rows.end(), [](const TrainRow& a, const TrainRow& b) {
        return a.iteration != b.iteration ? a.iteration < b.iteration : a.block < b.block;
    });
    return record;
}

// ---------------------------------------------------------------------------

TrainRecord train_blockwise(ConvertedModel& model, const BatchSource& data, const NoiseConfig& noise,
                            const LossObjective& objective, const TrainConfig& cfg) {
    std::vector<TrainUnit> units;
    for (auto& block : model.blocks) {
        const BlockDenoiser* bp = &block;
        units.push_back({block.parameters(), [bp, &data, noise, objective, &cfg](std::mt19937_64& data_rng,
                                                                                 std::mt19937_64& noise_rng,
                                                                                 Counters* counters) {
                             DenoisingBatch batch = data(cfg.batch_size, data_rng);
                             LossResult r = block_loss(*bp, batch, noise, objective, noise_rng, counters);
                             return StepLoss{r.loss, r.raw_loss, r.mean_sigma};
                         }});
    }
    return train_units(units, cfg);
}

TrainRecord train_end_to_end(DenoiserNet& net, const BatchSource& data, const NoiseConfig& noise,
                             const LossObjective& objective, const TrainConfig& cfg) {
    const DenoiserNet* np = &net;
    std::vector<TrainUnit> units{{net.parameters(), [np, &data, noise, objective, &cfg](std::mt19937_64& data_rng,
                                                                                        std::mt19937_64& noise_rng,
                                                                                        Counters* counters) {
                                      DenoisingBatch batch = data(cfg.batch_size, data_rng);
                                      LossResult r =
                                          global_denoising_loss(*np, batch, noise, objective, noise_rng, counters);
                                      return StepLoss{r.loss, r.raw_loss, r.mean_sigma};
                                  }}};
    return train_units(units, cfg);
}

TrainRecord train_recurrent_single_pass(DenoiserNet& shared, const BatchSource& data, const NoiseConfig& noise,
                                        const LossObjective& objective, const TrainConfig& cfg) {
    return train_end_to_end(shared, data, noise, objective, cfg);
}

LossResult unrolled_loss(const DenoiserNet& shared, const DenoisingBatch& batch, const NoiseConfig& noise,
                         std::size_t iterations, std::mt19937_64& rng, Counters* counters) {
    if (iterations == 0) throw std::invalid_argument("unrolling needs at least one iteration");
    const auto& shape = shared.shape();
    const NoiseDraw draw =
        draw_noise(noise, {noise.sigma_min, noise.sigma_max}, batch.groups, shape.z_tokens, shape.z_dim, rng);
    return denoising_loss(shared, batch, noise, draw, LossObjective{}, counters, iterations);
}

TrainRecord train_unrolled(DenoiserNet& shared, const BatchSource& data, const NoiseConfig& noise,
                           std::size_t iterations, const TrainConfig& cfg) {
    const DenoiserNet* np = &shared;
    std::vector<TrainUnit> units{{shared.parameters(), [np, &data, noise, iterations, &cfg](
                                                           std::mt19937_64& data_rng, std::mt19937_64& noise_rng,
                                                           Counters* counters) {
                                      DenoisingBatch batch = data(cfg.batch_size, data_rng);
                                      LossResult r = unrolled_loss(*np, batch, noise, iterations, noise_rng, counters);
                                      return StepLoss{r.loss, r.raw_loss, r.mean_sigma};
                                  }}};
    return train_units(units, cfg);
}

// ---------------------------------------------------------------------------

ClassifierNet::ClassifierNet(const std::string& prefix, const std::vector<LayerSpec>& layers, Index x_tokens,
                             Index x_dim, int classes, std::mt19937_64& rng)
    : x_tokens_(x_tokens), x_dim_(x_dim) {
    if (layers.empty() || x_tokens <= 0 || x_dim <= 0 || classes <= 1) {
        throw std::invalid_argument("classifier needs layers, feature tokens and at least two classes");
    }
    const Index d = layers.front().width;
    params_.push_back(make_parameter(prefix + ".cls", normal_matrix(1, d, 0.1, rng)));
    cls_ = params_.back().tensor;
    x_in_ = Linear::create(params_, prefix + ".x_in", x_dim, d, rng);
    params_.push_back(make_parameter(prefix + ".pos", normal_matrix(x_tokens + 1, d, 0.1, rng)));
    pos_ = params_.back().tensor;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].width != d) throw ShapeError("classifier layers must share one width");
        LayerSpec spec = layers[l];
        spec.conditioning = false;
        layers_.emplace_back(params_, prefix + ".layer" + std::to_string(l + 1), spec, rng);
    }
    params_.push_back(make_parameter(prefix + ".norm.gain", Matrix::Ones(1, d)));
    norm_gain_ = params_.back().tensor;
    params_.push_back(make_parameter(prefix + ".norm.bias", Matrix::Zero(1, d)));
    norm_bias_ = params_.back().tensor;
    head_ = Linear::create(params_, prefix + ".head", d, classes, rng, true);
    require_unique_names(params_);
}

Tensor ClassifierNet::logits(const Matrix& x, Index groups, Counters* counters) const {
    if (x.rows() != groups * x_tokens_ || x.cols() != x_dim_) throw ShapeError("classifier: feature shape mismatch");
    const Index seq = x_tokens_ + 1;
    Tensor tokens = concat_rows(cls_, x_in_(Tensor(x)));
    std::vector<Index> order, pos;
    for (Index g = 0; g < groups; ++g) {
        order.push_back(0);
        pos.push_back(0);
        for (Index p = 0; p < x_tokens_; ++p) {
            order.push_back(1 + g * x_tokens_ + p);
            pos.push_back(p + 1);
        }
    }
    Tensor h = gather_rows(tokens, order) + gather_rows(pos_, pos);
    const TokenLayout layout{seq, nullptr};
    for (const auto& layer : layers_) h = layer.forward(h, nullptr, layout, counters);
    std::vector<Index> cls_rows;
    for (Index g = 0; g < groups; ++g) cls_rows.push_back(g * seq);
    Tensor c = layer_norm(gather_rows(h, cls_rows)) * norm_gain_ + norm_bias_;
    return head_(c);
}

std::vector<int> ClassifierNet::predict(const Matrix& x, Index groups) const {
    NoGradGuard no_grad;
    Matrix scores = logits(x, groups).value();
    std::vector<int> out(static_cast<std::size_t>(groups));
    for (Index g = 0; g < groups; ++g) {
        Index best = 0;
        scores.row(g).maxCoeff(&best);
        out[static_cast<std::size_t>(g)] = static_cast<int>(best);
    }
    return out;
}

TrainRecord train_classifier(ClassifierNet& net, const BatchSource& data, const TrainConfig& cfg) {
    const ClassifierNet* np = &net;
    std::vector<TrainUnit> units{
        {net.parameters(), [np, &data, &cfg](std::mt19937_64& data_rng, std::mt19937_64&, Counters* counters) {
             DenoisingBatch batch = data(cfg.batch_size, data_rng);
             if (static_cast<Index>(batch.labels.size()) != batch.groups) {
                 throw ShapeError("classifier batch needs one label per example");
             }
             Tensor loss = -mean(pick(log_softmax(np->logits(batch.x, batch.groups, counters)), batch.labels));
             return StepLoss{loss, loss.item(), 0.0};
         }}};
    return train_units(units, cfg);
}

// ---------------------------------------------------------------------------

TrainRecord train_masked_blockwise(std::vector<MaskedDenoiser>& blocks, const std::vector<double>& boundaries,
                                   const SequenceSource& data, Index length, const MaskSchedule& schedule,
                                   const TrainConfig& cfg) {
    if (boundaries.size() != blocks.size() + 1) throw std::invalid_argument("need B + 1 time boundaries");
    std::vector<TrainUnit> units;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const MaskedDenoiser* mp = &blocks[b];
        const double lo = boundaries[b], hi = boundaries[b + 1];
        units.push_back({blocks[b].parameters(), [mp, lo, hi, &data, length, schedule, &cfg](
                                                     std::mt19937_64& data_rng, std::mt19937_64& noise_rng,
                                                     Counters* counters) {
                             std::vector<int> x0 = data(cfg.batch_size, data_rng);
                             MaskedLossResult r = masked_mc_loss(*mp, x0, length, lo, hi, schedule, noise_rng, counters);
                             return StepLoss{r.loss, r.loss.item(), r.mean_t};
                         }});
    }
    return train_units(units, cfg);
}

TrainRecord train_masked_end_to_end(MaskedDenoiser& model, const SequenceSource& data, Index length,
                                    const MaskSchedule& schedule, const TrainConfig& cfg) {
    const MaskedDenoiser* mp = &model;
    std::vector<TrainUnit> units{{model.parameters(), [mp, &data, length, schedule, &cfg](
                                                          std::mt19937_64& data_rng, std::mt19937_64& noise_rng,
                                                          Counters* counters) {
                                      std::vector<int> x0 = data(cfg.batch_size, data_rng);
                                      MaskedLossResult r =
                                          masked_mc_loss(*mp, x0, length, 0.0, 1.0, schedule, noise_rng, counters);
                                      return StepLoss{r.loss, r.loss.item(), r.mean_t};
                                  }}};
    return train_units(units, cfg);
}

// ---------------------------------------------------------------------------

AttentionMask build_ar_mask(Index n) {
    if (n < 1) throw std::invalid_argument("build_ar_mask requires n >= 1");
    AttentionMask m = AttentionMask::Constant(2 * n, 2 * n, false);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j <= i; ++j) m(i, j) = true;
        for (Index j = 0; j < i; ++j) m(n + i, j) = true;
        m(n + i, n + i) = true;
    }
    return m;
}

void MemoryModel::validate() const {
    if (!(P > 0.0) || !(A > 0.0) || L == 0 || B == 0 || !(optimizer_multiplier > 0.0)) {
        throw std::invalid_argument("memory model sizes must be positive");
    }
    if (B > L) throw std::invalid_argument("memory model: more blocks than layers");
}

const char* to_string(MemoryMode mode) {
    switch (mode) {
        case MemoryMode::standard: return "standard";
        case MemoryMode::checkpointing: return "checkpointing";
        case MemoryMode::diffblocks: return "diffblocks";
        case MemoryMode::diffblocks_checkpointing: return "diffblocks_checkpointing";
    }
    return "unknown";
}

double memory_model_eval(const MemoryModel& m, MemoryMode mode) {
    m.validate();
    const double L = static_cast<double>(m.L);
    const double per_block = L / static_cast<double>(m.B);
    const double k = m.optimizer_multiplier;
    switch (mode) {
        case MemoryMode::standard: return (k * m.P + m.A) * L;
        case MemoryMode::checkpointing: return k * m.P * L + m.A;
        case MemoryMode::diffblocks: return (k * m.P + m.A) * per_block;
        case MemoryMode::diffblocks_checkpointing: return k * m.P * per_block + m.A;
    }
    throw std::invalid_argument("unknown memory mode");
}

}  // namespace dblocks
