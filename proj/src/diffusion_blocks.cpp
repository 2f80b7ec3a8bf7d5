#include "dblocks/diffusion_blocks.hpp"

#include <sstream>
#include <stdexcept>

namespace dblocks {

namespace {

std::vector<Index> tile_index(Index groups, Index count) {
    std::vector<Index> idx(static_cast<std::size_t>(groups * count));
    for (Index g = 0; g < groups; ++g) {
        for (Index j = 0; j < count; ++j) idx[static_cast<std::size_t>(g * count + j)] = j;
    }
    return idx;
}

ColVector repeat_values(const ColVector& v, Index per_group) {
    ColVector out(v.size() * per_group);
    for (Index g = 0; g < v.size(); ++g) out.segment(g * per_group, per_group).setConstant(v(g));
    return out;
}

Matrix column(const ColVector& v) { return Matrix(v); }

}  // namespace

// ---------------------------------------------------------------------------

DenoiserNet::DenoiserNet(const std::string& prefix, const std::vector<LayerSpec>& layers,
                         const TokenShape& shape, std::mt19937_64& rng)
    : shape_(shape), specs_(layers) {
    if (shape.width <= 0 || shape.z_tokens <= 0 || shape.z_dim <= 0) {
        throw std::invalid_argument("denoiser needs positive width and at least one target token");
    }
    if (shape.mask && (shape.mask->rows() != shape.seq_len() || shape.mask->cols() != shape.seq_len())) {
        throw ShapeError("denoiser mask does not match the token count");
    }
    const Index d = shape.width;
    embedding_ = NoiseEmbedding(params_, prefix + ".noise_embed", d, rng);
    if (shape.x_tokens > 0) {
        x_in_ = Linear::create(params_, prefix + ".x_in", shape.x_dim, d, rng);
        params_.push_back(make_parameter(prefix + ".x_pos", normal_matrix(shape.x_tokens, d, 0.1, rng)));
        x_pos_ = params_.back().tensor;
    }
    z_in_ = Linear::create(params_, prefix + ".z_in", shape.z_dim, d, rng);
    params_.push_back(make_parameter(prefix + ".z_pos", normal_matrix(shape.z_tokens, d, 0.1, rng)));
    z_pos_ = params_.back().tensor;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].width != d) throw ShapeError("layer width differs from token width");
        layers_.emplace_back(params_, prefix + ".layer" + std::to_string(l + 1), layers[l], rng);
    }
    final_scale_ = Linear::create(params_, prefix + ".final.scale", d, d, rng, true);
    final_shift_ = Linear::create(params_, prefix + ".final.shift", d, d, rng, true);
    out_ = Linear::create(params_, prefix + ".out", d, shape.z_dim, rng, true);
    require_unique_names(params_);
}

void DenoiserNet::zero_output() {
    out_.weight.mutable_value().setZero();
    out_.bias.mutable_value().setZero();
}

Tensor DenoiserNet::forward(const Matrix& x, const Tensor& z, const Matrix& c_noise, Counters* counters,
                            std::size_t loops) const {
    if (loops == 0) throw std::invalid_argument("denoiser: loops must be positive");
    const Index groups = c_noise.rows();
    const Index nx = shape_.x_tokens;
    const Index nz = shape_.z_tokens;
    if (z.rows() != groups * nz || z.cols() != shape_.z_dim) throw ShapeError("denoiser: z shape mismatch");
    if (nx > 0 && (x.rows() != groups * nx || x.cols() != shape_.x_dim)) {
        throw ShapeError("denoiser: x shape mismatch");
    }
    Tensor cond = embedding_(c_noise);
    Tensor zt = z_in_(z) + gather_rows(z_pos_, tile_index(groups, nz));
    Tensor tokens = zt;
    const Index seq = nx + nz;
    if (nx > 0) {
        Tensor xt = x_in_(Tensor(x)) + gather_rows(x_pos_, tile_index(groups, nx));
        std::vector<Index> order;
        order.reserve(static_cast<std::size_t>(groups * seq));
        for (Index g = 0; g < groups; ++g) {
            for (Index p = 0; p < nx; ++p) order.push_back(g * nx + p);
            for (Index p = 0; p < nz; ++p) order.push_back(groups * nx + g * nz + p);
        }
        tokens = gather_rows(concat_rows(xt, zt), order);
    }
    const TokenLayout layout{seq, shape_.mask.get()};
    for (std::size_t k = 0; k < loops; ++k) {
        for (const auto& layer : layers_) {
            tokens = layer.forward(tokens, layer.spec().conditioning ? &cond : nullptr, layout, counters);
        }
    }
    if (nx > 0) {
        std::vector<Index> z_rows;
        z_rows.reserve(static_cast<std::size_t>(groups * nz));
        for (Index g = 0; g < groups; ++g) {
            for (Index p = 0; p < nz; ++p) z_rows.push_back(g * seq + nx + p);
        }
        tokens = gather_rows(tokens, z_rows);
    }
    const auto rep = repeat_index(groups, nz);
    Tensor h = adaln_modulate(tokens, gather_rows(final_scale_(cond), rep), gather_rows(final_shift_(cond), rep));
    return out_(h);
}

Tensor precondition_denoise(const DenoiserNet& net, const NoiseConfig& cfg, const Matrix& x, const Tensor& z,
                            const ColVector& sigma, Counters* counters, std::size_t loops) {
    const Index groups = sigma.size();
    const Index nz = net.shape().z_tokens;
    if (z.rows() != groups * nz) throw ShapeError("precondition_denoise: one sigma per sequence");
    ColVector c_in(groups), c_skip(groups), c_out(groups);
    Matrix c_noise(groups, 1);
    for (Index g = 0; g < groups; ++g) {
        const auto c = precondition_coeffs(cfg, sigma(g));
        c_in(g) = c.c_in;
        c_skip(g) = c.c_skip;
        c_out(g) = c.c_out;
        c_noise(g, 0) = c.c_noise;
    }
    Tensor f = net.forward(x, z * Tensor(column(repeat_values(c_in, nz))), c_noise, counters, loops);
    return z * Tensor(column(repeat_values(c_skip, nz))) + f * Tensor(column(repeat_values(c_out, nz)));
}

Tensor precondition_denoise(const DenoiserNet& net, const NoiseConfig& cfg, const Matrix& x, const Matrix& z,
                            const ColVector& sigma, Counters* counters, std::size_t loops) {
    return precondition_denoise(net, cfg, x, Tensor(z), sigma, counters, loops);
}

// ---------------------------------------------------------------------------

BlockDenoiser::BlockDenoiser(std::size_t index, NoiseRange range, NoiseRange training_range, DenoiserNet net)
    : index_(index), range_(range), training_range_(training_range), net_(std::move(net)) {}

Tensor BlockDenoiser::denoise(const DenoiseInput& input, const NoiseConfig& cfg, Counters* counters) const {
    for (Index g = 0; g < input.sigma.size(); ++g) {
        if (!(input.sigma(g) > 0.0)) throw std::domain_error("denoise requires sigma > 0");
    }
    return precondition_denoise(net_, cfg, input.x, input.z, input.sigma, counters);
}

std::string BlockPlan::layer_distribution() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < block_sizes.size(); ++i) os << (i ? "," : "") << block_sizes[i];
    os << ']';
    return os.str();
}

ParameterList ConvertedModel::parameters() const {
    ParameterList all;
    for (const auto& b : blocks) all.insert(all.end(), b.parameters().begin(), b.parameters().end());
    return all;
}

ConvertedModel convert(std::vector<LayerSpec> layers, const TokenShape& shape, const NoiseConfig& cfg,
                       const ConvertOptions& options) {
    const std::size_t L = layers.size();
    const std::size_t B = options.blocks;
    if (B == 0) throw std::invalid_argument("convert requires at least one block");
    if (B > L) throw std::invalid_argument("more blocks than layers");
    std::vector<std::size_t> sizes = options.distribution;
    if (sizes.empty()) {
        for (std::size_t b = 0; b < B; ++b) sizes.push_back(L / B + (b < L % B ? 1 : 0));
    }
    if (sizes.size() != B) throw std::invalid_argument("layer distribution length differs from block count");
    std::size_t total = 0;
    for (std::size_t s : sizes) {
        if (s == 0) throw std::invalid_argument("every block needs at least one layer");
        total += s;
    }
    if (total != L) throw std::invalid_argument("layer distribution does not sum to the layer count");

    ConvertedModel model;
    model.plan.total_layers = L;
    model.plan.block_sizes = sizes;
    model.plan.partition = expand_overlap(partition_boundaries(cfg, B, options.strategy), options.gamma, cfg);

    std::mt19937_64 rng(options.seed);
    std::size_t next = 0;
    for (std::size_t b = 1; b <= B; ++b) {
        std::vector<LayerSpec> group(layers.begin() + static_cast<std::ptrdiff_t>(next),
                                     layers.begin() + static_cast<std::ptrdiff_t>(next + sizes[b - 1]));
        next += sizes[b - 1];
        for (auto& spec : group) spec.conditioning = true;
        DenoiserNet net("block" + std::to_string(b), group, shape, rng);
        model.blocks.emplace_back(b, model.plan.partition.interval(b), model.plan.partition.training_range(b),
                                  std::move(net));
    }
    return model;
}

ConvertedModel single_block_model(const DenoiserNet& net, const NoiseConfig& cfg) {
    ConvertedModel model;
    model.plan.total_layers = net.layer_count();
    model.plan.block_sizes = {net.layer_count()};
    model.plan.partition = expand_overlap(partition_boundaries(cfg, 1), 0.0, cfg);
    model.blocks.emplace_back(1, model.plan.partition.interval(1), model.plan.partition.training_range(1), net);
    return model;
}

// ---------------------------------------------------------------------------

Tensor TiedHead::logits(const Tensor& y_hat) const {
    return matmul(y_hat, Tensor(Matrix(embeddings.transpose()))) * logit_scale;
}

std::vector<int> TiedHead::predict(const Matrix& y_hat) const {
    Matrix scores = y_hat * embeddings.transpose();
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Index i = 0; i < scores.rows(); ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

NoiseDraw draw_noise(const NoiseConfig& cfg, NoiseRange range, Index groups, Index rows_per_group, Index dim,
                     std::mt19937_64& rng) {
    NoiseDraw d;
    d.sigma.resize(groups);
    for (Index g = 0; g < groups; ++g) d.sigma(g) = sample_sigma(cfg, range, rng);
    d.eps = normal_matrix(groups * rows_per_group, dim, 1.0, rng);
    return d;
}

Tensor sequence_losses(const Tensor& y_hat, const DenoisingBatch& batch, const LossObjective& objective,
                       Index z_tokens) {
    Tensor per_token;
    if (objective.kind == LossKind::squared_error) {
        per_token = row_sums(square(y_hat - Tensor(batch.y)));
    } else {
        if (!objective.head) throw std::invalid_argument("cross-entropy loss needs a head");
        if (static_cast<Index>(batch.labels.size()) != y_hat.rows()) {
            throw ShapeError("cross-entropy loss needs one label per target token");
        }
        per_token = -pick(log_softmax(objective.head->logits(y_hat)), batch.labels);
    }
    if (z_tokens == 1) return per_token;
    Matrix agg = Matrix::Zero(batch.groups, batch.groups * z_tokens);
    for (Index g = 0; g < batch.groups; ++g) agg.block(g, g * z_tokens, 1, z_tokens).setOnes();
    return matmul(Tensor(std::move(agg)), per_token);
}

LossResult denoising_loss(const DenoiserNet& net, const DenoisingBatch& batch, const NoiseConfig& cfg,
                          const NoiseDraw& noise, const LossObjective& objective, Counters* counters,
                          std::size_t loops) {
    if (batch.groups <= 0) throw std::invalid_argument("loss needs a non-empty batch");
    const Index nz = net.shape().z_tokens;
    const ColVector sigma_rows = repeat_values(noise.sigma, nz);
    Matrix z = batch.y + (noise.eps.array().colwise() * sigma_rows.array()).matrix();
    Tensor y_hat = precondition_denoise(net, cfg, batch.x, z, noise.sigma, counters, loops);
    Tensor per_seq = sequence_losses(y_hat, batch, objective, nz);

    LossResult result;
    result.raw_loss = per_seq.value().mean();
    result.mean_sigma = noise.sigma.mean();
    if (objective.weighted) {
        ColVector w(batch.groups);
        for (Index g = 0; g < batch.groups; ++g) w(g) = loss_weight(cfg, noise.sigma(g));
        result.loss = mean(per_seq * Tensor(column(w)));
    } else {
        result.loss = mean(per_seq);
    }
    return result;
}

LossResult block_loss(const BlockDenoiser& block, const DenoisingBatch& batch, const NoiseConfig& cfg,
                      const LossObjective& objective, std::mt19937_64& rng, Counters* counters) {
    const auto& shape = block.net().shape();
    NoiseDraw noise = draw_noise(cfg, block.training_range(), batch.groups, shape.z_tokens, shape.z_dim, rng);
    return denoising_loss(block.net(), batch, cfg, noise, objective, counters);
}

LossResult global_denoising_loss(const DenoiserNet& net, const DenoisingBatch& batch, const NoiseConfig& cfg,
                                 const LossObjective& objective, std::mt19937_64& rng, Counters* counters) {
    const auto& shape = net.shape();
    NoiseDraw noise =
        draw_noise(cfg, {cfg.sigma_min, cfg.sigma_max}, batch.groups, shape.z_tokens, shape.z_dim, rng);
    return denoising_loss(net, batch, cfg, noise, objective, counters);
}

// ---------------------------------------------------------------------------

Matrix euler_step(const Matrix& z, const Matrix& y_hat, double sigma_prev, double sigma_next, EulerForm form) {
    if (!(sigma_prev > sigma_next) || sigma_next < 0.0) {
        throw std::invalid_argument("euler_step requires sigma_prev > sigma_next >= 0");
    }
    if (z.rows() != y_hat.rows() || z.cols() != y_hat.cols()) throw ShapeError("euler_step shape mismatch");
    const double ratio = (sigma_prev - sigma_next) / sigma_prev;
    if (form == EulerForm::printed) return z + ratio * (z - y_hat);
    return z + ratio * (y_hat - z);
}

std::size_t select_block(const Partition& partition, double sigma) {
    const std::size_t B = partition.blocks();
    if (B == 0) throw std::invalid_argument("empty partition");
    if (!(sigma >= partition.boundaries.back() && sigma <= partition.boundaries.front())) {
        throw std::out_of_range("sigma outside [sigma_min, sigma_max]");
    }
    if (sigma == partition.boundaries.back()) return B;
    for (std::size_t b = 1; b <= B; ++b) {
        if (sigma > partition.boundaries[b] && sigma <= partition.boundaries[b - 1]) return b;
    }
    return B;
}

Matrix score_estimate(const Matrix& y_hat, const Matrix& z, double sigma) {
    if (!(sigma > 0.0)) throw std::domain_error("score_estimate requires sigma > 0");
    return (y_hat - z) / (sigma * sigma);
}

InferenceSchedule inference_schedule(const Partition& partition, const NoiseConfig& cfg, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("sampling needs at least one step");
    const std::size_t B = partition.blocks();
    InferenceSchedule s;
    for (std::size_t b = 1; b <= B; ++b) {
        const std::size_t count = steps / B + (b - 1 < steps % B ? 1 : 0);
        for (double level : equal_mass_levels(cfg, partition.interval(b), count)) {
            s.levels.push_back(level);
            s.block_of_step.push_back(b);
        }
    }
    s.levels.push_back(partition.boundaries.back());
    return s;
}

Matrix euler_sample(const DenoiseFn& denoiser, const Partition& partition, const NoiseConfig& cfg,
                    const Matrix& x, Matrix z0, std::size_t steps, std::vector<SampleTraceRow>* trace,
                    EulerForm form) {
    const InferenceSchedule schedule = inference_schedule(partition, cfg, steps);
    Matrix z = std::move(z0);
    for (std::size_t i = 0; i + 1 < schedule.levels.size(); ++i) {
        const double sp = schedule.levels[i];
        const double sn = schedule.levels[i + 1];
        const std::size_t b = schedule.block_of_step[i];
        Matrix y_hat = denoiser(b, x, z, sp);
        z = euler_step(z, y_hat, sp, sn, form);
        if (trace) trace->push_back({i, sp, sn, b, 0});
    }
    return z;
}

Matrix sample_from(const ConvertedModel& model, const Matrix& x, Matrix z0, std::size_t steps,
                   const NoiseConfig& cfg, std::vector<SampleTraceRow>* trace, std::size_t loops) {
    NoGradGuard no_grad;
    const Index nz = model.blocks.front().net().shape().z_tokens;
    const Index groups = z0.rows() / nz;
    Counters counters;
    std::vector<std::uint64_t> evals;
    const std::size_t first_row = trace ? trace->size() : 0;
    DenoiseFn fn = [&](std::size_t b, const Matrix& xx, const Matrix& z, double sigma) {
        const std::uint64_t before = counters.layer_evals_forward;
        Matrix out =
            precondition_denoise(model.block(b).net(), cfg, xx, z, ColVector::Constant(groups, sigma), &counters, loops)
                .value();
        evals.push_back(counters.layer_evals_forward - before);
        return out;
    };
    Matrix z = euler_sample(fn, model.plan.partition, cfg, x, std::move(z0), steps, trace);
    if (trace) {
        for (std::size_t i = 0; first_row + i < trace->size() && i < evals.size(); ++i) {
            (*trace)[first_row + i].layer_evals = evals[i];
        }
    }
    return z;
}

Matrix sample(const ConvertedModel& model, const Matrix& x, Index groups, std::size_t steps,
              const NoiseConfig& cfg, std::mt19937_64& rng, std::vector<SampleTraceRow>* trace, std::size_t loops) {
    const auto& shape = model.blocks.front().net().shape();
    Matrix z0 = normal_matrix(groups * shape.z_tokens, shape.z_dim, 1.0, rng) * cfg.sigma_max;
    return sample_from(model, x, std::move(z0), steps, cfg, trace, loops);
}

}  // namespace dblocks
