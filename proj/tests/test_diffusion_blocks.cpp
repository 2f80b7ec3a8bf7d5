#include "doctest.h"
#include "helpers.hpp"

#include "dblocks/diffusion_blocks.hpp"

#include <set>

using namespace dblocks;

namespace {

std::vector<LayerSpec> mlp_stack(std::size_t n, Index width = 8) {
    LayerSpec spec;
    spec.width = width;
    spec.mlp_ratio = 2;
    return std::vector<LayerSpec>(n, spec);
}

TokenShape point_shape(Index width = 8) {
    TokenShape shape;
    shape.width = width;
    shape.z_tokens = 1;
    shape.z_dim = 2;
    return shape;
}

void randomize(const ParameterList& params, std::mt19937_64& rng, double scale = 0.3) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.mutable_value() = normal_matrix(t.rows(), t.cols(), scale, rng);
    }
}

// Denoiser that knows the clean target exactly.
DenoiseFn oracle(const Matrix& y) {
    return [y](std::size_t, const Matrix&, const Matrix&, double) { return y; };
}

}  // namespace

TEST_SUITE("diffusion_blocks") {

TEST_CASE("convert examples") {
    const NoiseConfig cfg;
    ConvertOptions opts;
    opts.blocks = 3;
    const ConvertedModel even = convert(mlp_stack(12), point_shape(), cfg, opts);
    CHECK(even.plan.block_sizes == std::vector<std::size_t>{4, 4, 4});
    CHECK(even.plan.layer_distribution() == "[4,4,4]");

    opts.distribution = {2, 4, 6};
    const ConvertedModel skewed = convert(mlp_stack(12), point_shape(), cfg, opts);
    CHECK(skewed.plan.block_sizes == std::vector<std::size_t>{2, 4, 6});
    for (std::size_t b = 1; b <= 3; ++b) {
        CHECK(skewed.block(b).net().layer_count() == skewed.plan.block_sizes[b - 1]);
        CHECK(skewed.block(b).range().lo == even.block(b).range().lo);
        CHECK(skewed.block(b).range().hi == even.block(b).range().hi);
    }
    // block 1 takes the highest noise
    CHECK(even.block(1).range().hi == cfg.sigma_max);
    CHECK(even.block(3).range().lo == cfg.sigma_min);
    for (std::size_t b = 1; b <= 3; ++b) {
        for (const auto& p : even.block(b).parameters()) CHECK(p.name.rfind(even.block(b).prefix(), 0) == 0);
        for (const auto& spec : even.block(b).net().layer_specs()) CHECK(spec.conditioning);
    }
    require_unique_names(even.parameters());

    ConvertOptions single;
    const ConvertedModel one = convert(mlp_stack(12), point_shape(), cfg, single);
    CHECK(one.plan.block_sizes == std::vector<std::size_t>{12});
    CHECK(one.block(1).range().lo == cfg.sigma_min);
    CHECK(one.block(1).range().hi == cfg.sigma_max);

    ConvertOptions too_many;
    too_many.blocks = 5;
    CHECK_THROWS_AS(convert(mlp_stack(4), point_shape(), cfg, too_many), std::invalid_argument);
    opts.distribution = {2, 4, 5};
    CHECK_THROWS_AS(convert(mlp_stack(12), point_shape(), cfg, opts), std::invalid_argument);
}

TEST_CASE("coverage of the unexpanded ranges") {
    const NoiseConfig cfg;
    for (std::size_t B : {1, 2, 3, 5}) {
        ConvertOptions opts;
        opts.blocks = B;
        opts.gamma = 0.1;
        const ConvertedModel m = convert(mlp_stack(6), point_shape(), cfg, opts);
        CHECK(m.block(1).range().hi == cfg.sigma_max);
        CHECK(m.block(B).range().lo == cfg.sigma_min);
        for (std::size_t b = 1; b < B; ++b) CHECK(m.block(b).range().lo == m.block(b + 1).range().hi);
        for (std::size_t b = 1; b <= B; ++b) {
            CHECK(m.block(b).training_range().lo <= m.block(b).range().lo);
            CHECK(m.block(b).training_range().hi >= m.block(b).range().hi);
        }
    }
}

TEST_CASE("denoise preconditioning examples") {
    const NoiseConfig cfg;
    std::mt19937_64 rng(1);
    ConvertOptions opts;
    const ConvertedModel m = convert(mlp_stack(2), point_shape(), cfg, opts);
    const Matrix y = testing::uniform_matrix(5, 2, rng);

    // fresh networks have a zero output projection
    DenoiseInput in{Matrix(0, 0), y, ColVector::Constant(5, cfg.sigma_data)};
    Matrix y_hat = m.block(1).denoise(in, cfg).value();
    CHECK((y_hat - 0.5 * y).cwiseAbs().maxCoeff() < 1e-15);

    in.sigma = ColVector::Constant(5, 3.0);
    y_hat = m.block(1).denoise(in, cfg).value();
    CHECK((y_hat - precondition_coeffs(cfg, 3.0).c_skip * y).cwiseAbs().maxCoeff() < 1e-15);

    DenoiseInput wrong{Matrix(0, 0), Matrix::Zero(5, 3), ColVector::Constant(5, 1.0)};
    CHECK_THROWS(m.block(1).denoise(wrong, cfg));
}

TEST_CASE("conditioning tokens are live") {
    const NoiseConfig cfg;
    std::mt19937_64 rng(2);
    TokenShape shape = point_shape();
    shape.x_tokens = 2;
    shape.x_dim = 3;
    LayerSpec attn;
    attn.kind = LayerKind::attention;
    attn.width = 8;
    ConvertOptions opts;
    ConvertedModel m = convert({attn, attn}, shape, cfg, opts);
    randomize(m.block(1).parameters(), rng);

    const Matrix x = testing::uniform_matrix(2 * 3, 3, rng);
    const Matrix z = testing::uniform_matrix(3, 2, rng);
    const ColVector sigma = ColVector::Constant(3, 0.7);
    const Matrix a = m.block(1).denoise({x, z, sigma}, cfg).value();
    Matrix x2 = x;
    x2(0, 0) += 0.5;
    const Matrix b = m.block(1).denoise({x2, z, sigma}, cfg).value();
    CHECK((a - b).row(0).norm() > 1e-8);
    // other sequences do not see the perturbation
    CHECK((a - b).bottomRows(2).cwiseAbs().maxCoeff() == 0.0);

    // masking z -> x attention cuts the dependence
    auto mask = std::make_shared<AttentionMask>(AttentionMask::Constant(3, 3, true));
    mask->block(2, 0, 1, 2).setConstant(false);
    shape.mask = mask;
    ConvertedModel cut = convert({attn, attn}, shape, cfg, opts);
    randomize(cut.block(1).parameters(), rng);
    const Matrix c = cut.block(1).denoise({x, z, sigma}, cfg).value();
    const Matrix d = cut.block(1).denoise({x2, z, sigma}, cfg).value();
    CHECK((c - d).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero network loss matches the closed form") {
    // y ~ N(0, I_2), sigma = sigma_data: E|0.5 (y + 0.5 eps) - y|^2 = 0.25 * 2 + 0.0625 * 2 = 0.625.
    NoiseConfig cfg;
    std::mt19937_64 rng(3);
    ConvertOptions opts;
    const ConvertedModel m = convert(mlp_stack(1), point_shape(), cfg, opts);
    const BlockDenoiser fixed(1, {0.5, 0.5}, {0.5, 0.5}, m.block(1).net());

    DenoisingBatch batch;
    batch.groups = 20000;
    batch.y = normal_matrix(batch.groups, 2, 1.0, rng);
    const LossResult r = block_loss(fixed, batch, cfg, LossObjective{}, rng);
    CHECK(r.raw_loss == doctest::Approx(0.625).epsilon(0.02));
    CHECK(r.loss.item() == doctest::Approx(loss_weight(cfg, 0.5) * 0.625).epsilon(0.02));
    CHECK(r.mean_sigma == 0.5);
}

TEST_CASE("block loss reaches only its own block") {
    const NoiseConfig cfg;
    for (std::uint64_t seed : {4u, 5u, 6u}) {
        std::mt19937_64 rng(seed);
        ConvertOptions opts;
        opts.blocks = 3;
        opts.gamma = 0.1;
        ConvertedModel m = convert(mlp_stack(6), point_shape(), cfg, opts);
        randomize(m.parameters(), rng);
        DenoisingBatch batch;
        batch.groups = 8;
        batch.y = normal_matrix(8, 2, 1.0, rng);
        for (std::size_t b = 1; b <= 3; ++b) {
            zero_grads(m.parameters());
            const LossResult r = block_loss(m.block(b), batch, cfg, LossObjective{}, rng);
            backward(r.loss);
            for (std::size_t other = 1; other <= 3; ++other) {
                for (const auto& p : m.block(other).parameters()) {
                    const bool touched = p.tensor.has_grad() && p.tensor.grad().cwiseAbs().maxCoeff() > 0.0;
                    if (other == b) continue;
                    CHECK_FALSE(touched);
                }
            }
            double own = 0.0;
            for (const auto& p : m.block(b).parameters()) {
                if (p.tensor.has_grad()) own += p.tensor.grad().squaredNorm();
            }
            CHECK(own > 0.0);
        }
    }
}

TEST_CASE("single block objective equals the global objective") {
    const NoiseConfig cfg;
    std::mt19937_64 init(7);
    ConvertOptions opts;
    ConvertedModel m = convert(mlp_stack(3), point_shape(), cfg, opts);
    randomize(m.parameters(), init);
    DenoisingBatch batch;
    batch.groups = 16;
    batch.y = normal_matrix(16, 2, 1.0, init);
    std::mt19937_64 r1(8), r2(8);
    const LossResult a = block_loss(m.block(1), batch, cfg, LossObjective{}, r1);
    const LossResult b = global_denoising_loss(m.block(1).net(), batch, cfg, LossObjective{}, r2);
    CHECK(a.loss.item() == b.loss.item());
    CHECK(r1() == r2());
}

TEST_CASE("euler step examples") {
    const Matrix z = Matrix::Constant(1, 1, 2.0);
    const Matrix y_hat = Matrix::Constant(1, 1, 0.5);
    CHECK(euler_step(z, y_hat, 1.0, 0.5)(0, 0) == doctest::Approx(1.25).epsilon(1e-15));
    CHECK(euler_step(z, z, 1.0, 0.5)(0, 0) == 2.0);
    CHECK(euler_step(z, y_hat, 1.0, 0.5, EulerForm::printed)(0, 0) == doctest::Approx(2.75).epsilon(1e-15));
    CHECK_THROWS_AS(euler_step(z, y_hat, 0.5, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(euler_step(z, y_hat, 0.5, 1.0), std::invalid_argument);

    std::mt19937_64 rng(9);
    const Matrix y = testing::uniform_matrix(4, 3, rng);
    const Matrix eps = normal_matrix(4, 3, 1.0, rng);
    const Matrix next = euler_step(y + 7.0 * eps, y, 7.0, 0.3);
    CHECK((next - (y + 0.3 * eps)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("block selection examples") {
    const NoiseConfig cfg;
    const Partition p = partition_boundaries(cfg, 3);
    CHECK(select_block(p, cfg.sigma_max) == 1);
    CHECK(select_block(p, cfg.sigma_min) == 3);
    CHECK(select_block(p, p.boundaries[1]) == 2);
    CHECK(select_block(p, p.boundaries[2]) == 3);
    CHECK(select_block(p, std::nextafter(p.boundaries[1], 100.0)) == 1);
    CHECK_THROWS_AS(select_block(p, 100.0), std::out_of_range);
    CHECK_THROWS_AS(select_block(p, 0.001), std::out_of_range);
}

TEST_CASE("inference schedule uses blocks evenly") {
    const NoiseConfig cfg;
    for (std::size_t B : {1, 2, 3, 4}) {
        const Partition p = partition_boundaries(cfg, B);
        for (std::size_t T : {B, B + 1, 7 * B + 2, std::size_t{50}}) {
            if (T < B) continue;
            const InferenceSchedule s = inference_schedule(p, cfg, T);
            REQUIRE(s.levels.size() == T + 1);
            REQUIRE(s.block_of_step.size() == T);
            CHECK(s.levels.front() == cfg.sigma_max);
            CHECK(s.levels.back() == cfg.sigma_min);
            std::vector<std::size_t> uses(B + 1, 0);
            for (std::size_t i = 0; i < T; ++i) {
                CHECK(s.levels[i] > s.levels[i + 1]);
                CHECK(select_block(p, s.levels[i]) == s.block_of_step[i]);
                ++uses[s.block_of_step[i]];
            }
            for (std::size_t b = 1; b <= B; ++b) {
                CHECK(uses[b] >= T / B);
                CHECK(uses[b] <= (T + B - 1) / B);
            }
            if (T == B) {
                for (std::size_t b = 1; b <= B; ++b) CHECK(uses[b] == 1);
            }
        }
    }
}

TEST_CASE("oracle sampling is exact") {
    const NoiseConfig cfg;
    std::mt19937_64 rng(10);
    const Matrix y = testing::uniform_matrix(6, 2, rng);
    const Matrix eps = normal_matrix(6, 2, 1.0, rng);
    for (std::size_t B : {1, 2, 3, 4}) {
        const Partition p = partition_boundaries(cfg, B);
        for (std::size_t T : {B, std::size_t{7}, std::size_t{50}}) {
            if (T < B) continue;
            const Matrix out = euler_sample(oracle(y), p, cfg, Matrix(0, 0), y + cfg.sigma_max * eps, T);
            const Matrix expected = y + cfg.sigma_min * eps;
            CHECK((out - expected).norm() / expected.norm() < 1e-9);
        }
    }
}

TEST_CASE("sampling layer evaluations") {
    const NoiseConfig cfg;
    std::mt19937_64 rng(11);
    ConvertOptions opts;
    opts.blocks = 3;
    const ConvertedModel blocks = convert(mlp_stack(12, 4), point_shape(4), cfg, opts);
    std::vector<SampleTraceRow> trace;
    sample(blocks, Matrix(0, 0), 2, 50, cfg, rng, &trace);
    REQUIRE(trace.size() == 50);
    std::uint64_t total = 0;
    for (const auto& row : trace) {
        CHECK(row.layer_evals == 4);
        CHECK(blocks.block(row.block).range().contains(row.sigma));
        total += row.layer_evals;
    }
    CHECK(total == 200);

    const ConvertedModel whole = convert(mlp_stack(12, 4), point_shape(4), cfg, ConvertOptions{});
    trace.clear();
    sample(whole, Matrix(0, 0), 2, 50, cfg, rng, &trace);
    total = 0;
    for (const auto& row : trace) total += row.layer_evals;
    CHECK(total == 600);

    trace.clear();
    sample(blocks, Matrix(0, 0), 2, 3, cfg, rng, &trace);
    REQUIRE(trace.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(trace[i].block == i + 1);
}

TEST_CASE("score estimate examples") {
    std::mt19937_64 rng(12);
    const Matrix z = testing::uniform_matrix(5, 3, rng);
    CHECK(score_estimate(z, z, 0.7).cwiseAbs().maxCoeff() == 0.0);

    // N(0, s^2 I) data: the optimal denoiser is z s^2 / (s^2 + sigma^2).
    const double s = 1.3, sigma = 0.8;
    const Matrix y_hat = z * (s * s / (s * s + sigma * sigma));
    const Matrix analytic = -z / (s * s + sigma * sigma);
    CHECK((score_estimate(y_hat, z, sigma) - analytic).cwiseAbs().maxCoeff() < 1e-14);

    const Matrix y = testing::uniform_matrix(5, 3, rng);
    CHECK((score_estimate(y, z, 2.0 * sigma) - 0.25 * score_estimate(y, z, sigma)).cwiseAbs().maxCoeff() < 1e-14);
}

}  // TEST_SUITE
