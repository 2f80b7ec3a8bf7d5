#include "doctest.h"
#include "helpers.hpp"

#include "dblocks/tasks.hpp"
#include "dblocks/training.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace dblocks;

namespace {

std::vector<LayerSpec> mlp_stack(std::size_t n, Index width = 4) {
    LayerSpec spec;
    spec.width = width;
    spec.mlp_ratio = 2;
    return std::vector<LayerSpec>(n, spec);
}

TokenShape point_shape(Index width = 4) {
    TokenShape shape;
    shape.width = width;
    shape.z_dim = 2;
    return shape;
}

ConvertedModel point_model(std::size_t L, std::size_t B, std::uint64_t seed = 1, double gamma = 0.0) {
    ConvertOptions opts;
    opts.blocks = B;
    opts.gamma = gamma;
    opts.seed = seed;
    return convert(mlp_stack(L), point_shape(), NoiseConfig{}, opts);
}

TrainConfig quick(std::size_t steps, BlockSampling sampling = BlockSampling::round_robin) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    cfg.seed = 3;
    cfg.block_sampling = sampling;
    return cfg;
}

std::vector<Matrix> snapshot(const ParameterList& params) {
    std::vector<Matrix> out;
    for (const auto& p : params) out.push_back(p.tensor.value());
    return out;
}

bool identical(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
        if (a[i].size() && std::memcmp(a[i].data(), b[i].data(), sizeof(double) * a[i].size()) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("training_harness") {

TEST_CASE("adamw hand values") {
    std::mt19937_64 rng(1);
    Parameter p{"w", Tensor(Matrix::Constant(1, 1, 0.3), true)};
    ParameterList params{p};
    AdamWState state = adamw_init(params);
    const AdamWConfig cfg;

    // no gradient, no decay: unchanged
    adamw_step(params, state, 0.1, cfg);
    CHECK(p.tensor.value()(0, 0) == 0.3);

    // g = 1 at the first step: bias-corrected m / sqrt(v) = 1, so the update is lr / (1 + eps)
    AdamWState fresh = adamw_init(params);
    Tensor t = p.tensor;
    t.zero_grad();
    t.node()->accumulate(Matrix::Constant(1, 1, 1.0));
    adamw_step(params, fresh, 0.01, cfg);
    CHECK(std::abs((0.3 - p.tensor.value()(0, 0)) - 0.01 / (1.0 + 1e-8)) < 1e-15);

    // decay only: multiplicative shrink
    t.mutable_value()(0, 0) = 2.0;
    t.zero_grad();
    AdamWConfig decay;
    decay.weight_decay = 0.1;
    AdamWState third = adamw_init(params);
    adamw_step(params, third, 0.05, decay);
    CHECK(p.tensor.value()(0, 0) == doctest::Approx(2.0 * (1.0 - 0.05 * 0.1)).epsilon(1e-15));

    ParameterList bigger{p, Parameter{"v", Tensor(Matrix::Zero(2, 2), true)}};
    CHECK_THROWS_AS(adamw_step(bigger, third, 0.1, cfg), std::invalid_argument);
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.warmup_steps = 4;
    CHECK(learning_rate_at(cfg, 0, 100) == 0.25);
    CHECK(learning_rate_at(cfg, 3, 100) == 1.0);
    CHECK(learning_rate_at(cfg, 50, 100) == 1.0);
    cfg.schedule = LrSchedule::cosine;
    CHECK(learning_rate_at(cfg, 4, 104) == doctest::Approx(1.0));
    CHECK(learning_rate_at(cfg, 54, 104) == doctest::Approx(0.5));
    CHECK(learning_rate_at(cfg, 104, 104) == doctest::Approx(0.0));
}

TEST_CASE("memory model examples") {
    MemoryModel m;
    m.L = 12;
    m.B = 3;
    CHECK(memory_model_eval(m, MemoryMode::standard) == 60.0);
    CHECK(memory_model_eval(m, MemoryMode::diffblocks) == 20.0);
    CHECK(memory_model_eval(m, MemoryMode::checkpointing) == 49.0);
    CHECK(memory_model_eval(m, MemoryMode::diffblocks) / memory_model_eval(m, MemoryMode::standard) ==
          doctest::Approx(1.0 / 3.0));
    m.B = 12;
    CHECK(memory_model_eval(m, MemoryMode::diffblocks) == 4.0 * m.P + m.A);
    m.B = 13;
    CHECK_THROWS_AS(memory_model_eval(m, MemoryMode::diffblocks), std::invalid_argument);
    m.B = 3;
    m.P = 0.0;
    CHECK_THROWS_AS(memory_model_eval(m, MemoryMode::standard), std::invalid_argument);
}

TEST_CASE("autoregressive mask examples") {
    const AttentionMask one = build_ar_mask(1);
    CHECK(one(0, 0));
    CHECK(one(1, 1));
    CHECK_FALSE(one(1, 0));
    CHECK_FALSE(one(0, 1));

    const AttentionMask three = build_ar_mask(3);
    CHECK(three.count() == 12);
    // enumerate the rule directly
    for (Index i = 0; i < 6; ++i) {
        for (Index j = 0; j < 6; ++j) {
            bool allowed = false;
            if (i < 3 && j < 3) allowed = j <= i;
            if (i >= 3 && j < 3) allowed = j < i - 3;
            if (i >= 3 && j >= 3) allowed = i == j;
            CHECK(three(i, j) == allowed);
        }
    }
}

TEST_CASE("autoregressive mask leaks nothing across noisy tokens") {
    std::mt19937_64 rng(2);
    const Index n = 4;
    const Matrix embeddings = random_unit_embeddings(5, 3, 1);
    const TokenShape shape = ar_token_shape(8, n, embeddings);
    LayerSpec attn;
    attn.kind = LayerKind::attention;
    attn.width = 8;
    attn.mlp_ratio = 2;
    ConvertedModel m = convert({attn, attn}, shape, NoiseConfig{}, ConvertOptions{});
    for (const auto& p : m.parameters()) {
        Tensor t = p.tensor;
        t.mutable_value() = normal_matrix(t.rows(), t.cols(), 0.3, rng);
    }
    const Matrix x = testing::uniform_matrix(n, 3, rng);
    const Matrix z = testing::uniform_matrix(n, 3, rng);
    const ColVector sigma = ColVector::Constant(1, 0.8);
    const Matrix base = m.block(1).denoise({x, z, sigma}, NoiseConfig{}).value();
    for (Index j = 0; j < n; ++j) {
        Matrix z2 = z;
        z2(j, 0) += 1.0;
        const Matrix moved = m.block(1).denoise({x, z2, sigma}, NoiseConfig{}).value();
        for (Index i = 0; i < n; ++i) {
            if (i != j) CHECK((moved.row(i) - base.row(i)).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("memory and compute accounting") {
    const std::size_t K = 5;
    ConvertedModel blocks = point_model(12, 3);
    const TrainRecord rb = train_blockwise(blocks, mixture_source(), NoiseConfig{}, LossObjective{}, quick(3 * K));
    CHECK(rb.counters.peak_stored_activation_layers == 4);
    for (auto peak : rb.peak_per_block) CHECK(peak == 4);
    CHECK(rb.counters.layer_evals_forward == 12 * K);
    CHECK(rb.counters.layer_evals_backward == 12 * K);
    CHECK(rb.iterations_per_block == std::vector<std::size_t>{K, K, K});

    ConvertedModel whole = point_model(12, 1);
    DenoiserNet& net = whole.block(1).net();
    const TrainRecord re = train_end_to_end(net, mixture_source(), NoiseConfig{}, LossObjective{}, quick(K));
    CHECK(re.counters.peak_stored_activation_layers == 12);
    CHECK(re.counters.layer_evals_forward == 12 * K);
    CHECK(rb.counters.layer_evals_forward == re.counters.layer_evals_forward);
    CHECK(rb.counters.peak_stored_activation_layers * 12 == re.counters.peak_stored_activation_layers * 4);
}

TEST_CASE("block isolation") {
    ConvertedModel m = point_model(6, 3, 4, 0.1);
    std::vector<std::vector<Matrix>> before;
    for (std::size_t b = 1; b <= 3; ++b) before.push_back(snapshot(m.block(b).parameters()));

    TrainConfig cfg = quick(1000, BlockSampling::forced);
    cfg.forced_block = 2;
    train_blockwise(m, mixture_source(), NoiseConfig{}, LossObjective{}, cfg);
    CHECK(identical(before[0], snapshot(m.block(1).parameters())));
    CHECK_FALSE(identical(before[1], snapshot(m.block(2).parameters())));
    CHECK(identical(before[2], snapshot(m.block(3).parameters())));

    // per iteration, exactly the sampled block changes
    ConvertedModel u = point_model(6, 3, 5);
    for (std::size_t it = 0; it < 12; ++it) {
        std::vector<std::vector<Matrix>> prev;
        for (std::size_t b = 1; b <= 3; ++b) prev.push_back(snapshot(u.block(b).parameters()));
        TrainConfig one = quick(1, BlockSampling::forced);
        one.forced_block = it % 3 + 1;
        one.seed = it;
        train_blockwise(u, mixture_source(), NoiseConfig{}, LossObjective{}, one);
        for (std::size_t b = 1; b <= 3; ++b) {
            CHECK(identical(prev[b - 1], snapshot(u.block(b).parameters())) == (b != one.forced_block));
        }
    }
}

TEST_CASE("single block training equals end-to-end training") {
    ConvertedModel a = point_model(3, 1, 6);
    ConvertedModel b = point_model(3, 1, 6);
    REQUIRE(identical(snapshot(a.parameters()), snapshot(b.parameters())));
    TrainConfig cfg = quick(100, BlockSampling::uniform);
    const TrainRecord ra = train_blockwise(a, mixture_source(), NoiseConfig{}, LossObjective{}, cfg);
    const TrainRecord rb = train_end_to_end(b.block(1).net(), mixture_source(), NoiseConfig{}, LossObjective{}, cfg);
    CHECK(identical(snapshot(a.parameters()), snapshot(b.parameters())));
    REQUIRE(ra.rows.size() == rb.rows.size());
    for (std::size_t i = 0; i < ra.rows.size(); ++i) CHECK(ra.rows[i].weighted_loss == rb.rows[i].weighted_loss);
}

TEST_CASE("determinism") {
    auto run = [](bool parallel) {
        ConvertedModel m = point_model(4, 2, 7);
        TrainConfig cfg = quick(40, BlockSampling::uniform);
        cfg.parallel = parallel;
        cfg.threads = 2;
        const TrainRecord r = train_blockwise(m, mixture_source(), NoiseConfig{}, LossObjective{}, cfg);
        return std::make_pair(r, snapshot(m.parameters()));
    };
    for (bool parallel : {false, true}) {
        const auto [r1, p1] = run(parallel);
        const auto [r2, p2] = run(parallel);
        CHECK(identical(p1, p2));
        REQUIRE(r1.rows.size() == r2.rows.size());
        for (std::size_t i = 0; i < r1.rows.size(); ++i) {
            CHECK(r1.rows[i].block == r2.rows[i].block);
            CHECK(r1.rows[i].weighted_loss == r2.rows[i].weighted_loss);
        }
        CHECK(r1.counters.layer_evals_forward == r2.counters.layer_evals_forward);
    }
}

TEST_CASE("recurrent single pass versus unrolled") {
    const std::size_t K = 8;
    ConvertedModel a = point_model(2, 1, 8);
    ConvertedModel b = point_model(2, 1, 8);
    TrainConfig cfg = quick(10, BlockSampling::uniform);
    const TrainRecord rs = train_recurrent_single_pass(a.block(1).net(), mixture_source(), NoiseConfig{},
                                                       LossObjective{}, cfg);
    const TrainRecord ru = train_unrolled(b.block(1).net(), mixture_source(), NoiseConfig{}, K, cfg);
    CHECK(rs.counters.layer_evals_forward * K == ru.counters.layer_evals_forward);
    CHECK(rs.counters.layer_evals_forward == 2 * 10);
    CHECK(rs.counters.peak_stored_activation_layers == 2);
    CHECK(ru.counters.peak_stored_activation_layers == 2 * K);

    // single pass equals one-block training under the same seed
    ConvertedModel c = point_model(2, 1, 8);
    train_blockwise(c, mixture_source(), NoiseConfig{}, LossObjective{}, cfg);
    CHECK(identical(snapshot(a.parameters()), snapshot(c.parameters())));
}

TEST_CASE("unrolled loss gradient check") {
    std::mt19937_64 rng(9);
    ConvertedModel m = point_model(1, 1, 9);
    for (const auto& p : m.parameters()) {
        Tensor t = p.tensor;
        t.mutable_value() = normal_matrix(t.rows(), t.cols(), 0.3, rng);
    }
    DenoisingBatch batch;
    batch.groups = 3;
    batch.y = sample_mixture2d(3, rng);
    const auto report = grad_check(
        [&] {
            std::mt19937_64 noise(10);
            return unrolled_loss(m.block(1).net(), batch, NoiseConfig{}, 3, noise).loss;
        },
        m.parameters());
    CHECK(report.max_error() < 1e-4);
}

TEST_CASE("train record output") {
    ConvertedModel m = point_model(2, 2, 11);
    const TrainRecord r = train_blockwise(m, mixture_source(), NoiseConfig{}, LossObjective{}, quick(6));
    const auto path = std::filesystem::temp_directory_path() / "dblocks_train_record.csv";
    r.write_csv(path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header.find("iteration") != std::string::npos);
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == 6);
    std::filesystem::remove(path);

    TrainConfig bad = quick(1, BlockSampling::forced);
    bad.forced_block = 3;
    CHECK_THROWS_AS(train_blockwise(m, mixture_source(), NoiseConfig{}, LossObjective{}, bad), std::invalid_argument);
}

TEST_CASE("non-finite losses stop training") {
    ConvertedModel m = point_model(2, 1, 12);
    std::vector<TrainUnit> units{{m.parameters(), [&](std::mt19937_64&, std::mt19937_64&, Counters*) {
                                      Tensor w = m.parameters()[0].tensor;
                                      return StepLoss{sum(w) * std::numeric_limits<double>::infinity(), 0.0, 0.0};
                                  }}};
    CHECK_THROWS_AS(train_units(units, quick(1)), NumericError);
}

}  // TEST_SUITE
