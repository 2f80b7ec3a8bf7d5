#include "doctest.h"
#include "helpers.hpp"

#include "dblocks/masked_blocks.hpp"
#include "dblocks/tasks.hpp"

#include <cmath>

using namespace dblocks;

namespace {

constexpr int kVocab = 27;

std::vector<int> random_ids(std::size_t count, std::mt19937_64& rng, int vocab = kVocab) {
    std::uniform_int_distribution<int> u(0, vocab - 1);
    std::vector<int> ids(count);
    for (auto& v : ids) v = u(rng);
    return ids;
}

MaskedPredictor uniform_predictor(int vocab = kVocab) {
    return [vocab](const std::vector<int>&, Index, const std::vector<double>&, const std::vector<Index>& rows) {
        return Tensor(Matrix::Zero(static_cast<Index>(rows.size()), vocab));
    };
}

// Knows the clean ids of every row it will be asked about.
MaskedPredictor memorizing_predictor(std::vector<int> x0, int vocab = kVocab) {
    return [x0 = std::move(x0), vocab](const std::vector<int>&, Index, const std::vector<double>&,
                                       const std::vector<Index>& rows) {
        Matrix logits = Matrix::Constant(static_cast<Index>(rows.size()), vocab, -1e3);
        for (std::size_t r = 0; r < rows.size(); ++r) logits(static_cast<Index>(r), x0[static_cast<std::size_t>(rows[r])]) = 0.0;
        return Tensor(std::move(logits));
    };
}

std::vector<LayerSpec> small_layers() {
    LayerSpec attn;
    attn.kind = LayerKind::attention;
    attn.width = 8;
    attn.heads = 2;
    attn.mlp_ratio = 2;
    LayerSpec mlp = attn;
    mlp.kind = LayerKind::mlp;
    return {attn, mlp};
}

void randomize(const ParameterList& params, std::mt19937_64& rng) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.mutable_value() = normal_matrix(t.rows(), t.cols(), 0.3, rng);
    }
}

// Exact-count masks at every node, shared by all evaluations.
std::vector<MaskedBatch> node_masks(const std::vector<int>& x0, Index length, const QuadratureNodes& nodes,
                                    const MaskSchedule& schedule, std::mt19937_64& rng) {
    std::vector<MaskedBatch> masks;
    for (double t : nodes.t) masks.push_back(mask_exact_count(x0, length, t, kVocab, schedule, rng));
    return masks;
}

QuadratureNodes concat(const std::vector<QuadratureNodes>& parts) {
    QuadratureNodes all;
    for (const auto& p : parts) {
        all.t.insert(all.t.end(), p.t.begin(), p.t.end());
        all.weight.insert(all.weight.end(), p.weight.begin(), p.weight.end());
    }
    return all;
}

}  // namespace

TEST_SUITE("masked_blocks") {

TEST_CASE("linear schedule") {
    const MaskSchedule s = MaskSchedule::linear();
    CHECK(s.alpha(0.0) == 1.0);
    CHECK(s.alpha(1.0) == 0.0);
    for (double t = 0.0; t < 1.0; t += 0.01) CHECK(s.alpha(t + 0.01) < s.alpha(t));
    CHECK(s.weight(0.25) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(s.masked_fraction_time(0.3) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("time boundaries examples") {
    const MaskSchedule s = MaskSchedule::linear();
    CHECK(time_boundaries(s, 4) == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
    CHECK(time_boundaries(s, 1) == std::vector<double>{0.0, 1.0});
    for (std::size_t B = 1; B <= 9; ++B) {
        const auto t = time_boundaries(s, B);
        REQUIRE(t.size() == B + 1);
        for (std::size_t b = 1; b <= B; ++b) {
            CHECK(t[b - 1] < t[b]);
            CHECK(std::abs(s.alpha(t[b - 1]) - s.alpha(t[b]) - 1.0 / static_cast<double>(B)) < 1e-15);
        }
    }
    CHECK_THROWS(time_boundaries(s, 0));
}

TEST_CASE("time block selection") {
    const auto t = time_boundaries(MaskSchedule::linear(), 4);
    CHECK(select_time_block(t, 0.0) == 1);
    CHECK(select_time_block(t, 0.25) == 1);
    CHECK(select_time_block(t, std::nextafter(0.25, 1.0)) == 2);
    CHECK(select_time_block(t, 1.0) == 4);
    CHECK_THROWS(select_time_block(t, 1.5));
}

TEST_CASE("forward masking examples") {
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(1);
    const Index n = 100;
    const std::vector<int> x0 = random_ids(1000 * n, rng);

    const MaskedBatch none = mask_forward(x0, n, std::vector<double>(1000, 0.0), kVocab, s, rng);
    CHECK(none.xt == x0);
    CHECK(none.masked_rows().empty());
    const MaskedBatch all = mask_forward(x0, n, std::vector<double>(1000, 1.0), kVocab, s, rng);
    CHECK(static_cast<std::size_t>(std::count(all.xt.begin(), all.xt.end(), kVocab)) == x0.size());

    const MaskedBatch half = mask_forward(x0, n, std::vector<double>(1000, 0.5), kVocab, s, rng);
    const double fraction = static_cast<double>(half.masked_rows().size()) / static_cast<double>(x0.size());
    CHECK(std::abs(fraction - 0.5) < 0.01);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (half.masked[i]) {
            REQUIRE(half.xt[i] == kVocab);
        } else {
            REQUIRE(half.xt[i] == x0[i]);
        }
    }

    const MaskedBatch exact = mask_exact_count(x0, n, 0.37, kVocab, s, rng);
    for (Index seq = 0; seq < 1000; ++seq) {
        const auto first = exact.xt.begin() + seq * n;
        REQUIRE(std::count(first, first + n, kVocab) == 37);
    }
    CHECK_THROWS(mask_forward(x0, 7, std::vector<double>(1000, 0.5), kVocab, s, rng));
}

TEST_CASE("uniform predictor loss is analytic") {
    // Midpoints t with n t integral, so exact-count masks hold n t tokens and
    // each node contributes (1/t) * n t * ln V * width.
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(2);
    const Index n = 64;
    const std::size_t B = 4;
    const std::vector<int> x0 = random_ids(5 * static_cast<std::size_t>(n), rng);
    const auto bounds = time_boundaries(s, B);
    std::vector<QuadratureNodes> parts;
    double total = 0.0;
    for (std::size_t b = 1; b <= B; ++b) {
        parts.push_back(midpoint_nodes(bounds[b - 1], bounds[b], 8));
        const auto masks = node_masks(x0, n, parts.back(), s, rng);
        const double loss = block_loss_masked(uniform_predictor(), parts.back(), masks, s).item();
        CHECK(std::abs(loss - std::log(27.0) * n / static_cast<double>(B)) < 1e-6);
        total += loss;
    }
    CHECK(std::abs(total - std::log(27.0) * 64.0) < 1e-6);

    const QuadratureNodes all = concat(parts);
    const auto masks = node_masks(x0, n, all, s, rng);
    const double global = global_loss_masked({uniform_predictor()}, {0.0, 1.0}, all, masks, s).item();
    CHECK(std::abs(global - std::log(27.0) * 64.0) < 1e-6);
}

TEST_CASE("oracle predictor loss is zero") {
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(3);
    const std::vector<int> x0 = random_ids(4 * 16, rng);
    const QuadratureNodes nodes = midpoint_nodes(0.0, 1.0, 10);
    const auto masks = node_masks(x0, 16, nodes, s, rng);
    CHECK(block_loss_masked(memorizing_predictor(x0), nodes, masks, s).item() == 0.0);
}

TEST_CASE("global loss decomposes over blocks") {
    const MaskSchedule s = MaskSchedule::linear();
    for (std::uint64_t seed : {4u, 5u}) {
        std::mt19937_64 rng(seed);
        const Index n = 12;
        const std::size_t B = 4;
        const std::vector<int> x0 = random_ids(3 * static_cast<std::size_t>(n), rng);
        std::vector<MaskedDenoiser> models;
        std::vector<MaskedPredictor> predictors;
        for (std::size_t b = 1; b <= B; ++b) {
            models.emplace_back("block" + std::to_string(b) + ".", small_layers(), kVocab, n, rng);
            randomize(models.back().parameters(), rng);
        }
        for (const auto& m : models) predictors.push_back(m.predictor());

        const auto bounds = time_boundaries(s, B);
        std::vector<QuadratureNodes> parts;
        for (std::size_t b = 1; b <= B; ++b) parts.push_back(midpoint_nodes(bounds[b - 1], bounds[b], 3));
        const QuadratureNodes all = concat(parts);
        const auto masks = node_masks(x0, n, all, s, rng);

        double sum = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const std::vector<MaskedBatch> own(masks.begin() + 3 * static_cast<long>(b),
                                               masks.begin() + 3 * static_cast<long>(b + 1));
            sum += block_loss_masked(predictors[b], parts[b], own, s).item();
        }
        const double global = global_loss_masked(predictors, bounds, all, masks, s).item();
        CHECK(std::abs(sum - global) <= 1e-12 * std::abs(global));

        // one shared model: B = 1 and B = 4 routing agree
        const std::vector<MaskedPredictor> shared(B, predictors[0]);
        const double one = global_loss_masked({predictors[0]}, {0.0, 1.0}, all, masks, s).item();
        const double four = global_loss_masked(shared, bounds, all, masks, s).item();
        CHECK(std::abs(one - four) <= 1e-12 * std::abs(one));
    }
    const QuadratureNodes empty;
    CHECK(global_loss_masked({uniform_predictor()}, {0.0, 1.0}, empty, {}, s).item() == 0.0);
}

TEST_CASE("masked block gradients stay in their block") {
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(6);
    const Index n = 8;
    const std::vector<int> x0 = random_ids(4 * static_cast<std::size_t>(n), rng);
    MaskedDenoiser a("block1.", small_layers(), kVocab, n, rng);
    MaskedDenoiser b("block2.", small_layers(), kVocab, n, rng);
    randomize(a.parameters(), rng);
    randomize(b.parameters(), rng);
    const QuadratureNodes nodes = midpoint_nodes(0.5, 1.0, 2);
    const auto masks = node_masks(x0, n, nodes, s, rng);
    backward(block_loss_masked(b.predictor(), nodes, masks, s));
    for (const auto& p : a.parameters()) CHECK_FALSE(p.tensor.has_grad());
    double own = 0.0;
    for (const auto& p : b.parameters()) {
        if (p.tensor.has_grad()) own += p.tensor.grad().squaredNorm();
    }
    CHECK(own > 0.0);
}

TEST_CASE("masked loss gradient check") {
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(7);
    const Index n = 5;
    const std::vector<int> x0 = random_ids(2 * static_cast<std::size_t>(n), rng);
    MaskedDenoiser m("block1.", small_layers(), kVocab, n, rng);
    randomize(m.parameters(), rng);
    const QuadratureNodes nodes = midpoint_nodes(0.0, 1.0, 2);
    const auto masks = node_masks(x0, n, nodes, s, rng);
    const auto report = grad_check([&] { return block_loss_masked(m.predictor(), nodes, masks, s); }, m.parameters());
    CHECK(report.max_error() < 1e-4);
}

TEST_CASE("Monte Carlo loss of a fresh model") {
    // A zero head predicts uniformly, so E[loss] = n ln V (t_hi - t_lo).
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(8);
    const Index n = 16;
    const std::vector<int> x0 = random_ids(4000 * static_cast<std::size_t>(n), rng);
    MaskedDenoiser fresh("block1.", small_layers(), kVocab, n, rng);
    const auto r = masked_mc_loss(fresh, x0, n, 0.5, 1.0, s, rng);
    CHECK(r.loss.item() == doctest::Approx(std::log(27.0) * 16.0 * 0.5).epsilon(0.03));
    CHECK(r.mean_t == doctest::Approx(0.75).epsilon(0.01));
}

TEST_CASE("demasking examples") {
    const MaskSchedule s = MaskSchedule::linear();
    std::mt19937_64 rng(9);
    const Index n = 20;
    const Index sequences = 3;
    const std::vector<int> target = random_ids(static_cast<std::size_t>(sequences * n), rng);
    const auto bounds = time_boundaries(s, 2);

    // Records every state it is shown so monotone commitment can be checked.
    std::vector<std::vector<int>> seen;
    const MaskedPredictor memo = memorizing_predictor(target);
    const MaskedPredictor spy = [&](const std::vector<int>& xt, Index len, const std::vector<double>& t,
                                    const std::vector<Index>& rows) {
        seen.push_back(xt);
        return memo(xt, len, t, rows);
    };
    for (std::size_t steps : {std::size_t{2}, std::size_t{7}, std::size_t{20}}) {
        seen.clear();
        std::vector<DemaskStep> trace;
        const auto out = demask_sample({spy, spy}, bounds, sequences, n, kVocab, steps, s, rng,
                                       CommitRule::argmax, &trace);
        CHECK(out == target);
        CHECK(std::count(out.begin(), out.end(), kVocab) == 0);
        REQUIRE(trace.size() == steps);
        Index previous = 0;
        for (const auto& step : trace) {
            CHECK(step.unmasked >= previous);
            CHECK(std::abs(static_cast<double>(step.unmasked) / n - s.alpha(step.t_next)) <= 1.0 / n);
            CHECK(step.block == select_time_block(bounds, step.t));
            previous = step.unmasked;
        }
        for (std::size_t k = 1; k < seen.size(); ++k) {
            for (std::size_t i = 0; i < target.size(); ++i) {
                if (seen[k - 1][i] != kVocab) REQUIRE(seen[k][i] == seen[k - 1][i]);
            }
        }
    }
}

TEST_CASE("exact Markov conditionals reach the sequence entropy") {
    // Bernoulli masks at midpoint nodes: the bound converges to H(X_1..n) / n.
    const MarkovSource& src = char_source();
    const Index n = 32;
    const CharCorpus corpus = gen_char_corpus(10, 200000);
    const auto sequences = corpus_sequences(corpus.ids, n, 256);
    const double marginal = src.marginal_entropy_bits;
    const double exact = (marginal + (n - 1) * src.entropy_rate_bits) / n;
    std::mt19937_64 rng(11);
    const MaskedPredictor oracle = markov_masked_oracle(src);
    const double bpc = masked_bits_per_char({oracle, oracle}, time_boundaries(MaskSchedule::linear(), 2), sequences,
                                            n, kVocab, 64, MaskSchedule::linear(), rng);
    CHECK(std::abs(bpc - exact) < 0.02);
    CHECK(bpc < src.entropy_rate_bits + 0.2);
}

}  // TEST_SUITE
