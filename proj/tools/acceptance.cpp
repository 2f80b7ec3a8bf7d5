// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all pass.
//   acceptance            all nine criteria
//   acceptance 1 3 9      a subset
#include "dblocks/run.hpp"
#include "dblocks/tasks.hpp"
#include "dblocks/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace dblocks;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets.

constexpr double kMassTol = 1e-6;
constexpr double kBoundaryRelTol = 1e-6;
constexpr double kPartitionSeconds = 1.0;

constexpr double kOracleRelTol = 1e-9;
constexpr double kOracleSeconds = 1.0;

constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradSeconds = 30.0;

constexpr std::size_t kIsolationIterations = 1000;
constexpr double kIsolationSeconds = 60.0;
constexpr double kAccountingSeconds = 60.0;

constexpr double kDecompositionTol = 1e-12;
constexpr double kUniformLossTol = 1e-6;
constexpr double kMaskedSeconds = 10.0;

constexpr double kMixtureRelTol = 0.25;
constexpr double kMixtureSeconds = 300.0;
constexpr double kAccuracyDrop = 0.02;
constexpr double kAccuracyFloor = 0.95;
constexpr double kBpcGap = 0.05;
constexpr double kBpcToRate = 0.2;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

constexpr std::size_t kEquivalenceIterations = 100;
constexpr double kEquivalenceSeconds = 30.0;

constexpr std::size_t kRecurrentK = 8;
constexpr double kRecurrentRelTol = 0.30;
constexpr double kRecurrentSeconds = 300.0;

// ---------------------------------------------------------------------------

struct Verdict {
    bool pass = true;
    std::string detail;
};

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : "/") + fmt(x);
    return s;
}

bool same_bits(const ParameterList& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Matrix& m = a[i].tensor.value();
        if (m.rows() != b[i].rows() || m.cols() != b[i].cols()) return false;
        if (m.size() && std::memcmp(m.data(), b[i].data(), sizeof(double) * static_cast<std::size_t>(m.size())) != 0) {
            return false;
        }
    }
    return true;
}

std::vector<Matrix> snapshot(const ParameterList& params) {
    std::vector<Matrix> out;
    for (const auto& p : params) out.push_back(p.tensor.value());
    return out;
}

void randomize(const ParameterList& params, std::mt19937_64& rng, double scale = 0.3) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.mutable_value() = normal_matrix(t.rows(), t.cols(), scale, rng);
    }
}

LayerSpec layer(LayerKind kind, Index width, bool conditioning = true) {
    LayerSpec s;
    s.kind = kind;
    s.width = width;
    s.heads = 2;
    s.mlp_ratio = 2;
    s.conditioning = conditioning;
    return s;
}

std::vector<LayerSpec> mlp_stack(std::size_t n, Index width) {
    return std::vector<LayerSpec>(n, layer(LayerKind::mlp, width));
}

TokenShape point_shape(Index width) {
    TokenShape shape;
    shape.width = width;
    shape.z_tokens = 1;
    shape.z_dim = 2;
    return shape;
}

// Adaptive Simpson, used as an independent quadrature oracle.
double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
    const std::function<double(double, double, double, double, double, double, double, int)> rec =
        [&](double lo, double hi, double flo, double fmid, double fhi, double whole, double eps, int depth) {
            const double mid = 0.5 * (lo + hi);
            const double flm = f(0.5 * (lo + mid)), frm = f(0.5 * (mid + hi));
            const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
            const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
            if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * eps) {
                return left + right + (left + right - whole) / 15.0;
            }
            return rec(lo, mid, flo, flm, fmid, left, eps / 2.0, depth - 1) +
                   rec(mid, hi, fmid, frm, fhi, right, eps / 2.0, depth - 1);
        };
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return rec(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50);
}

// ---------------------------------------------------------------------------
// 1. Equi-probability partition.

Verdict criterion_partition() {
    const Timer timer;
    const NoiseConfig cfg;
    // Density of ln(sigma) under the noise law, integrated over [ln lo, ln hi].
    const auto density = [&](double u) {
        const double s = (u - cfg.p_mean) / cfg.p_std;
        return std::exp(-0.5 * s * s) / (cfg.p_std * std::sqrt(2.0 * M_PI));
    };
    const auto mass = [&](double lo, double hi) { return integrate(density, std::log(lo), std::log(hi), 1e-14); };
    const double total = mass(cfg.sigma_min, cfg.sigma_max);

    double worst_mass = 0.0, worst_boundary = 0.0;
    for (std::size_t B : {2, 3, 4, 6}) {
        const Partition p = partition_boundaries(cfg, B);
        for (std::size_t b = 1; b <= B; ++b) {
            const double m = mass(p.boundaries[b], p.boundaries[b - 1]) / total;
            worst_mass = std::max(worst_mass, std::abs(m - 1.0 / static_cast<double>(B)));
        }
        // Bisection in ln(sigma) on the quadrature CDF measured from sigma_max.
        for (std::size_t b = 1; b < B; ++b) {
            const double target = static_cast<double>(b) / static_cast<double>(B);
            double lo = std::log(cfg.sigma_min), hi = std::log(cfg.sigma_max);
            for (int it = 0; it < 60; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (mass(std::exp(mid), cfg.sigma_max) / total > target) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            const double bisected = std::exp(0.5 * (lo + hi));
            worst_boundary = std::max(worst_boundary, std::abs(p.boundaries[b] - bisected) / bisected);
        }
    }
    const double secs = timer.seconds();
    return {worst_mass <= kMassTol && worst_boundary <= kBoundaryRelTol && secs < kPartitionSeconds,
            "max |mass - 1/B| " + fmt(worst_mass, 3) + ", max boundary rel err " + fmt(worst_boundary, 3) + ", " +
                fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Oracle denoiser maps y + sigma_max eps to y + sigma_min eps.

Verdict criterion_oracle_sampling() {
    const Timer timer;
    const NoiseConfig cfg;
    std::mt19937_64 rng(2);
    const Matrix y = normal_matrix(16, 2, 1.0, rng);
    const Matrix eps = normal_matrix(16, 2, 1.0, rng);
    const DenoiseFn oracle = [&y](std::size_t, const Matrix&, const Matrix&, double) { return y; };
    double worst = 0.0;
    for (std::size_t B : {1, 2, 3, 4, 6}) {
        const Partition p = partition_boundaries(cfg, B);
        for (std::size_t T : {B, std::size_t{50}}) {
            const Matrix out = euler_sample(oracle, p, cfg, Matrix(0, 0), y + cfg.sigma_max * eps, T);
            const Matrix expected = y + cfg.sigma_min * eps;
            worst = std::max(worst, (out - expected).norm() / expected.norm());
        }
    }
    const double secs = timer.seconds();
    return {worst < kOracleRelTol && secs < kOracleSeconds,
            "max rel err " + fmt(worst, 3) + " over B in {1,2,3,4,6}, T in {B,50}, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient checks.

Verdict criterion_gradients() {
    const Timer timer;
    const NoiseConfig cfg;
    std::mt19937_64 rng(3);
    std::vector<std::pair<std::string, double>> results;
    const auto check = [&](const std::string& name, const std::function<Tensor()>& f, const ParameterList& params) {
        results.emplace_back(name, grad_check(f, params, kGradStep).max_error());
    };

    // Each residual layer kind, with and without noise conditioning.
    AttentionMask causal(3, 3);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j) causal(i, j) = j <= i;
    const Matrix x = normal_matrix(6, 4, 1.0, rng), w = normal_matrix(6, 4, 1.0, rng);
    for (LayerKind kind : {LayerKind::attention, LayerKind::mlp}) {
        for (bool cond : {true, false}) {
            ParameterList params;
            NoiseEmbedding embed(params, "e", 4, rng);
            ResidualLayer res(params, "l", layer(kind, 4, cond), rng);
            randomize(params, rng, 0.5);
            const Matrix c_noise = normal_matrix(2, 1, 1.0, rng);
            check(std::string(to_string(kind)) + (cond ? "+adaln" : ""),
                  [&] {
                      Tensor c = embed(c_noise);
                      return sum(res.forward(Tensor(x), cond ? &c : nullptr, TokenLayout{3, &causal}) * Tensor(w));
                  },
                  params);
        }
    }

    // Whole denoiser with conditioning tokens: squared error and cross-entropy.
    const int classes = 4;
    TiedHead head{label_embeddings(classes)};
    TokenShape shape;
    shape.width = 8;
    shape.x_tokens = 2;
    shape.x_dim = 2;
    shape.z_tokens = 1;
    shape.z_dim = head.embeddings.cols();
    DenoiserNet net("net", {layer(LayerKind::attention, 8), layer(LayerKind::mlp, 8)}, shape, rng);
    randomize(net.parameters(), rng);
    DenoisingBatch batch;
    batch.groups = 3;
    batch.x = normal_matrix(6, 2, 1.0, rng);
    batch.labels = {0, 3, 1};
    batch.y = Matrix(3, shape.z_dim);
    for (Index i = 0; i < 3; ++i) batch.y.row(i) = head.embeddings.row(batch.labels[static_cast<std::size_t>(i)]);
    std::mt19937_64 noise_rng(4);
    const NoiseDraw draw = draw_noise(cfg, {0.05, 5.0}, 3, 1, shape.z_dim, noise_rng);
    check("denoiser squared_error",
          [&] { return denoising_loss(net, batch, cfg, draw, LossObjective{}, nullptr).loss; }, net.parameters());
    LossObjective ce;
    ce.kind = LossKind::cross_entropy;
    ce.head = &head;
    check("denoiser cross_entropy", [&] { return denoising_loss(net, batch, cfg, draw, ce, nullptr).loss; },
          net.parameters());

    // Looped denoiser used by the unrolled baseline.
    DenoiserNet shared("shared", mlp_stack(1, 4), point_shape(4), rng);
    randomize(shared.parameters(), rng);
    DenoisingBatch points;
    points.groups = 3;
    points.y = sample_mixture2d(3, rng);
    check("unrolled K=3",
          [&] {
              std::mt19937_64 r(5);
              return unrolled_loss(shared, points, cfg, 3, r).loss;
          },
          shared.parameters());

    // Standard classifier head.
    ClassifierNet clf("clf", {layer(LayerKind::attention, 8, false), layer(LayerKind::mlp, 8, false)}, 2, 2, classes,
                      rng);
    randomize(clf.parameters(), rng);
    check("classifier cross_entropy",
          [&] { return -mean(pick(log_softmax(clf.logits(batch.x, 3)), batch.labels)); }, clf.parameters());

    // Masked token denoiser.
    const MaskSchedule schedule = MaskSchedule::linear();
    const Index n = 5;
    std::vector<int> ids(2 * n);
    for (auto& v : ids) v = static_cast<int>(rng() % 27);
    MaskedDenoiser masked("m", {layer(LayerKind::attention, 8), layer(LayerKind::mlp, 8)}, 27, n, rng);
    randomize(masked.parameters(), rng);
    const QuadratureNodes nodes = midpoint_nodes(0.0, 1.0, 2);
    std::vector<MaskedBatch> masks;
    for (double t : nodes.t) masks.push_back(mask_exact_count(ids, n, t, 27, schedule, rng));
    check("masked cross_entropy",
          [&] { return block_loss_masked(masked.predictor(), nodes, masks, schedule); }, masked.parameters());

    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, err] : results) {
        if (err >= worst) {
            worst = err;
            worst_name = name;
        }
    }
    const double secs = timer.seconds();
    return {worst < kGradTol && secs < kGradSeconds,
            std::to_string(results.size()) + " checks, max rel err " + fmt(worst, 3) + " (" + worst_name + "), " +
                fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 4. Block independence.

Verdict criterion_isolation() {
    const Timer timer;
    const NoiseConfig cfg;
    std::size_t leaks = 0, checked = 0;
    for (std::uint64_t seed : {4u, 5u, 6u}) {
        std::mt19937_64 rng(seed);
        ConvertOptions opts;
        opts.blocks = 3;
        opts.gamma = 0.1;
        opts.seed = seed;
        ConvertedModel m = convert(mlp_stack(6, 8), point_shape(8), cfg, opts);
        randomize(m.parameters(), rng);
        DenoisingBatch batch;
        batch.groups = 16;
        batch.y = sample_mixture2d(16, rng);
        for (std::size_t b = 1; b <= 3; ++b) {
            zero_grads(m.parameters());
            backward(block_loss(m.block(b), batch, cfg, LossObjective{}, rng).loss);
            for (std::size_t other = 1; other <= 3; ++other) {
                if (other == b) continue;
                for (const auto& p : m.block(other).parameters()) {
                    ++checked;
                    if (p.tensor.has_grad() && p.tensor.grad().cwiseAbs().maxCoeff() != 0.0) ++leaks;
                }
            }
        }
    }

    ConvertOptions opts;
    opts.blocks = 3;
    opts.gamma = 0.1;
    opts.seed = 7;
    ConvertedModel m = convert(mlp_stack(6, 8), point_shape(8), cfg, opts);
    std::vector<std::vector<Matrix>> before;
    for (std::size_t b = 1; b <= 3; ++b) before.push_back(snapshot(m.block(b).parameters()));
    TrainConfig train;
    train.steps = kIsolationIterations;
    train.batch_size = 16;
    train.learning_rate = 1e-2;
    train.seed = 7;
    train.block_sampling = BlockSampling::forced;
    train.forced_block = 2;
    train_blockwise(m, mixture_source(), cfg, LossObjective{}, train);
    const bool frozen = same_bits(m.block(1).parameters(), before[0]) && same_bits(m.block(3).parameters(), before[2]);
    const bool trained = !same_bits(m.block(2).parameters(), before[1]);

    const double secs = timer.seconds();
    return {leaks == 0 && frozen && trained && secs < kIsolationSeconds,
            std::to_string(leaks) + " nonzero cross-block gradients of " + std::to_string(checked) +
                "; unsampled blocks " + (frozen ? "bit-identical" : "CHANGED") + " after " +
                std::to_string(kIsolationIterations) + " iterations, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 5. Memory and compute accounting.

Verdict criterion_accounting() {
    const Timer timer;
    const NoiseConfig cfg;
    const std::size_t L = 12, B = 3, K = 5;
    TrainConfig train;
    train.steps = B * K;
    train.batch_size = 8;
    train.seed = 3;
    train.block_sampling = BlockSampling::round_robin;

    ConvertOptions opts;
    opts.blocks = B;
    ConvertedModel blocks = convert(mlp_stack(L, 4), point_shape(4), cfg, opts);
    const TrainRecord rb = train_blockwise(blocks, mixture_source(), cfg, LossObjective{}, train);
    ConvertedModel whole = convert(mlp_stack(L, 4), point_shape(4), cfg, ConvertOptions{});
    train.steps = K;
    const TrainRecord re = train_end_to_end(whole.block(1).net(), mixture_source(), cfg, LossObjective{}, train);

    std::mt19937_64 rng(5);
    std::vector<SampleTraceRow> trace_b, trace_e;
    sample(blocks, Matrix(0, 0), 2, 50, cfg, rng, &trace_b);
    sample(whole, Matrix(0, 0), 2, 50, cfg, rng, &trace_e);
    std::uint64_t evals_b = 0, evals_e = 0;
    for (const auto& r : trace_b) evals_b += r.layer_evals;
    for (const auto& r : trace_e) evals_e += r.layer_evals;

    const bool peaks = rb.counters.peak_stored_activation_layers == 4 && re.counters.peak_stored_activation_layers == 12;
    const bool parity = rb.counters.layer_evals_forward == K * L && re.counters.layer_evals_forward == K * L &&
                        rb.iterations_per_block == std::vector<std::size_t>(B, K);
    const bool inference = evals_b == 200 && evals_e == 600;
    const double secs = timer.seconds();
    std::ostringstream d;
    d << "peak " << rb.counters.peak_stored_activation_layers << " vs " << re.counters.peak_stored_activation_layers
      << "; train evals " << rb.counters.layer_evals_forward << " vs " << re.counters.layer_evals_forward
      << " (K*L = " << K * L << "); T=50 inference evals " << evals_b << " vs " << evals_e << ", " << fmt(secs, 3)
      << " s";
    return {peaks && parity && inference && secs < kAccountingSeconds, d.str()};
}

// ---------------------------------------------------------------------------
// 6. Masked-diffusion decomposition.

Verdict criterion_masked() {
    const Timer timer;
    const MaskSchedule s = MaskSchedule::linear();
    const int vocab = 27;
    std::mt19937_64 rng(6);

    bool exact_bounds = true;
    for (std::size_t B = 1; B <= 8; ++B) {
        const auto t = time_boundaries(s, B);
        for (std::size_t b = 0; b <= B; ++b) {
            exact_bounds &= t[b] == static_cast<double>(b) / static_cast<double>(B);
        }
    }

    const Index n = 12;
    const std::size_t B = 4, per_block = 3;
    std::vector<int> x0(3 * n);
    for (auto& v : x0) v = static_cast<int>(rng() % vocab);
    std::vector<MaskedDenoiser> models;
    std::vector<MaskedPredictor> predictors;
    for (std::size_t b = 1; b <= B; ++b) {
        models.emplace_back("block" + std::to_string(b), std::vector<LayerSpec>{layer(LayerKind::attention, 8)}, vocab,
                            n, rng);
        randomize(models.back().parameters(), rng);
    }
    for (const auto& m : models) predictors.push_back(m.predictor());
    const auto bounds = time_boundaries(s, B);
    QuadratureNodes all;
    std::vector<QuadratureNodes> parts;
    for (std::size_t b = 1; b <= B; ++b) {
        parts.push_back(midpoint_nodes(bounds[b - 1], bounds[b], per_block));
        all.t.insert(all.t.end(), parts.back().t.begin(), parts.back().t.end());
        all.weight.insert(all.weight.end(), parts.back().weight.begin(), parts.back().weight.end());
    }
    std::vector<MaskedBatch> masks;
    for (double t : all.t) masks.push_back(mask_exact_count(x0, n, t, vocab, s, rng));
    double sum_blocks = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const std::vector<MaskedBatch> own(masks.begin() + static_cast<long>(b * per_block),
                                           masks.begin() + static_cast<long>((b + 1) * per_block));
        sum_blocks += block_loss_masked(predictors[b], parts[b], own, s).item();
    }
    const double global = global_loss_masked(predictors, bounds, all, masks, s).item();
    const double decomposition = std::abs(sum_blocks - global);

    // Uniform logits: each node contributes (1/t) * (n t) * ln V * width, so the total is n ln V.
    const Index un = 64;
    std::vector<int> y0(5 * un);
    for (auto& v : y0) v = static_cast<int>(rng() % vocab);
    const MaskedPredictor uniform = [vocab](const std::vector<int>&, Index, const std::vector<double>&,
                                            const std::vector<Index>& rows) {
        return Tensor(Matrix::Zero(static_cast<Index>(rows.size()), vocab));
    };
    const QuadratureNodes unodes = midpoint_nodes(0.0, 1.0, 32);
    std::vector<MaskedBatch> umasks;
    for (double t : unodes.t) umasks.push_back(mask_exact_count(y0, un, t, vocab, s, rng));
    const double uniform_loss = global_loss_masked({uniform}, {0.0, 1.0}, unodes, umasks, s).item();
    const double uniform_err = std::abs(uniform_loss - static_cast<double>(un) * std::log(vocab));

    const double secs = timer.seconds();
    return {exact_bounds && decomposition <= kDecompositionTol && uniform_err <= kUniformLossTol &&
                secs < kMaskedSeconds,
            std::string("boundaries b/B ") + (exact_bounds ? "exact" : "INEXACT") + "; |sum L_b - L| " +
                fmt(decomposition, 3) + " (L = " + fmt(global, 6) + "); uniform loss err " + fmt(uniform_err, 3) +
                ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 7. Desk-scale comparisons through the same run path as the CLI.

RunResult run(const Json& base, std::uint64_t seed) {
    Json j = base;
    j["train"]["seed"] = seed;
    return run_training(parse_run_config(j));
}

Json mixture_config(const std::string& mode, std::size_t blocks, std::size_t steps) {
    return Json{{"task", "mixture2d"},
                {"mode", mode},
                {"layers", 8},
                {"blocks", blocks},
                {"width", 32},
                {"train", {{"steps", steps}, {"batch_size", 128}, {"learning_rate", 0.002}}},
                {"sample_steps", 50},
                {"eval_samples", 2000}};
}

Json clusters_config(const std::string& mode, std::size_t steps) {
    return Json{{"task", "clusters"},
                {"mode", mode},
                {"layers", 4},
                {"blocks", 2},
                {"width", 32},
                {"layer_pattern", "alternate"},
                {"train", {{"steps", steps}, {"batch_size", 64}, {"learning_rate", 0.002}}},
                {"sample_steps", 4},
                {"eval_samples", 1000}};
}

Json char_config(const std::string& mode, std::size_t steps) {
    return Json{{"task", "char_masked"},
                {"mode", mode},
                {"layers", 4},
                {"blocks", 2},
                {"width", 32},
                {"heads", 4},
                {"seq_len", 32},
                {"corpus_length", 100000},
                {"train", {{"steps", steps}, {"batch_size", 32}, {"learning_rate", 0.003}}},
                {"sample_steps", 32},
                {"eval_nodes", 32},
                {"eval_sequences", 64}};
}

struct Arm {
    std::vector<double> metric;
    std::vector<std::uint64_t> evals;
};

Arm run_arm(const Json& base, const std::string& metric) {
    Arm arm;
    for (std::uint64_t seed : kSeeds) {
        const RunResult r = run(base, seed);
        arm.metric.push_back(r.metrics.at(metric).get<double>());
        arm.evals.push_back(r.record.counters.layer_evals_forward);
    }
    return arm;
}

bool matched(const Arm& a, const Arm& b) { return a.evals == b.evals; }

Verdict criterion_comparisons() {
    std::ostringstream d;
    bool pass = true;

    // Blockwise runs B times the iterations: each touches L/B layers.
    const std::size_t mix_steps = 2000;
    const Timer mix_timer;
    const Arm mix_e = run_arm(mixture_config("end_to_end", 1, mix_steps), "energy_distance");
    const double e = median(mix_e.metric);
    d << "mixture ED e2e " << fmt(e);
    for (std::size_t B : {2, 4}) {
        const Arm mix_b = run_arm(mixture_config("blockwise", B, B * mix_steps), "energy_distance");
        const double b = median(mix_b.metric);
        const bool ok = matched(mix_b, mix_e) && b <= (1.0 + kMixtureRelTol) * e;
        pass &= ok;
        d << ", B=" << B << " " << fmt(b) << " (" << join(mix_b.metric) << (ok ? "" : " FAIL") << ")";
    }
    const double mix_secs = mix_timer.seconds();
    pass &= mix_secs <= kMixtureSeconds;
    d << " in " << fmt(mix_secs, 3) << " s; ";

    const Arm clu_e = run_arm(clusters_config("end_to_end", 4000), "accuracy");
    const Arm clu_b = run_arm(clusters_config("blockwise", 8000), "accuracy");
    const double ce = median(clu_e.metric), cb = median(clu_b.metric);
    const bool clu_ok = matched(clu_b, clu_e) && cb >= ce - kAccuracyDrop && cb >= kAccuracyFloor && ce >= kAccuracyFloor;
    pass &= clu_ok;
    d << "clusters acc blockwise " << fmt(cb) << " vs " << fmt(ce) << (clu_ok ? "" : " FAIL") << "; ";

    const double rate = char_source().entropy_rate_bits;
    const Arm chr_e = run_arm(char_config("end_to_end", 4000), "bpc");
    const Arm chr_b = run_arm(char_config("masked", 8000), "bpc");
    const double he = median(chr_e.metric), hb = median(chr_b.metric);
    const bool gap_ok = matched(chr_b, chr_e) && hb <= he + kBpcGap;
    const bool rate_ok = std::abs(hb - rate) <= kBpcToRate && std::abs(he - rate) <= kBpcToRate;
    pass &= gap_ok && rate_ok;
    d << "char BPC blockwise " << fmt(hb) << " (" << join(chr_b.metric) << ") vs " << fmt(he) << " ("
      << join(chr_e.metric) << "), gap " << (gap_ok ? "ok" : "FAIL") << ", within " << kBpcToRate << " of rate "
      << fmt(rate) << " " << (rate_ok ? "ok" : "FAIL");
    return {pass, d.str()};
}

// ---------------------------------------------------------------------------
// 8. B = 1 blockwise training is the global objective, bit for bit.

Verdict criterion_equivalence() {
    const Timer timer;
    const NoiseConfig cfg;
    ConvertOptions opts;
    opts.seed = 6;
    ConvertedModel a = convert(mlp_stack(3, 8), point_shape(8), cfg, opts);
    ConvertedModel b = convert(mlp_stack(3, 8), point_shape(8), cfg, opts);
    TrainConfig train;
    train.steps = kEquivalenceIterations;
    train.batch_size = 16;
    train.learning_rate = 1e-2;
    train.seed = 9;
    const TrainRecord ra = train_blockwise(a, mixture_source(), cfg, LossObjective{}, train);
    const TrainRecord rb = train_end_to_end(b.block(1).net(), mixture_source(), cfg, LossObjective{}, train);
    bool losses = ra.rows.size() == kEquivalenceIterations && ra.rows.size() == rb.rows.size();
    for (std::size_t i = 0; losses && i < ra.rows.size(); ++i) {
        losses = std::memcmp(&ra.rows[i].weighted_loss, &rb.rows[i].weighted_loss, sizeof(double)) == 0 &&
                 std::memcmp(&ra.rows[i].sigma, &rb.rows[i].sigma, sizeof(double)) == 0;
    }
    const bool params = same_bits(a.parameters(), snapshot(b.parameters()));
    const double secs = timer.seconds();
    return {losses && params && secs < kEquivalenceSeconds,
            std::string("losses ") + (losses ? "bit-identical" : "DIFFER") + ", parameters " +
                (params ? "bit-identical" : "DIFFER") + " after " + std::to_string(kEquivalenceIterations) +
                " iterations, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 9. Recurrent single pass against the looped BPTT baseline.

Json recurrent_config(const std::string& mode, std::size_t steps) {
    return Json{{"task", "mixture2d"},
                {"mode", mode},
                {"layers", 4},
                {"blocks", 1},
                {"width", 32},
                {"recurrent_iterations", kRecurrentK},
                {"train", {{"steps", steps}, {"batch_size", 128}, {"learning_rate", 0.002}}},
                {"eval_samples", 2000}};
}

Verdict criterion_recurrent() {
    const Timer timer;
    const std::size_t base_steps = 500;
    std::vector<double> rec, unr;
    bool per_iteration = true, budget = true;
    for (std::uint64_t seed : kSeeds) {
        const RunResult r = run(recurrent_config("recurrent", kRecurrentK * base_steps), seed);
        const RunResult u = run(recurrent_config("unrolled", base_steps), seed);
        const auto rf = r.record.counters.layer_evals_forward, uf = u.record.counters.layer_evals_forward;
        per_iteration &= rf / (kRecurrentK * base_steps) * kRecurrentK == uf / base_steps &&
                         rf % (kRecurrentK * base_steps) == 0 && uf % base_steps == 0;
        budget &= rf == uf;
        rec.push_back(r.metrics.at("energy_distance").get<double>());
        unr.push_back(u.metrics.at("energy_distance").get<double>());
    }
    const double mr = median(rec), mu = median(unr);
    const double secs = timer.seconds();
    return {per_iteration && budget && mr <= (1.0 + kRecurrentRelTol) * mu && secs < kRecurrentSeconds,
            std::string("evals per iteration 1/K ") + (per_iteration ? "exact" : "WRONG") + ", total " +
                (budget ? "equal" : "UNEQUAL") + "; ED recurrent " + fmt(mr) + " (" + join(rec) + ") vs unrolled " +
                fmt(mu) + " (" + join(unr) + "), " + fmt(secs, 3) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"equi-probability partition", criterion_partition},
        {"perfect-denoiser exactness", criterion_oracle_sampling},
        {"gradient correctness", criterion_gradients},
        {"block independence", criterion_isolation},
        {"memory and compute accounting", criterion_accounting},
        {"masked decomposition", criterion_masked},
        {"desk-scale comparisons", criterion_comparisons},
        {"degenerate equivalence", criterion_equivalence},
        {"recurrent single pass", criterion_recurrent},
    };
    std::set<std::size_t> only;
    for (int i = 1; i < argc; ++i) {
        const std::size_t k = std::strtoul(argv[i], nullptr, 10);
        if (k < 1 || k > criteria.size()) {
            std::cerr << "usage: acceptance [criterion numbers 1-" << criteria.size() << "]\n";
            return 2;
        }
        only.insert(k);
    }
    bool all = true;
    for (std::size_t k = 1; k <= criteria.size(); ++k) {
        if (!only.empty() && !only.count(k)) continue;
        Verdict v;
        try {
            v = criteria[k - 1].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        all &= v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " " << k << " " << criteria[k - 1].first << ": " << v.detail
                  << std::endl;
    }
    return all ? 0 : 1;
}
