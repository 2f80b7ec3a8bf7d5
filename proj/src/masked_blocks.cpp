#include "dblocks/masked_blocks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dblocks {

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("masking time must lie in [0, 1]");
}

Index count_masked(Index length, double masked_fraction) {
    return static_cast<Index>(std::llround(static_cast<double>(length) * masked_fraction));
}

}  // namespace

MaskSchedule MaskSchedule::linear() {
    MaskSchedule s;
    s.kind = "linear";
    s.alpha = [](double t) { return 1.0 - t; };
    s.alpha_prime = [](double) { return -1.0; };
    s.time_at_masked_fraction = [](double f) { return f; };
    return s;
}

double MaskSchedule::masked_fraction_time(double fraction) const {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::domain_error("masked fraction must lie in [0, 1]");
    if (time_at_masked_fraction) return time_at_masked_fraction(fraction);
    if (fraction == 0.0) return 0.0;
    if (fraction == 1.0) return 1.0;
    // alpha is decreasing, so 1 - alpha is increasing.
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200 && hi - lo > 0.0; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (1.0 - alpha(mid) < fraction) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

std::vector<double> time_boundaries(const MaskSchedule& schedule, std::size_t blocks) {
    if (blocks == 0) throw std::invalid_argument("time_boundaries needs at least one block");
    std::vector<double> t(blocks + 1);
    t.front() = 0.0;
    t.back() = 1.0;
    for (std::size_t b = 1; b < blocks; ++b) {
        t[b] = schedule.masked_fraction_time(static_cast<double>(b) / static_cast<double>(blocks));
    }
    return t;
}

std::size_t select_time_block(const std::vector<double>& boundaries, double t) {
    check_time(t);
    const std::size_t B = boundaries.size() - 1;
    for (std::size_t b = 1; b <= B; ++b) {
        if (t <= boundaries[b]) return b;
    }
    return B;
}

std::vector<Index> MaskedBatch::masked_rows() const {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < masked.size(); ++i) {
        if (masked[i]) rows.push_back(static_cast<Index>(i));
    }
    return rows;
}

MaskedBatch mask_forward(const std::vector<int>& x0, Index length, const std::vector<double>& t, int mask_id,
                         const MaskSchedule& schedule, std::mt19937_64& rng) {
    if (length <= 0 || static_cast<Index>(x0.size()) % length != 0) {
        throw ShapeError("mask_forward: ids do not form whole sequences");
    }
    MaskedBatch batch;
    batch.length = length;
    batch.sequences = static_cast<Index>(x0.size()) / length;
    if (static_cast<Index>(t.size()) != batch.sequences) throw ShapeError("mask_forward: one time per sequence");
    batch.x0 = x0;
    batch.xt = x0;
    batch.t = t;
    batch.masked.assign(x0.size(), 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Index s = 0; s < batch.sequences; ++s) {
        check_time(t[static_cast<std::size_t>(s)]);
        const double keep = schedule.alpha(t[static_cast<std::size_t>(s)]);
        for (Index p = 0; p < length; ++p) {
            const auto i = static_cast<std::size_t>(s * length + p);
            // u < keep keeps the token; keep == 1 never masks, keep == 0 always does.
            if (!(u(rng) < keep)) {
                batch.masked[i] = 1;
                batch.xt[i] = mask_id;
            }
        }
    }
    return batch;
}

MaskedBatch mask_exact_count(const std::vector<int>& x0, Index length, double t, int mask_id,
                             const MaskSchedule& schedule, std::mt19937_64& rng) {
    check_time(t);
    if (length <= 0 || static_cast<Index>(x0.size()) % length != 0) {
        throw ShapeError("mask_exact_count: ids do not form whole sequences");
    }
    MaskedBatch batch;
    batch.length = length;
    batch.sequences = static_cast<Index>(x0.size()) / length;
    batch.x0 = x0;
    batch.xt = x0;
    batch.t.assign(static_cast<std::size_t>(batch.sequences), t);
    batch.masked.assign(x0.size(), 0);
    const Index k = count_masked(length, 1.0 - schedule.alpha(t));
    std::vector<Index> order(static_cast<std::size_t>(length));
    for (Index s = 0; s < batch.sequences; ++s) {
        std::iota(order.begin(), order.end(), Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (Index j = 0; j < k; ++j) {
            const auto i = static_cast<std::size_t>(s * length + order[static_cast<std::size_t>(j)]);
            batch.masked[i] = 1;
            batch.xt[i] = mask_id;
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------

namespace {

// Trainable table initialised with the usual sin/cos position code, so relative
// offsets are linear maps of the absolute code from the first step.
Matrix sinusoidal_positions(Index length, Index d) {
    Matrix p(length, d);
    for (Index i = 0; i < length; ++i) {
        for (Index k = 0; k < d; ++k) {
            const double freq = std::pow(1.0 / static_cast<double>(length), static_cast<double>(k / 2 * 2) / static_cast<double>(d));
            p(i, k) = k % 2 == 0 ? std::sin(static_cast<double>(i) * freq) : std::cos(static_cast<double>(i) * freq);
        }
    }
    return p;
}

}  // namespace

MaskedDenoiser::MaskedDenoiser(const std::string& prefix, const std::vector<LayerSpec>& layers, int vocab,
                               Index length, std::mt19937_64& rng)
    : vocab_(vocab), length_(length) {
    if (vocab <= 0 || length <= 0) throw std::invalid_argument("masked denoiser needs a vocabulary and a length");
    if (layers.empty()) throw std::invalid_argument("masked denoiser needs at least one layer");
    const Index d = layers.front().width;
    time_embed_ = NoiseEmbedding(params_, prefix + ".time_embed", d, rng);
    params_.push_back(make_parameter(prefix + ".token_embed", normal_matrix(vocab + 1, d, 1.0, rng)));
    token_embed_ = params_.back().tensor;
    params_.push_back(make_parameter(prefix + ".pos", sinusoidal_positions(length, d)));
    pos_embed_ = params_.back().tensor;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].width != d) throw ShapeError("masked denoiser layers must share one width");
        LayerSpec spec = layers[l];
        spec.conditioning = true;
        layers_.emplace_back(params_, prefix + ".layer" + std::to_string(l + 1), spec, rng);
    }
    final_scale_ = Linear::create(params_, prefix + ".final.scale", d, d, rng, true);
    final_shift_ = Linear::create(params_, prefix + ".final.shift", d, d, rng, true);
    head_ = Linear::create(params_, prefix + ".head", d, vocab, rng, true);
    require_unique_names(params_);
}

Tensor MaskedDenoiser::logits(const std::vector<int>& xt, Index length, const std::vector<double>& t,
                              const std::vector<Index>& rows, Counters* counters) const {
    if (length != length_) throw ShapeError("masked denoiser: sequence length mismatch");
    const Index groups = static_cast<Index>(t.size());
    if (static_cast<Index>(xt.size()) != groups * length) throw ShapeError("masked denoiser: ids/time mismatch");
    std::vector<Index> ids(xt.size()), pos(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
        if (xt[i] < 0 || xt[i] > vocab_) throw std::out_of_range("masked denoiser: token id out of range");
        ids[i] = xt[i];
        pos[i] = static_cast<Index>(i) % length;
    }
    Matrix tm(groups, 1);
    for (Index g = 0; g < groups; ++g) {
        check_time(t[static_cast<std::size_t>(g)]);
        tm(g, 0) = t[static_cast<std::size_t>(g)];
    }
    Tensor cond = time_embed_(tm);
    Tensor h = gather_rows(token_embed_, ids) + gather_rows(pos_embed_, pos);
    const TokenLayout layout{length, nullptr};
    for (const auto& layer : layers_) h = layer.forward(h, &cond, layout, counters);

    std::vector<Index> owner(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= groups * length) throw std::out_of_range("masked denoiser: row out of range");
        owner[i] = rows[i] / length;
    }
    Tensor picked = gather_rows(h, rows);
    Tensor out = adaln_modulate(picked, gather_rows(final_scale_(cond), owner), gather_rows(final_shift_(cond), owner));
    return head_(out);
}

MaskedPredictor MaskedDenoiser::predictor(Counters* counters) const {
    return [this, counters](const std::vector<int>& xt, Index length, const std::vector<double>& t,
                            const std::vector<Index>& rows) { return logits(xt, length, t, rows, counters); };
}

// ---------------------------------------------------------------------------

QuadratureNodes midpoint_nodes(double a, double b, std::size_t count) {
    if (!(b > a)) throw std::invalid_argument("quadrature needs a non-empty interval");
    if (count == 0) throw std::invalid_argument("quadrature needs at least one node");
    QuadratureNodes q;
    const double h = (b - a) / static_cast<double>(count);
    for (std::size_t j = 0; j < count; ++j) {
        q.t.push_back(a + (static_cast<double>(j) + 0.5) * h);
        q.weight.push_back(h);
    }
    return q;
}

namespace {

// Sum over masked positions of CE, times `scale`, as a 1x1 tensor; empty when
// nothing is masked.
std::optional<Tensor> masked_ce_sum(const MaskedPredictor& model, const MaskedBatch& batch, double scale) {
    const std::vector<Index> rows = batch.masked_rows();
    if (rows.empty()) return std::nullopt;
    std::vector<int> targets;
    targets.reserve(rows.size());
    for (Index r : rows) targets.push_back(batch.x0[static_cast<std::size_t>(r)]);
    Tensor lp = log_softmax(model(batch.xt, batch.length, batch.t, rows));
    return sum(pick(lp, targets)) * (-scale);
}

Tensor accumulate(std::optional<Tensor>& total, const Tensor& term) {
    total = total ? *total + term : term;
    return *total;
}

}  // namespace

Tensor block_loss_masked(const MaskedPredictor& model, const QuadratureNodes& nodes,
                         const std::vector<MaskedBatch>& masks, const MaskSchedule& schedule) {
    if (nodes.t.empty()) throw std::invalid_argument("block loss needs a non-empty interval");
    if (masks.size() != nodes.t.size()) throw std::invalid_argument("one masked batch per quadrature node");
    std::optional<Tensor> total;
    for (std::size_t j = 0; j < nodes.t.size(); ++j) {
        const MaskedBatch& batch = masks[j];
        if (batch.sequences == 0) continue;
        const double scale = nodes.weight[j] * schedule.weight(nodes.t[j]) / static_cast<double>(batch.sequences);
        if (auto term = masked_ce_sum(model, batch, scale)) accumulate(total, *term);
    }
    return total ? *total : Tensor::scalar(0.0);
}

Tensor global_loss_masked(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                          const QuadratureNodes& nodes, const std::vector<MaskedBatch>& masks,
                          const MaskSchedule& schedule) {
    if (blocks.empty() || boundaries.size() != blocks.size() + 1) {
        throw std::invalid_argument("global loss needs B blocks and B + 1 boundaries");
    }
    if (masks.size() != nodes.t.size()) throw std::invalid_argument("one masked batch per quadrature node");
    // Route each node to its owner, then evaluate block by block in node order
    // so the summation order matches a per-block evaluation.
    std::vector<QuadratureNodes> per_block(blocks.size());
    std::vector<std::vector<MaskedBatch>> per_block_masks(blocks.size());
    for (std::size_t j = 0; j < nodes.t.size(); ++j) {
        const std::size_t b = select_time_block(boundaries, nodes.t[j]) - 1;
        per_block[b].t.push_back(nodes.t[j]);
        per_block[b].weight.push_back(nodes.weight[j]);
        per_block_masks[b].push_back(masks[j]);
    }
    std::optional<Tensor> total;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (per_block[b].t.empty()) continue;
        accumulate(total, block_loss_masked(blocks[b], per_block[b], per_block_masks[b], schedule));
    }
    return total ? *total : Tensor::scalar(0.0);
}

MaskedLossResult masked_mc_loss(const MaskedDenoiser& model, const std::vector<int>& x0, Index length, double t_lo,
                                double t_hi, const MaskSchedule& schedule, std::mt19937_64& rng,
                                Counters* counters) {
    if (!(t_hi > t_lo)) throw std::invalid_argument("masked loss needs a non-empty interval");
    if (length <= 0 || x0.empty() || static_cast<Index>(x0.size()) % length != 0) {
        throw ShapeError("masked loss: ids do not form whole sequences");
    }
    const Index m = static_cast<Index>(x0.size()) / length;
    // t near 0 masks almost nothing while its weight diverges.
    const double lo = std::max(t_lo, 1e-3 * (t_hi - t_lo));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> t(static_cast<std::size_t>(m));
    for (Index s = 0; s < m; ++s) {
        t[static_cast<std::size_t>(s)] = lo + (static_cast<double>(s) + u(rng)) / static_cast<double>(m) * (t_hi - lo);
    }
    std::shuffle(t.begin(), t.end(), rng);
    MaskedBatch batch = mask_forward(x0, length, t, model.mask_id(), schedule, rng);

    MaskedLossResult result;
    result.mean_t = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(m);
    const std::vector<Index> rows = batch.masked_rows();
    if (rows.empty()) {
        result.loss = Tensor::scalar(0.0);
        return result;
    }
    std::vector<int> targets;
    Matrix w(static_cast<Index>(rows.size()), 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        targets.push_back(batch.x0[static_cast<std::size_t>(rows[i])]);
        const double ti = t[static_cast<std::size_t>(rows[i] / length)];
        w(static_cast<Index>(i), 0) = (t_hi - lo) * schedule.weight(ti) / static_cast<double>(m);
    }
    Tensor lp = log_softmax(model.logits(batch.xt, length, batch.t, rows, counters));
    result.loss = -sum(pick(lp, targets) * Tensor(std::move(w)));
    return result;
}

// ---------------------------------------------------------------------------

std::vector<int> demask_sample(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                               Index sequences, Index length, int mask_id, std::size_t steps,
                               const MaskSchedule& schedule, std::mt19937_64& rng, CommitRule rule,
                               std::vector<DemaskStep>* trace) {
    const std::size_t B = blocks.size();
    if (B == 0 || boundaries.size() != B + 1) throw std::invalid_argument("demasking needs B blocks and B + 1 boundaries");
    if (steps < B) throw std::invalid_argument("demasking needs at least one step per block");
    if (sequences <= 0 || length <= 0) throw std::invalid_argument("demasking needs a positive shape");
    NoGradGuard no_grad;

    // Levels from t = 1 down to 0; the block visited first takes the remainder.
    std::vector<double> levels;
    std::vector<std::size_t> owner;
    for (std::size_t k = 0; k < B; ++k) {
        const std::size_t b = B - k;
        const std::size_t count = steps / B + (k < steps % B ? 1 : 0);
        const double hi = boundaries[b], lo = boundaries[b - 1];
        for (std::size_t j = 0; j < count; ++j) {
            levels.push_back(hi - (hi - lo) * static_cast<double>(j) / static_cast<double>(count));
            owner.push_back(b);
        }
    }
    levels.push_back(0.0);

    std::vector<int> ids(static_cast<std::size_t>(sequences * length), mask_id);
    std::vector<Index> unmasked(static_cast<std::size_t>(sequences), 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
        const double t = levels[i];
        const double s = levels[i + 1];
        const Index target = length - count_masked(length, 1.0 - schedule.alpha(s));
        std::vector<Index> rows;
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] == mask_id) rows.push_back(static_cast<Index>(r));
        }
        if (!rows.empty() && target > *std::min_element(unmasked.begin(), unmasked.end())) {
            const std::vector<double> tv(static_cast<std::size_t>(sequences), t);
            Matrix probs = softmax(blocks[owner[i] - 1](ids, length, tv, rows)).value();
            struct Candidate {
                double confidence;
                Index row;
                int token;
            };
            std::vector<std::vector<Candidate>> per_seq(static_cast<std::size_t>(sequences));
            for (std::size_t k = 0; k < rows.size(); ++k) {
                const auto pk = static_cast<Index>(k);
                int token = 0;
                if (rule == CommitRule::argmax) {
                    Index best = 0;
                    probs.row(pk).maxCoeff(&best);
                    token = static_cast<int>(best);
                } else {
                    double r = u(rng), acc = 0.0;
                    token = static_cast<int>(probs.cols()) - 1;
                    for (Index c = 0; c < probs.cols(); ++c) {
                        acc += probs(pk, c);
                        if (r < acc) {
                            token = static_cast<int>(c);
                            break;
                        }
                    }
                }
                per_seq[static_cast<std::size_t>(rows[k] / length)].push_back({probs(pk, token), rows[k], token});
            }
            for (Index q = 0; q < sequences; ++q) {
                auto& cands = per_seq[static_cast<std::size_t>(q)];
                Index& done = unmasked[static_cast<std::size_t>(q)];
                const Index need = std::min<Index>(target - done, static_cast<Index>(cands.size()));
                if (need <= 0) continue;
                std::stable_sort(cands.begin(), cands.end(),
                                 [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
                for (Index k = 0; k < need; ++k) {
                    ids[static_cast<std::size_t>(cands[static_cast<std::size_t>(k)].row)] =
                        cands[static_cast<std::size_t>(k)].token;
                }
                done += need;
            }
        }
        if (trace) trace->push_back({t, s, owner[i], unmasked.front()});
    }
    return ids;
}

}  // namespace dblocks
