#include "dblocks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace dblocks {

Matrix mixture2d_means() {
    Matrix m(kMixtureComponents, 2);
    for (int k = 0; k < kMixtureComponents; ++k) {
        const double a = 2.0 * std::numbers::pi * k / kMixtureComponents;
        m(k, 0) = kMixtureRadius * std::cos(a);
        m(k, 1) = kMixtureRadius * std::sin(a);
    }
    return m;
}

Matrix sample_mixture2d(Index n, std::mt19937_64& rng) {
    if (n < 0) throw std::invalid_argument("sample count must be non-negative");
    static const Matrix means = mixture2d_means();
    std::uniform_int_distribution<int> comp(0, kMixtureComponents - 1);
    std::normal_distribution<double> normal(0.0, kMixtureStd);
    Matrix out(n, 2);
    for (Index i = 0; i < n; ++i) {
        const int k = comp(rng);
        out(i, 0) = means(k, 0) + normal(rng);
        out(i, 1) = means(k, 1) + normal(rng);
    }
    return out;
}

Matrix gen_mixture2d(std::uint64_t seed, Index n) {
    std::mt19937_64 rng(seed);
    return sample_mixture2d(n, rng);
}

BatchSource mixture_source() {
    return [](Index batch_size, std::mt19937_64& rng) {
        DenoisingBatch b;
        b.groups = batch_size;
        b.y = sample_mixture2d(batch_size, rng);
        return b;
    };
}

// ---------------------------------------------------------------------------

Matrix cluster_centroids(int classes) {
    if (classes < 2 || classes > 2 * kClusterDim) {
        throw std::invalid_argument("cluster task supports 2 to 16 classes");
    }
    Matrix c = Matrix::Zero(classes, kClusterDim);
    for (int k = 0; k < classes; ++k) c(k, k / 2) = (k % 2 == 0) ? 3.0 : -3.0;
    return c;
}

ClusterData sample_clusters(Index n, int classes, std::mt19937_64& rng) {
    const Matrix centroids = cluster_centroids(classes);
    ClusterData d;
    d.features = normal_matrix(n, kClusterDim, kClusterNoise, rng);
    std::uniform_int_distribution<int> label(0, classes - 1);
    d.labels.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const int k = label(rng);
        d.labels[static_cast<std::size_t>(i)] = k;
        d.features.row(i) += centroids.row(k);
    }
    return d;
}

ClusterData gen_cluster_classify(std::uint64_t seed, Index n, int classes) {
    std::mt19937_64 rng(seed);
    return sample_clusters(n, classes, rng);
}

std::vector<int> nearest_centroid(const Matrix& features, const Matrix& centroids) {
    if (features.cols() != centroids.cols()) throw ShapeError("nearest_centroid: width mismatch");
    std::vector<int> out(static_cast<std::size_t>(features.rows()));
    for (Index i = 0; i < features.rows(); ++i) {
        Index best = 0;
        (centroids.rowwise() - features.row(i)).rowwise().squaredNorm().minCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

Matrix as_feature_tokens(const Matrix& features) {
    if (features.cols() != kClusterDim) throw ShapeError("cluster features must have 8 columns");
    const Index per = kClusterDim / kClusterTokens;
    return Eigen::Map<const Matrix>(features.data(), features.rows() * kClusterTokens, per);
}

Matrix label_embeddings(int classes) {
    if (classes < 2) throw std::invalid_argument("label embeddings need at least two classes");
    const Index dim = std::max<Index>(2, (classes + 1) / 2);
    Matrix e = Matrix::Zero(classes, dim);
    for (int k = 0; k < classes; ++k) e(k, k / 2) = (k % 2 == 0) ? 1.0 : -1.0;
    return e;
}

BatchSource cluster_source(int classes) {
    const Matrix embed = label_embeddings(classes);
    return [classes, embed](Index batch_size, std::mt19937_64& rng) {
        ClusterData d = sample_clusters(batch_size, classes, rng);
        DenoisingBatch b;
        b.groups = batch_size;
        b.x = as_feature_tokens(d.features);
        b.y.resize(batch_size, embed.cols());
        for (Index i = 0; i < batch_size; ++i) b.y.row(i) = embed.row(d.labels[static_cast<std::size_t>(i)]);
        b.labels = std::move(d.labels);
        return b;
    };
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size() || truth.empty()) {
        throw std::invalid_argument("accuracy needs equally sized, non-empty label lists");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::vector<int> classify_infer(const ConvertedModel& model, const TiedHead& head, const Matrix& features,
                                std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng) {
    const Index dim = model.blocks.front().net().shape().z_dim;
    Matrix z0 = normal_matrix(features.rows(), dim, 1.0, rng) * cfg.sigma_max;
    return head.predict(sample_from(model, as_feature_tokens(features), std::move(z0), steps, cfg));
}

std::vector<int> classify_infer(const DenoiseFn& denoiser, const Partition& partition, const TiedHead& head,
                                const Matrix& features, std::size_t steps, const NoiseConfig& cfg,
                                std::mt19937_64& rng) {
    Matrix z0 = normal_matrix(features.rows(), head.embeddings.cols(), 1.0, rng) * cfg.sigma_max;
    return head.predict(euler_sample(denoiser, partition, cfg, as_feature_tokens(features), std::move(z0), steps));
}

// ---------------------------------------------------------------------------

namespace {

double entropy_bits(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
    double h = 0.0;
    for (Index i = 0; i < p.size(); ++i) {
        if (p(i) > 0.0) h -= p(i) * std::log2(p(i));
    }
    return h;
}

MarkovSource build_char_source() {
    constexpr int V = kCharVocab;
    std::mt19937_64 rng(0x5eed'c4a7ULL);
    MarkovSource s;
    s.transition = Matrix::Zero(V, V);
    const double probs[3] = {0.6, 0.3, 0.1};
    for (int i = 0; i < V; ++i) {
        std::vector<int> succ{(i + 1) % V};
        std::uniform_int_distribution<int> any(0, V - 1);
        while (succ.size() < 3) {
            const int j = any(rng);
            if (std::find(succ.begin(), succ.end(), j) == succ.end()) succ.push_back(j);
        }
        std::shuffle(succ.begin(), succ.end(), rng);
        for (int k = 0; k < 3; ++k) s.transition(i, succ[static_cast<std::size_t>(k)]) = probs[k];
    }
    // Lazy power iteration converges even for a periodic chain.
    Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(V, 1.0 / V);
    for (int it = 0; it < 100000; ++it) {
        Eigen::RowVectorXd next = 0.5 * (pi + pi * s.transition);
        next /= next.sum();
        const double change = (next - pi).cwiseAbs().maxCoeff();
        pi = next;
        if (change < 1e-16) break;
    }
    s.stationary = pi.transpose();
    for (int i = 0; i < V; ++i) s.entropy_rate_bits += pi(i) * entropy_bits(s.transition.row(i));
    s.marginal_entropy_bits = entropy_bits(pi);
    return s;
}

}  // namespace

const MarkovSource& char_source() {
    static const MarkovSource source = build_char_source();
    return source;
}

MaskedPredictor markov_masked_oracle(const MarkovSource& source) {
    const MarkovSource* src = &source;
    return [src](const std::vector<int>& xt, Index length, const std::vector<double>&, const std::vector<Index>& rows) {
        const Index v = src->transition.rows();
        std::vector<Matrix> power{Matrix::Identity(v, v)};  // power[k] = T^k
        Matrix out(static_cast<Index>(rows.size()), v);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const Index row = rows[r];
            const Index start = row / length * length;
            Index left = row - 1, right = row + 1;
            while (left >= start && xt[static_cast<std::size_t>(left)] >= v) --left;
            while (right < start + length && xt[static_cast<std::size_t>(right)] >= v) ++right;
            const Index reach = std::max(row - left, right - row);
            while (static_cast<Index>(power.size()) <= reach) power.push_back(power.back() * src->transition);
            Eigen::RowVectorXd p = left >= start
                                       ? Eigen::RowVectorXd(power[static_cast<std::size_t>(row - left)].row(xt[static_cast<std::size_t>(left)]))
                                       : Eigen::RowVectorXd(src->stationary.transpose());
            if (right < start + length) {
                p = p.cwiseProduct(power[static_cast<std::size_t>(right - row)].col(xt[static_cast<std::size_t>(right)]).transpose());
            }
            p /= p.sum();
            out.row(static_cast<Index>(r)) = p.array().max(kProbabilityFloor).log().matrix();
        }
        return Tensor(std::move(out));
    };
}

CharCorpus gen_char_corpus(std::uint64_t seed, std::size_t length) {
    const MarkovSource& src = char_source();
    std::mt19937_64 rng(seed);
    std::vector<std::discrete_distribution<int>> rows;
    for (int i = 0; i < kCharVocab; ++i) {
        rows.emplace_back(src.transition.row(i).data(), src.transition.row(i).data() + kCharVocab);
    }
    std::discrete_distribution<int> first(src.stationary.data(), src.stationary.data() + kCharVocab);
    CharCorpus c;
    c.entropy_rate_bits = src.entropy_rate_bits;
    c.symbols = "abcdefghijklmnopqrstuvwxyz ";
    c.ids.reserve(length);
    if (length == 0) return c;
    c.ids.push_back(first(rng));
    while (c.ids.size() < length) c.ids.push_back(rows[static_cast<std::size_t>(c.ids.back())](rng));
    return c;
}

CharCorpus load_char_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read corpus " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw std::invalid_argument("corpus is empty");
    std::map<unsigned char, int> vocab;
    for (unsigned char b : bytes) vocab.emplace(b, 0);
    int next = 0;
    CharCorpus c;
    for (auto& [byte, id] : vocab) {
        id = next++;
        c.symbols.push_back(static_cast<char>(byte));
    }
    c.vocab = next;
    c.entropy_rate_bits = std::numeric_limits<double>::quiet_NaN();
    for (unsigned char b : bytes) c.ids.push_back(vocab[b]);
    return c;
}

SequenceSource corpus_windows(const std::vector<int>& ids, Index length) {
    if (length <= 0 || static_cast<Index>(ids.size()) < length) {
        throw std::invalid_argument("corpus shorter than the window length");
    }
    return [&ids, length](Index batch_size, std::mt19937_64& rng) {
        std::uniform_int_distribution<std::size_t> start(0, ids.size() - static_cast<std::size_t>(length));
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(batch_size * length));
        for (Index s = 0; s < batch_size; ++s) {
            const std::size_t p = start(rng);
            out.insert(out.end(), ids.begin() + static_cast<std::ptrdiff_t>(p),
                       ids.begin() + static_cast<std::ptrdiff_t>(p + static_cast<std::size_t>(length)));
        }
        return out;
    };
}

std::vector<int> corpus_sequences(const std::vector<int>& ids, Index length, Index count) {
    if (static_cast<Index>(ids.size()) < length * count) throw std::invalid_argument("corpus too short");
    return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(length * count)};
}

// ---------------------------------------------------------------------------

Matrix random_unit_embeddings(int count, Index dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Matrix e = normal_matrix(count, dim, 1.0, rng);
    e.array().colwise() /= e.rowwise().norm().array();
    return e;
}

TokenShape ar_token_shape(Index width, Index length, const Matrix& embeddings) {
    TokenShape s;
    s.width = width;
    s.x_tokens = length;
    s.x_dim = embeddings.cols();
    s.z_tokens = length;
    s.z_dim = embeddings.cols();
    s.mask = std::make_shared<const AttentionMask>(build_ar_mask(length));
    return s;
}

namespace {

Matrix embed_ids(const std::vector<int>& ids, const Matrix& embeddings) {
    Matrix out(static_cast<Index>(ids.size()), embeddings.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = embeddings.row(ids[i]);
    return out;
}

}  // namespace

BatchSource ar_source(const std::vector<int>& ids, Index length, const Matrix& embeddings) {
    SequenceSource windows = corpus_windows(ids, length);
    return [windows, embeddings](Index batch_size, std::mt19937_64& rng) {
        DenoisingBatch b;
        b.groups = batch_size;
        b.labels = windows(batch_size, rng);
        b.x = embed_ids(b.labels, embeddings);
        b.y = b.x;
        return b;
    };
}

double ar_accuracy(const ConvertedModel& model, const TiedHead& head, const std::vector<int>& sequences,
                   Index length, std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng) {
    // Noisy tokens never see each other, so every position is denoised at once.
    if (length <= 0 || static_cast<Index>(sequences.size()) % length != 0) {
        throw ShapeError("ar_accuracy: ids do not form whole sequences");
    }
    const Matrix x = embed_ids(sequences, head.embeddings);
    Matrix z0 = normal_matrix(x.rows(), x.cols(), 1.0, rng) * cfg.sigma_max;
    return accuracy(head.predict(sample_from(model, x, std::move(z0), steps, cfg)), sequences);
}

std::vector<int> ar_generate(const ConvertedModel& model, const TiedHead& head, Index length, int first,
                             std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng) {
    std::vector<int> ids(static_cast<std::size_t>(length), first);
    for (Index i = 1; i < length; ++i) {
        const Matrix x = embed_ids(ids, head.embeddings);
        Matrix z0 = normal_matrix(length, x.cols(), 1.0, rng) * cfg.sigma_max;
        const std::vector<int> pred = head.predict(sample_from(model, x, std::move(z0), steps, cfg));
        ids[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)];
    }
    return ids;
}

// ---------------------------------------------------------------------------

namespace {

double mean_pairwise_distance(const Matrix& a, const Matrix& b) {
    const Index d = a.cols();
    double total = 0.0;
    for (Index i = 0; i < a.rows(); ++i) {
        const double* ai = a.data() + i * d;
        double row = 0.0;
        for (Index j = 0; j < b.rows(); ++j) {
            const double* bj = b.data() + j * d;
            double s = 0.0;
            for (Index k = 0; k < d; ++k) {
                const double diff = ai[k] - bj[k];
                s += diff * diff;
            }
            row += std::sqrt(s);
        }
        total += row;
    }
    return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double energy_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("energy distance needs non-empty samples");
    if (a.cols() != b.cols()) throw std::invalid_argument("energy distance: width mismatch");
    const double e = 2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) - mean_pairwise_distance(b, b);
    return std::max(0.0, e);
}

double bits_per_char(const std::vector<double>& true_token_probs) {
    if (true_token_probs.empty()) throw std::invalid_argument("bits_per_char needs at least one token");
    double total = 0.0;
    for (double p : true_token_probs) total -= std::log2(std::max(p, kProbabilityFloor));
    return total / static_cast<double>(true_token_probs.size());
}

double markov_bits_per_char(const MarkovSource& source, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("markov_bits_per_char needs at least one token");
    std::vector<double> probs{source.stationary(ids.front())};
    for (std::size_t i = 1; i < ids.size(); ++i) probs.push_back(source.transition(ids[i - 1], ids[i]));
    return bits_per_char(probs);
}

double masked_bits_per_char(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                            const std::vector<int>& sequences, Index length, int mask_id, std::size_t nodes,
                            const MaskSchedule& schedule, std::mt19937_64& rng) {
    if (blocks.empty() || boundaries.size() != blocks.size() + 1) {
        throw std::invalid_argument("masked_bits_per_char needs B blocks and B + 1 boundaries");
    }
    NoGradGuard no_grad;
    double nats = 0.0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const QuadratureNodes q = midpoint_nodes(boundaries[b], boundaries[b + 1], nodes);
        std::vector<MaskedBatch> masks;
        // Bernoulli masks keep the estimate unbiased; rounding to an exact count
        // reweights the heavily masked terms.
        const std::size_t m = sequences.size() / static_cast<std::size_t>(length);
        for (double t : q.t) masks.push_back(mask_forward(sequences, length, std::vector<double>(m, t), mask_id, schedule, rng));
        nats += block_loss_masked(blocks[b], q, masks, schedule).item();
    }
    return nats / (static_cast<double>(length) * std::numbers::ln2);
}

}  // namespace dblocks
