#pragma once

#include "dblocks/diffusion_blocks.hpp"
#include "dblocks/masked_blocks.hpp"
#include "dblocks/training.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace dblocks {

// ---------------------------------------------------------------------------
// 2-D Gaussian mixture: 8 components evenly spaced on a circle of radius 2.

inline constexpr int kMixtureComponents = 8;
inline constexpr double kMixtureRadius = 2.0;
inline constexpr double kMixtureStd = 0.2;

Matrix mixture2d_means();  // 8 x 2
Matrix sample_mixture2d(Index n, std::mt19937_64& rng);
Matrix gen_mixture2d(std::uint64_t seed, Index n);

// Clean 2-D points as single-token targets, no conditioning tokens.
BatchSource mixture_source();

// ---------------------------------------------------------------------------
// Separable clusters in 8-D, read as 4 feature tokens of 2 values each.

inline constexpr Index kClusterDim = 8;
inline constexpr Index kClusterTokens = 4;
inline constexpr double kClusterNoise = 0.5;

struct ClusterData {
    Matrix features;  // n x 8
    std::vector<int> labels;
};

// Centroids +-3 e_k: pairwise distance >= 3 sqrt(2); at most 16 classes.
Matrix cluster_centroids(int classes);
ClusterData sample_clusters(Index n, int classes, std::mt19937_64& rng);
ClusterData gen_cluster_classify(std::uint64_t seed, Index n, int classes);
std::vector<int> nearest_centroid(const Matrix& features, const Matrix& centroids);

// (n x 8) -> (n * 4) x 2 feature tokens.
Matrix as_feature_tokens(const Matrix& features);

// Fixed unit label embeddings +-e_k in max(2, ceil(classes / 2)) dimensions.
Matrix label_embeddings(int classes);

// Feature tokens as conditioning, label embedding as the target token.
BatchSource cluster_source(int classes);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

/// Starts the label token at sigma_max noise, runs `steps` Euler steps with
/// the block-wise sampler and applies the tied head.
std::vector<int> classify_infer(const ConvertedModel& model, const TiedHead& head, const Matrix& features,
                                std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng);
std::vector<int> classify_infer(const DenoiseFn& denoiser, const Partition& partition, const TiedHead& head,
                                const Matrix& features, std::size_t steps, const NoiseConfig& cfg,
                                std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Character Markov source over 27 symbols.

inline constexpr int kCharVocab = 27;

struct MarkovSource {
    Matrix transition;     // rows sum to one
    ColVector stationary;  // left eigenvector for eigenvalue 1
    double entropy_rate_bits = 0.0;
    double marginal_entropy_bits = 0.0;
};

// The fixed source: every symbol has three successors with probabilities
// 0.6 / 0.3 / 0.1, one of them the next symbol mod 27.
const MarkovSource& char_source();

/// Exact masked-position conditionals of the source: each masked token given
/// its nearest unmasked neighbours, returned as log-probabilities. Independent
/// of t; the reference point for masked-diffusion bounds.
MaskedPredictor markov_masked_oracle(const MarkovSource& source);

struct CharCorpus {
    std::vector<int> ids;
    int vocab = kCharVocab;
    double entropy_rate_bits = 0.0;
    std::string symbols;  // symbols[id] is the character for id
};

CharCorpus gen_char_corpus(std::uint64_t seed, std::size_t length);
// Plain text, one byte per character; vocabulary is the sorted set of bytes seen.
CharCorpus load_char_corpus(const std::filesystem::path& path);

// Random windows of `length` ids.
SequenceSource corpus_windows(const std::vector<int>& ids, Index length);
// `count` non-overlapping windows from the start of the corpus.
std::vector<int> corpus_sequences(const std::vector<int>& ids, Index length, Index count);

// ---------------------------------------------------------------------------
// Fixed unit-norm rows (`count` x `dim`) drawn from `seed`.
Matrix random_unit_embeddings(int count, Index dim, std::uint64_t seed);

// Autoregressive adaptation: clean tokens 1..n as conditioning, noisy tokens
// 1..n as targets, attention restricted by build_ar_mask.

TokenShape ar_token_shape(Index width, Index length, const Matrix& embeddings);
BatchSource ar_source(const std::vector<int>& ids, Index length, const Matrix& embeddings);
// Teacher-forced next-token accuracy over `sequences` (row-major ids).
double ar_accuracy(const ConvertedModel& model, const TiedHead& head, const std::vector<int>& sequences,
                   Index length, std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng);
std::vector<int> ar_generate(const ConvertedModel& model, const TiedHead& head, Index length, int first,
                             std::size_t steps, const NoiseConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Metrics

/// V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|; nonnegative and
/// symmetric. Throws std::invalid_argument on empty input or a width mismatch.
double energy_distance(const Matrix& a, const Matrix& b);

inline constexpr double kProbabilityFloor = 1e-12;

// Mean -log2 p over the probabilities assigned to the true tokens; p is
// clamped to kProbabilityFloor.
double bits_per_char(const std::vector<double>& true_token_probs);
// Exact per-character BPC of ids under a Markov source (first token from the
// stationary law).
double markov_bits_per_char(const MarkovSource& source, const std::vector<int>& ids);

/// Masked-diffusion bound in bits per character: per block, `nodes` midpoint
/// nodes with Bernoulli masks, summed over blocks, averaged over sequences
/// and divided by length * ln 2.
double masked_bits_per_char(const std::vector<MaskedPredictor>& blocks, const std::vector<double>& boundaries,
                            const std::vector<int>& sequences, Index length, int mask_id, std::size_t nodes,
                            const MaskSchedule& schedule, std::mt19937_64& rng);

}  // namespace dblocks
