#pragma once

#include "dblocks/ops.hpp"
#include "dblocks/parameter.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dblocks {

/// Layer-evaluation and activation-storage tallies. Layers bump the forward
/// count on every evaluation and, when a graph is being recorded, the number of
/// layers whose activations the current iteration keeps alive.
struct Counters {
    std::uint64_t layer_evals_forward = 0;
    std::uint64_t layer_evals_backward = 0;
    std::uint64_t peak_stored_activation_layers = 0;
    std::uint64_t parameter_gradient_bytes_touched = 0;
    std::uint64_t stored_this_iteration = 0;

    void begin_iteration() { stored_this_iteration = 0; }
    // Every stored layer is differentiated once by the iteration's backward pass.
    void end_iteration(std::uint64_t gradient_bytes);
    Counters& operator+=(const Counters& other);
};

enum class LayerKind { attention, mlp };

struct LayerSpec {
    LayerKind kind = LayerKind::mlp;
    Index width = 32;
    int heads = 1;
    bool conditioning = true;
    int mlp_ratio = 4;

    void validate() const;
};

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

// Rows are grouped into sequences of `seq_len` consecutive tokens.
struct TokenLayout {
    Index seq_len = 1;
    const AttentionMask* mask = nullptr;
};

// Indices that repeat every row of a (groups x c) tensor `per_group` times.
std::vector<Index> repeat_index(Index groups, Index per_group);

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out

    static Linear create(ParameterList& params, const std::string& name, Index in, Index out,
                         std::mt19937_64& rng, bool zero_init = false);
    Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }
};

/// Maps a per-sequence conditioning scalar (c_noise, or time for masked
/// diffusion) to a width-d vector through fixed Fourier features and a
/// two-layer SiLU MLP. Output is already SiLU-activated for the modulation heads.
class NoiseEmbedding {
public:
    static constexpr Index kFeatures = 32;

    NoiseEmbedding() = default;
    NoiseEmbedding(ParameterList& params, const std::string& name, Index width, std::mt19937_64& rng);

    // values: groups x 1 -> groups x width
    Tensor operator()(const Matrix& values) const;
    Index width() const { return width_; }

    static Matrix fourier_features(const Matrix& values);

private:
    Index width_ = 0;
    Linear first_;
    Linear second_;
};

/// Per-token layer norm modulated by (1 + scale) and shift.
Tensor adaln_modulate(const Tensor& z, const Tensor& scale, const Tensor& shift, double eps = 1e-5);

/// Pre-norm residual layer z + f(modulated_norm(z)). With conditioning the norm
/// is modulated by zero-initialized scale/shift heads on the noise embedding;
/// without it the norm has a learned gain and bias. Output projections start at
/// zero, so a fresh layer is the identity map.
class ResidualLayer {
public:
    ResidualLayer() = default;
    ResidualLayer(ParameterList& params, const std::string& name, const LayerSpec& spec,
                  std::mt19937_64& rng);

    // z: (groups * seq_len) x width; cond: groups x width, required iff conditioning.
    Tensor forward(const Tensor& z, const Tensor* cond, const TokenLayout& layout,
                   Counters* counters = nullptr) const;

    const LayerSpec& spec() const { return spec_; }
    // Zeroes the output projection (residual branch contributes nothing).
    void zero_output();

private:
    LayerSpec spec_;
    Linear scale_head_, shift_head_;
    Tensor norm_gain_, norm_bias_;
    Linear wq_, wk_, wv_, wo_;
    Linear fc1_, fc2_;
};

class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(ParameterList& params, const std::string& name, Index vocab, Index width,
                   bool normalize, std::mt19937_64& rng);
    // Frozen table (no gradients), e.g. fixed class-label targets.
    static EmbeddingTable frozen(Matrix table, bool normalize);

    Tensor lookup(const std::vector<int>& ids) const;
    Index vocab_size() const { return table_.rows(); }
    Index width() const { return table_.cols(); }
    bool normalize() const { return normalize_; }
    // All rows as returned by lookup.
    Matrix rows() const;

private:
    Tensor table_;
    bool normalize_ = false;
};

/// Projection-free masked self-attention (q = k = v = z).
Tensor causal_attention(const Tensor& z, const AttentionMask& mask, int heads = 1);

}  // namespace dblocks
