#include "dblocks/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dblocks {

void Counters::end_iteration(std::uint64_t gradient_bytes) {
    peak_stored_activation_layers = std::max(peak_stored_activation_layers, stored_this_iteration);
    layer_evals_backward += stored_this_iteration;
    parameter_gradient_bytes_touched += gradient_bytes;
}

Counters& Counters::operator+=(const Counters& other) {
    layer_evals_forward += other.layer_evals_forward;
    layer_evals_backward += other.layer_evals_backward;
    peak_stored_activation_layers = std::max(peak_stored_activation_layers, other.peak_stored_activation_layers);
    parameter_gradient_bytes_touched += other.parameter_gradient_bytes_touched;
    return *this;
}

void LayerSpec::validate() const {
    if (width <= 0) throw std::invalid_argument("layer width must be positive");
    if (kind == LayerKind::attention) {
        if (heads <= 0 || width % heads != 0) {
            throw std::invalid_argument("attention width must be divisible by heads");
        }
    }
    if (mlp_ratio <= 0) throw std::invalid_argument("mlp_ratio must be positive");
}

const char* to_string(LayerKind kind) { return kind == LayerKind::attention ? "attention" : "mlp"; }

LayerKind layer_kind_from_string(const std::string& name) {
    if (name == "attention") return LayerKind::attention;
    if (name == "mlp") return LayerKind::mlp;
    throw std::invalid_argument("unknown layer kind: " + name);
}

std::vector<Index> repeat_index(Index groups, Index per_group) {
    std::vector<Index> idx(static_cast<std::size_t>(groups * per_group));
    for (Index g = 0; g < groups; ++g) {
        for (Index j = 0; j < per_group; ++j) idx[static_cast<std::size_t>(g * per_group + j)] = g;
    }
    return idx;
}

Linear Linear::create(ParameterList& params, const std::string& name, Index in, Index out,
                      std::mt19937_64& rng, bool zero_init) {
    Linear l;
    Matrix w = zero_init ? Matrix::Zero(in, out)
                         : normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    params.push_back(make_parameter(name + ".w", std::move(w)));
    l.weight = params.back().tensor;
    params.push_back(make_parameter(name + ".b", Matrix::Zero(1, out)));
    l.bias = params.back().tensor;
    return l;
}

NoiseEmbedding::NoiseEmbedding(ParameterList& params, const std::string& name, Index width,
                               std::mt19937_64& rng)
    : width_(width),
      first_(Linear::create(params, name + ".fc1", kFeatures, width, rng)),
      second_(Linear::create(params, name + ".fc2", width, width, rng)) {}

Matrix NoiseEmbedding::fourier_features(const Matrix& values) {
    const Index half = kFeatures / 2;
    Matrix f(values.rows(), kFeatures);
    for (Index i = 0; i < values.rows(); ++i) {
        for (Index k = 0; k < half; ++k) {
            // frequencies 1 .. ~64, geometric
            const double freq = std::exp(std::log(64.0) * static_cast<double>(k) / static_cast<double>(half - 1));
            f(i, k) = std::cos(freq * values(i, 0));
            f(i, half + k) = std::sin(freq * values(i, 0));
        }
    }
    return f;
}

Tensor NoiseEmbedding::operator()(const Matrix& values) const {
    if (values.cols() != 1) throw ShapeError("noise embedding expects one value per row");
    Tensor features(fourier_features(values));
    return silu(second_(silu(first_(features))));
}

Tensor adaln_modulate(const Tensor& z, const Tensor& scale, const Tensor& shift, double eps) {
    if (scale.cols() != z.cols() || shift.cols() != z.cols()) {
        throw ShapeError("adaln_modulate: scale/shift width differs from tokens");
    }
    return layer_norm(z, eps) * (scale + 1.0) + shift;
}

ResidualLayer::ResidualLayer(ParameterList& params, const std::string& name, const LayerSpec& spec,
                             std::mt19937_64& rng)
    : spec_(spec) {
    spec.validate();
    const Index d = spec.width;
    if (spec.conditioning) {
        scale_head_ = Linear::create(params, name + ".ada.scale", d, d, rng, true);
        shift_head_ = Linear::create(params, name + ".ada.shift", d, d, rng, true);
    } else {
        params.push_back(make_parameter(name + ".norm.gain", Matrix::Ones(1, d)));
        norm_gain_ = params.back().tensor;
        params.push_back(make_parameter(name + ".norm.bias", Matrix::Zero(1, d)));
        norm_bias_ = params.back().tensor;
    }
    if (spec.kind == LayerKind::attention) {
        wq_ = Linear::create(params, name + ".attn.wq", d, d, rng);
        wk_ = Linear::create(params, name + ".attn.wk", d, d, rng);
        wv_ = Linear::create(params, name + ".attn.wv", d, d, rng);
        wo_ = Linear::create(params, name + ".attn.wo", d, d, rng, true);
    } else {
        const Index hidden = d * spec.mlp_ratio;
        fc1_ = Linear::create(params, name + ".mlp.fc1", d, hidden, rng);
        fc2_ = Linear::create(params, name + ".mlp.fc2", hidden, d, rng, true);
    }
}

void ResidualLayer::zero_output() {
    Linear& out = spec_.kind == LayerKind::attention ? wo_ : fc2_;
    out.weight.mutable_value().setZero();
    out.bias.mutable_value().setZero();
}

Tensor ResidualLayer::forward(const Tensor& z, const Tensor* cond, const TokenLayout& layout,
                              Counters* counters) const {
    if (z.cols() != spec_.width) throw ShapeError("residual layer: token width mismatch");
    if (spec_.conditioning != (cond != nullptr)) {
        throw std::invalid_argument("residual layer: conditioning input presence mismatch");
    }
    if (counters) {
        ++counters->layer_evals_forward;
        if (grad_mode_enabled()) ++counters->stored_this_iteration;
    }
    Tensor h;
    if (spec_.conditioning) {
        if (cond->cols() != spec_.width || cond->rows() * layout.seq_len != z.rows()) {
            throw ShapeError("residual layer: conditioning shape mismatch");
        }
        const auto idx = repeat_index(cond->rows(), layout.seq_len);
        Tensor scale = gather_rows(scale_head_(*cond), idx);
        Tensor shift = gather_rows(shift_head_(*cond), idx);
        h = adaln_modulate(z, scale, shift);
    } else {
        h = layer_norm(z) * norm_gain_ + norm_bias_;
    }
    Tensor branch;
    if (spec_.kind == LayerKind::attention) {
        Tensor mixed = attention(wq_(h), wk_(h), wv_(h), layout.seq_len, spec_.heads, layout.mask);
        branch = wo_(mixed);
    } else {
        branch = fc2_(gelu(fc1_(h)));
    }
    return z + branch;
}

EmbeddingTable::EmbeddingTable(ParameterList& params, const std::string& name, Index vocab, Index width,
                               bool normalize, std::mt19937_64& rng)
    : normalize_(normalize) {
    params.push_back(make_parameter(name + ".table", normal_matrix(vocab, width, 1.0, rng)));
    table_ = params.back().tensor;
}

EmbeddingTable EmbeddingTable::frozen(Matrix table, bool normalize) {
    EmbeddingTable e;
    e.table_ = Tensor(std::move(table), false);
    e.normalize_ = normalize;
    return e;
}

Tensor EmbeddingTable::lookup(const std::vector<int>& ids) const {
    std::vector<Index> idx;
    idx.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) throw std::out_of_range("embedding id out of range");
        idx.push_back(id);
    }
    Tensor rows = gather_rows(table_, idx);
    return normalize_ ? l2_normalize_rows(rows) : rows;
}

Matrix EmbeddingTable::rows() const {
    if (!normalize_) return table_.value();
    Matrix m = table_.value();
    m.array().colwise() /= m.rowwise().norm().array();
    return m;
}

Tensor causal_attention(const Tensor& z, const AttentionMask& mask, int heads) {
    return attention(z, z, z, z.rows(), heads, &mask);
}

}  // namespace dblocks
