#pragma once

#include "dblocks/tensor.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dblocks {

// A trainable leaf tensor. Names are dotted paths whose first component
// identifies the owner, e.g. "block2.layer1.attn.wq".
struct Parameter {
    std::string name;
    Tensor tensor;
};

using ParameterList = std::vector<Parameter>;

Parameter make_parameter(std::string name, Matrix init);

void zero_grads(const ParameterList& params);
// Throws std::invalid_argument on duplicate names.
void require_unique_names(const ParameterList& params);
ParameterList select_prefix(const ParameterList& params, std::string_view prefix);
std::size_t parameter_count(const ParameterList& params);

Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng);

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_error() const;
};

/// Compares reverse-mode gradients of `f` against central differences, one
/// parameter element at a time. The per-element error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6 * max(1, |f|)), so
/// gradients that are zero on both sides score 0. `f` must rebuild its graph on
/// every call and be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& f, const ParameterList& params,
                           double step = 1e-5);

// Flat JSON object: name -> {"shape": [r, c], "data": [...]}. Doubles are written
// with round-trip precision.
void save_parameters(const std::filesystem::path& path, const ParameterList& params);
// Loads every parameter in `params` by name; throws when a name is missing or a
// shape differs.
void load_parameters(const std::filesystem::path& path, const ParameterList& params);

}  // namespace dblocks
