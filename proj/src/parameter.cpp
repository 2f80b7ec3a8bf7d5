#include "dblocks/parameter.hpp"

#include "dblocks/ops.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace dblocks {

Parameter make_parameter(std::string name, Matrix init) {
    return Parameter{std::move(name), Tensor(std::move(init), true)};
}

void zero_grads(const ParameterList& params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

void require_unique_names(const ParameterList& params) {
    std::set<std::string> seen;
    for (const auto& p : params) {
        if (!seen.insert(p.name).second) throw std::invalid_argument("duplicate parameter name: " + p.name);
    }
}

ParameterList select_prefix(const ParameterList& params, std::string_view prefix) {
    ParameterList out;
    for (const auto& p : params) {
        if (std::string_view(p.name).substr(0, prefix.size()) == prefix) out.push_back(p);
    }
    return out;
}

std::size_t parameter_count(const ParameterList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.tensor.size());
    return n;
}

Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

double GradCheckReport::max_error() const {
    double e = 0.0;
    for (const auto& entry : entries) e = std::max(e, entry.max_rel_error);
    return e;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const ParameterList& params,
                           double step) {
    zero_grads(params);
    Tensor loss = f();
    const double f0 = loss.item();
    backward(loss);
    const double floor = 1e-6 * std::max(1.0, std::abs(f0));

    GradCheckReport report;
    for (const auto& p : params) {
        Tensor t = p.tensor;
        const Matrix analytic = t.has_grad() ? t.grad() : Matrix::Zero(t.rows(), t.cols());
        Matrix& value = t.mutable_value();
        double worst = 0.0;
        for (Index i = 0; i < value.size(); ++i) {
            const double saved = value.data()[i];
            double plus = 0.0, minus = 0.0;
            {
                NoGradGuard guard;
                value.data()[i] = saved + step;
                plus = f().item();
                value.data()[i] = saved - step;
                minus = f().item();
            }
            value.data()[i] = saved;
            const double numeric = (plus - minus) / (2.0 * step);
            const double a = analytic.data()[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
        report.entries.push_back({p.name, worst});
    }
    zero_grads(params);
    return report;
}

void save_parameters(const std::filesystem::path& path, const ParameterList& params) {
    nlohmann::ordered_json root = nlohmann::ordered_json::object();
    for (const auto& p : params) {
        const Matrix& v = p.tensor.value();
        std::vector<double> data(v.data(), v.data() + v.size());
        root[p.name] = {{"shape", {v.rows(), v.cols()}}, {"data", std::move(data)}};
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << root.dump();
}

void load_parameters(const std::filesystem::path& path, const ParameterList& params) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    const auto root = nlohmann::json::parse(in);
    for (const auto& p : params) {
        if (!root.contains(p.name)) throw std::runtime_error("checkpoint missing parameter " + p.name);
        const auto& entry = root.at(p.name);
        const auto shape = entry.at("shape").get<std::vector<Index>>();
        const auto data = entry.at("data").get<std::vector<double>>();
        Tensor t = p.tensor;
        if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols() ||
            static_cast<Index>(data.size()) != t.size()) {
            throw ShapeError("checkpoint shape mismatch for " + p.name);
        }
        Matrix& v = t.mutable_value();
        std::copy(data.begin(), data.end(), v.data());
    }
}

}  // namespace dblocks
