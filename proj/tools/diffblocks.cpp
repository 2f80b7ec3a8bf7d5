// diffblocks: partition | train | sample | compare
#include "dblocks/run.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace dblocks;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::string> mode;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> blocks;
    std::string out;
};

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
}

RunConfig resolve(const std::string& path, const Overrides& o) {
    Json j = path.empty() ? Json::object() : read_json_file(path);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (o.mode) j["mode"] = *o.mode;
    if (o.blocks) j["blocks"] = *o.blocks;
    if (o.seed || o.steps) {
        if (!j.contains("train")) j["train"] = Json::object();
        if (o.seed) j["train"]["seed"] = *o.seed;
        if (o.steps) j["train"]["steps"] = *o.steps;
    }
    if (!o.out.empty()) j["out"] = o.out;
    return parse_run_config(j);
}

fs::path run_dir(const RunConfig& cfg) {
    if (!cfg.out.empty()) return cfg.out;
    return fs::path("runs") / (std::string(to_string(cfg.task)) + "_" + to_string(cfg.mode) + "_seed" +
                               std::to_string(cfg.train.seed));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// ---------------------------------------------------------------------------

int cmd_partition(const Overrides& o) {
    const RunConfig cfg = resolve(o.config, o);
    Json report;
    report["blocks"] = cfg.blocks;
    report["gamma"] = cfg.gamma;
    report["noise"] = to_json(cfg)["noise"];
    std::ostringstream csv;
    csv << std::setprecision(17) << "strategy,block,sigma_lo,sigma_hi,mass,train_lo,train_hi\n";
    Json strategies = Json::array();
    for (PartitionStrategy s : {PartitionStrategy::equi_probability, PartitionStrategy::uniform_log}) {
        const char* name = s == PartitionStrategy::equi_probability ? "equi_probability" : "uniform_log";
        const Partition p = expand_overlap(partition_boundaries(cfg.noise, cfg.blocks, s), cfg.gamma, cfg.noise);
        Json entry;
        entry["strategy"] = name;
        entry["boundaries"] = p.boundaries;
        Json intervals = Json::array();
        for (std::size_t b = 1; b <= p.blocks(); ++b) {
            const NoiseRange r = p.interval(b);
            const NoiseRange t = p.training_range(b);
            const double mass = interval_mass(cfg.noise, r.lo, r.hi);
            intervals.push_back({{"block", b},
                                 {"sigma_lo", r.lo},
                                 {"sigma_hi", r.hi},
                                 {"mass", mass},
                                 {"train_lo", t.lo},
                                 {"train_hi", t.hi}});
            csv << name << ',' << b << ',' << r.lo << ',' << r.hi << ',' << mass << ',' << t.lo << ',' << t.hi << '\n';
        }
        entry["intervals"] = intervals;
        strategies.push_back(entry);
    }
    report["strategies"] = strategies;
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        write_text(fs::path(o.out) / "partition.json", report.dump(2) + "\n");
        write_text(fs::path(o.out) / "partition.csv", csv.str());
    }
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_train(const Overrides& o) {
    if (o.config.empty()) throw ConfigError("train requires --config");
    RunConfig cfg = resolve(o.config, o);
    const fs::path dir = run_dir(cfg);
    const RunResult result = run_training(cfg);
    write_run(result, dir);
    Json out = summary_json(result);
    out["run_dir"] = dir.string();
    std::cout << out.dump(2) << '\n';
    return 0;
}

int cmd_sample(const std::string& dir, const Overrides& o) {
    auto [cfg, models] = load_run(dir);
    const std::size_t steps = o.steps.value_or(cfg.sample_steps);
    const std::uint64_t seed = o.seed.value_or(cfg.train.seed);
    const fs::path out = o.out.empty() ? fs::path(dir) : fs::path(o.out);
    SampleOutput s = sample_run(cfg, models, steps, seed, out);
    s.summary["run_dir"] = dir;
    write_text(out / "sample_summary.json", s.summary.dump(2) + "\n");
    std::cout << s.summary.dump(2) << '\n';
    return 0;
}

double ratio(double a, double b) { return b != 0.0 ? a / b : std::nan(""); }

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

int cmd_compare(const std::vector<std::string>& configs, const Overrides& o) {
    if (configs.size() != 2) throw ConfigError("compare needs exactly two --config files");
    Overrides per = o;
    per.out.clear();
    RunConfig a = resolve(configs[0], per);
    RunConfig b = resolve(configs[1], per);
    if (a.task != b.task) throw ConfigError("compare: configs use different tasks");
    const fs::path root = o.out.empty() ? fs::path("runs") / "compare" : fs::path(o.out);
    a.out = (root / "a").string();
    b.out = (root / "b").string();
    const RunResult ra = run_training(a);
    write_run(ra, a.out);
    const RunResult rb = run_training(b);
    write_run(rb, b.out);

    const auto budget = [](const RunResult& r) { return static_cast<double>(r.record.counters.layer_evals_forward); };
    Json report;
    report["task"] = to_string(a.task);
    report["runs"] = Json::array({{{"label", "a"}, {"mode", to_string(a.mode)}, {"seed", a.train.seed},
                                   {"config", configs[0]}, {"run_dir", a.out}},
                                  {{"label", "b"}, {"mode", to_string(b.mode)}, {"seed", b.train.seed},
                                   {"config", configs[1]}, {"run_dir", b.out}}});
    Json metrics = Json::array();
    std::ostringstream csv;
    csv << std::setprecision(17) << "name,a,b,delta,ratio\n";
    const auto add = [&](const std::string& name, double va, double vb) {
        metrics.push_back({{"name", name},
                           {"a", number_or_null(va)},
                           {"b", number_or_null(vb)},
                           {"delta", number_or_null(vb - va)},
                           {"ratio", number_or_null(ratio(vb, va))}});
        csv << name << ',' << va << ',' << vb << ',' << vb - va << ',' << ratio(vb, va) << '\n';
    };
    for (const auto& [key, value] : ra.metrics.items()) {
        if (value.is_number() && rb.metrics.contains(key)) add(key, value.get<double>(), rb.metrics[key].get<double>());
    }
    const Counters& ca = ra.record.counters;
    const Counters& cb = rb.record.counters;
    add("layer_evals_forward", static_cast<double>(ca.layer_evals_forward), static_cast<double>(cb.layer_evals_forward));
    add("layer_evals_backward", static_cast<double>(ca.layer_evals_backward),
        static_cast<double>(cb.layer_evals_backward));
    add("peak_stored_activation_layers", static_cast<double>(ca.peak_stored_activation_layers),
        static_cast<double>(cb.peak_stored_activation_layers));
    add("parameter_gradient_bytes_touched", static_cast<double>(ca.parameter_gradient_bytes_touched),
        static_cast<double>(cb.parameter_gradient_bytes_touched));
    report["metrics"] = metrics;
    report["compute_parity"] = ca.layer_evals_forward == cb.layer_evals_forward;
    // Larger peak over smaller peak; B for block-wise vs end-to-end with uniform blocks.
    const double pa = static_cast<double>(ca.peak_stored_activation_layers);
    const double pb = static_cast<double>(cb.peak_stored_activation_layers);
    report["memory_ratio"] = number_or_null(std::max(pa, pb) / std::min(pa, pb));
    report["matched_budget"] = budget(ra) == budget(rb);

    fs::create_directories(root);
    write_text(root / "report.json", report.dump(2) + "\n");
    write_text(root / "report.csv", csv.str());
    std::cout << report.dump(2) << '\n';
    return 0;
}

void print_error(const std::string& type, const std::string& message) {
    std::cerr << Json{{"error", type}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Block-wise diffusion training: partition, train, sample, compare"};
    app.require_subcommand(1);
    Overrides o;
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t steps = 0, blocks = 0;
    const auto common = [&](CLI::App* sub) {
        sub->add_option("--mode", mode, "blockwise | end_to_end | recurrent | unrolled | masked");
        sub->add_option("--seed", seed, "RNG seed (overrides train.seed)");
        sub->add_option("--steps", steps, "training steps, or sampling steps for sample");
        sub->add_option("--blocks", blocks, "number of blocks B");
        sub->add_option("--out", o.out, "output directory");
    };

    CLI::App* partition = app.add_subcommand("partition", "noise partition report");
    partition->add_option("--config", o.config, "run config JSON");
    common(partition);

    CLI::App* train = app.add_subcommand("train", "train a run and write its directory");
    train->add_option("--config", o.config, "run config JSON")->required();
    common(train);

    std::string sample_dir;
    CLI::App* sample = app.add_subcommand("sample", "sample from a trained run");
    sample->add_option("run_dir", sample_dir, "run directory")->required();
    common(sample);

    std::vector<std::string> configs;
    CLI::App* compare = app.add_subcommand("compare", "train two configs and compare them");
    compare->add_option("--config", configs, "two run configs (a then b)")->required()->expected(2);
    common(compare);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage_error", e.what());
        return 2;
    }

    CLI::App* active = app.get_subcommands().front();
    if (active->count("--mode")) o.mode = mode;
    if (active->count("--seed")) o.seed = seed;
    if (active->count("--steps")) o.steps = steps;
    if (active->count("--blocks")) o.blocks = blocks;

    try {
        if (active == partition) return cmd_partition(o);
        if (active == train) return cmd_train(o);
        if (active == sample) return cmd_sample(sample_dir, o);
        return cmd_compare(configs, o);
    } catch (const ConfigError& e) {
        print_error("config_error", e.what());
        return 2;
    } catch (const NumericError& e) {
        print_error("numeric_error", e.what());
        return 3;
    } catch (const std::exception& e) {
        print_error("runtime_error", e.what());
        return 1;
    }
}
