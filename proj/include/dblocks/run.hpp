#pragma once

#include "dblocks/tasks.hpp"
#include "dblocks/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dblocks {

using Json = nlohmann::ordered_json;

enum class TaskKind { mixture2d, clusters, char_masked, char_ar };
enum class TrainMode { blockwise, end_to_end, recurrent, unrolled, masked };

const char* to_string(TaskKind task);
const char* to_string(TrainMode mode);
TaskKind task_from_string(const std::string& name);
TrainMode mode_from_string(const std::string& name);

/// Invalid configuration; carries the offending key path.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    TaskKind task = TaskKind::mixture2d;
    TrainMode mode = TrainMode::blockwise;
    std::size_t layers = 8;
    std::size_t blocks = 2;
    std::vector<std::size_t> layer_distribution;
    Index width = 32;
    int heads = 2;
    int mlp_ratio = 4;
    // "mlp", "alternate" (attention, mlp, ...) or "auto": mlp for the
    // single-token mixture task, alternate otherwise.
    std::string layer_pattern = "auto";
    NoiseConfig noise;
    double gamma = 0.05;
    PartitionStrategy partition = PartitionStrategy::equi_probability;
    TrainConfig train;

    std::size_t sample_steps = 50;  // Euler steps (masked: demasking steps)
    Index eval_samples = 2000;
    std::size_t recurrent_iterations = 8;

    int classes = 8;
    Index seq_len = 64;
    std::size_t corpus_length = 200000;
    std::string corpus_path;
    std::size_t eval_nodes = 8;
    Index eval_sequences = 128;

    std::string out;

    // Throws ConfigError.
    void validate() const;
};

/// Unknown keys anywhere are rejected with ConfigError.
RunConfig parse_run_config(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);
Json to_json(const RunConfig& cfg);

// "auto" resolved against the task.
std::string resolved_layer_pattern(const RunConfig& cfg);
std::vector<LayerSpec> layer_specs(const RunConfig& cfg, std::size_t count);

/// Everything a run builds, constructed deterministically from the config.
struct RunModels {
    std::optional<ConvertedModel> blocks;     // blockwise
    std::optional<DenoiserNet> net;           // end_to_end, recurrent, unrolled
    std::optional<ClassifierNet> classifier;  // clusters end_to_end
    std::vector<MaskedDenoiser> masked;       // char_masked
    std::vector<double> time_boundaries;
    bool masked_single = false;  // masked end-to-end: one model over [0, 1]
    std::optional<TiedHead> head;
    Matrix token_embeddings;  // char_ar
    CharCorpus corpus;        // char tasks
    std::size_t train_tokens = 0;

    // Parameter groups in checkpoint order, one file each: (file stem, params).
    std::vector<std::pair<std::string, ParameterList>> checkpoint_groups() const;
};

RunModels build_models(const RunConfig& cfg);

struct RunResult {
    RunConfig config;
    RunModels models;
    TrainRecord record;
    Json metrics = Json::object();
};

RunResult run_training(const RunConfig& cfg);
// Task metric(s) on held-out data: energy_distance, accuracy, bpc.
Json evaluate(const RunConfig& cfg, const RunModels& models);

double layer_evals_per_iteration(const RunConfig& cfg);
Json memory_table(const RunConfig& cfg, const RunModels& models);
Json summary_json(const RunResult& result);

// Writes config.json, train.csv, summary.json and one checkpoint per block.
void write_run(const RunResult& result, const std::filesystem::path& dir);
// Rebuilds the models from dir/config.json and loads every checkpoint.
std::pair<RunConfig, RunModels> load_run(const std::filesystem::path& dir);

struct SampleOutput {
    Json summary = Json::object();
    std::vector<SampleTraceRow> trace;
};
// Writes samples.csv and trace.csv into `dir`.
SampleOutput sample_run(const RunConfig& cfg, const RunModels& models, std::size_t steps, std::uint64_t seed,
                        const std::filesystem::path& dir);

// Caps a requested worker count by DIFFBLOCKS_THREADS when set.
std::size_t capped_threads(std::size_t requested);

}  // namespace dblocks
