#include "dblocks/run.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <stdexcept>

namespace dblocks {

namespace {

template <typename E>
struct Names {
    E value;
    const char* name;
};

constexpr Names<TaskKind> kTasks[] = {{TaskKind::mixture2d, "mixture2d"},
                                      {TaskKind::clusters, "clusters"},
                                      {TaskKind::char_masked, "char_masked"},
                                      {TaskKind::char_ar, "char_ar"}};
constexpr Names<TrainMode> kModes[] = {{TrainMode::blockwise, "blockwise"},
                                       {TrainMode::end_to_end, "end_to_end"},
                                       {TrainMode::recurrent, "recurrent"},
                                       {TrainMode::unrolled, "unrolled"},
                                       {TrainMode::masked, "masked"}};

template <typename E, std::size_t N>
const char* name_of(const Names<E> (&table)[N], E v) {
    for (const auto& n : table) {
        if (n.value == v) return n.name;
    }
    return "unknown";
}

template <typename E, std::size_t N>
E value_of(const Names<E> (&table)[N], const std::string& s, const char* what) {
    for (const auto& n : table) {
        if (s == n.name) return n.value;
    }
    throw ConfigError(std::string("unknown ") + what + ": " + s);
}

// Reads known keys from one JSON object and rejects the rest.
class KeyReader {
public:
    KeyReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(where() + "expected an object");
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where() + key + ": wrong type (" + e.what() + ")");
        }
    }

    const Json* object(const std::string& key) {
        known_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!known_.count(key)) throw ConfigError("unknown config key: " + where() + key);
        }
    }

private:
    std::string where() const { return path_.empty() ? "" : path_ + "."; }

    const Json& j_;
    std::string path_;
    std::set<std::string> known_;
};

const char* strategy_name(PartitionStrategy s) {
    return s == PartitionStrategy::equi_probability ? "equi_probability" : "uniform_log";
}

std::vector<std::size_t> block_sizes(const RunConfig& cfg) {
    if (!cfg.layer_distribution.empty()) return cfg.layer_distribution;
    std::vector<std::size_t> sizes;
    for (std::size_t b = 0; b < cfg.blocks; ++b) sizes.push_back(cfg.layers / cfg.blocks + (b < cfg.layers % cfg.blocks ? 1 : 0));
    return sizes;
}

bool is_blockwise(const RunConfig& cfg) { return cfg.mode == TrainMode::blockwise || cfg.mode == TrainMode::masked; }

constexpr std::uint64_t kHeldOutSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kTokenEmbeddingSeed = 0x7a11'0e5dULL;
constexpr Index kTokenEmbeddingDim = 8;

}  // namespace

const char* to_string(TaskKind task) { return name_of(kTasks, task); }
const char* to_string(TrainMode mode) { return name_of(kModes, mode); }
TaskKind task_from_string(const std::string& name) { return value_of(kTasks, name, "task"); }
TrainMode mode_from_string(const std::string& name) { return value_of(kModes, name, "mode"); }

void RunConfig::validate() const {
    const auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (layers == 0) fail("layers must be positive");
    if (blocks == 0) fail("blocks must be positive");
    if (is_blockwise(*this) && blocks > layers) fail("blocks must not exceed layers");
    if (!layer_distribution.empty()) {
        if (layer_distribution.size() != blocks) fail("layer_distribution needs one entry per block");
        std::size_t total = 0;
        for (std::size_t s : layer_distribution) {
            if (s == 0) fail("layer_distribution entries must be positive");
            total += s;
        }
        if (total != layers) fail("layer_distribution must sum to layers");
    }
    if (width <= 0) fail("width must be positive");
    if (heads <= 0 || width % heads != 0) fail("width must be divisible by heads");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (layer_pattern != "mlp" && layer_pattern != "alternate" && layer_pattern != "auto") {
        fail("layer_pattern must be mlp, alternate or auto");
    }
    if (layer_pattern == "mlp" && (task == TaskKind::clusters || task == TaskKind::char_ar)) {
        fail("layer_pattern mlp cannot mix tokens; this task needs attention layers");
    }
    try {
        noise.validate();
        train.validate();
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    if (!(gamma >= 0.0)) fail("gamma must be non-negative");
    if (sample_steps == 0) fail("sample_steps must be positive");
    if (eval_samples <= 0) fail("eval_samples must be positive");
    if (recurrent_iterations == 0) fail("recurrent_iterations must be positive");
    if (seq_len <= 0) fail("seq_len must be positive");
    if (eval_nodes == 0 || eval_sequences <= 0) fail("eval_nodes and eval_sequences must be positive");

    const bool ok = [&] {
        switch (task) {
            case TaskKind::mixture2d: return mode != TrainMode::masked;
            case TaskKind::clusters:
            case TaskKind::char_ar: return mode == TrainMode::blockwise || mode == TrainMode::end_to_end;
            case TaskKind::char_masked: return mode == TrainMode::masked || mode == TrainMode::end_to_end;
        }
        return false;
    }();
    if (!ok) fail(std::string("mode ") + to_string(mode) + " is not available for task " + to_string(task));
    if (task == TaskKind::clusters) cluster_centroids(classes);  // range check
    if (task == TaskKind::char_masked && mode == TrainMode::masked && sample_steps < blocks) {
        fail("sample_steps must be at least blocks");
    }
    if ((task == TaskKind::char_ar || task == TaskKind::char_masked) && corpus_path.empty() &&
        corpus_length < static_cast<std::size_t>(seq_len) * 20) {
        fail("corpus_length too short for seq_len");
    }
}

RunConfig parse_run_config(const Json& j) {
    RunConfig cfg;
    KeyReader r(j, "");
    std::string task = to_string(cfg.task), mode = to_string(cfg.mode), partition = strategy_name(cfg.partition);
    r.read("task", task);
    r.read("mode", mode);
    r.read("layers", cfg.layers);
    r.read("blocks", cfg.blocks);
    r.read("layer_distribution", cfg.layer_distribution);
    r.read("width", cfg.width);
    r.read("heads", cfg.heads);
    r.read("mlp_ratio", cfg.mlp_ratio);
    r.read("layer_pattern", cfg.layer_pattern);
    r.read("gamma", cfg.gamma);
    r.read("partition", partition);
    r.read("sample_steps", cfg.sample_steps);
    r.read("eval_samples", cfg.eval_samples);
    r.read("recurrent_iterations", cfg.recurrent_iterations);
    r.read("classes", cfg.classes);
    r.read("seq_len", cfg.seq_len);
    r.read("corpus_length", cfg.corpus_length);
    r.read("corpus_path", cfg.corpus_path);
    r.read("eval_nodes", cfg.eval_nodes);
    r.read("eval_sequences", cfg.eval_sequences);
    r.read("out", cfg.out);
    if (const Json* n = r.object("noise")) {
        KeyReader nr(*n, "noise");
        nr.read("p_mean", cfg.noise.p_mean);
        nr.read("p_std", cfg.noise.p_std);
        nr.read("sigma_min", cfg.noise.sigma_min);
        nr.read("sigma_max", cfg.noise.sigma_max);
        nr.read("sigma_data", cfg.noise.sigma_data);
        nr.finish();
    }
    if (const Json* t = r.object("train")) {
        KeyReader tr(*t, "train");
        std::string schedule = cfg.train.schedule == LrSchedule::cosine ? "cosine" : "constant";
        std::string sampling = "uniform", loss = "squared_error";
        tr.read("steps", cfg.train.steps);
        tr.read("batch_size", cfg.train.batch_size);
        tr.read("learning_rate", cfg.train.learning_rate);
        tr.read("weight_decay", cfg.train.weight_decay);
        tr.read("warmup_steps", cfg.train.warmup_steps);
        tr.read("schedule", schedule);
        tr.read("seed", cfg.train.seed);
        tr.read("block_sampling", sampling);
        tr.read("forced_block", cfg.train.forced_block);
        tr.read("loss", loss);
        tr.read("weighted_loss", cfg.train.weighted_loss);
        tr.read("parallel", cfg.train.parallel);
        tr.read("threads", cfg.train.threads);
        tr.finish();
        if (schedule == "constant") cfg.train.schedule = LrSchedule::constant;
        else if (schedule == "cosine") cfg.train.schedule = LrSchedule::cosine;
        else throw ConfigError("train.schedule must be constant or cosine");
        if (sampling == "uniform") cfg.train.block_sampling = BlockSampling::uniform;
        else if (sampling == "round_robin") cfg.train.block_sampling = BlockSampling::round_robin;
        else if (sampling == "forced") cfg.train.block_sampling = BlockSampling::forced;
        else throw ConfigError("train.block_sampling must be uniform, round_robin or forced");
        if (loss == "squared_error") cfg.train.loss = LossKind::squared_error;
        else if (loss == "cross_entropy") cfg.train.loss = LossKind::cross_entropy;
        else throw ConfigError("train.loss must be squared_error or cross_entropy");
    }
    r.finish();
    cfg.task = task_from_string(task);
    cfg.mode = mode_from_string(mode);
    if (partition == "equi_probability") cfg.partition = PartitionStrategy::equi_probability;
    else if (partition == "uniform_log") cfg.partition = PartitionStrategy::uniform_log;
    else throw ConfigError("partition must be equi_probability or uniform_log");
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    Json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_run_config(j);
}

Json to_json(const RunConfig& c) {
    Json j;
    j["task"] = to_string(c.task);
    j["mode"] = to_string(c.mode);
    j["layers"] = c.layers;
    j["blocks"] = c.blocks;
    j["layer_distribution"] = c.layer_distribution;
    j["width"] = c.width;
    j["heads"] = c.heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["layer_pattern"] = resolved_layer_pattern(c);
    j["noise"] = {{"p_mean", c.noise.p_mean},
                  {"p_std", c.noise.p_std},
                  {"sigma_min", c.noise.sigma_min},
                  {"sigma_max", c.noise.sigma_max},
                  {"sigma_data", c.noise.sigma_data}};
    j["gamma"] = c.gamma;
    j["partition"] = strategy_name(c.partition);
    const char* sampling = c.train.block_sampling == BlockSampling::uniform       ? "uniform"
                           : c.train.block_sampling == BlockSampling::round_robin ? "round_robin"
                                                                                  : "forced";
    j["train"] = {{"steps", c.train.steps},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"weight_decay", c.train.weight_decay},
                  {"warmup_steps", c.train.warmup_steps},
                  {"schedule", c.train.schedule == LrSchedule::cosine ? "cosine" : "constant"},
                  {"seed", c.train.seed},
                  {"block_sampling", sampling},
                  {"forced_block", c.train.forced_block},
                  {"loss", c.train.loss == LossKind::cross_entropy ? "cross_entropy" : "squared_error"},
                  {"weighted_loss", c.train.weighted_loss},
                  {"parallel", c.train.parallel},
                  {"threads", c.train.threads}};
    j["sample_steps"] = c.sample_steps;
    j["eval_samples"] = c.eval_samples;
    j["recurrent_iterations"] = c.recurrent_iterations;
    j["classes"] = c.classes;
    j["seq_len"] = c.seq_len;
    j["corpus_length"] = c.corpus_length;
    j["corpus_path"] = c.corpus_path;
    j["eval_nodes"] = c.eval_nodes;
    j["eval_sequences"] = c.eval_sequences;
    j["out"] = c.out;
    return j;
}

std::string resolved_layer_pattern(const RunConfig& cfg) {
    if (cfg.layer_pattern != "auto") return cfg.layer_pattern;
    return cfg.task == TaskKind::mixture2d ? "mlp" : "alternate";
}

std::vector<LayerSpec> layer_specs(const RunConfig& cfg, std::size_t count) {
    const bool alternate = resolved_layer_pattern(cfg) == "alternate";
    std::vector<LayerSpec> specs;
    for (std::size_t l = 0; l < count; ++l) {
        LayerSpec s;
        s.kind = (alternate && l % 2 == 0) ? LayerKind::attention : LayerKind::mlp;
        s.width = cfg.width;
        s.heads = cfg.heads;
        s.mlp_ratio = cfg.mlp_ratio;
        specs.push_back(s);
    }
    return specs;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, ParameterList>> RunModels::checkpoint_groups() const {
    std::vector<std::pair<std::string, ParameterList>> groups;
    if (blocks) {
        for (const auto& b : blocks->blocks) groups.emplace_back("block" + std::to_string(b.index()), b.parameters());
    }
    if (net) groups.emplace_back("model", net->parameters());
    if (classifier) groups.emplace_back("model", classifier->parameters());
    if (masked_single) {
        groups.emplace_back("model", masked.front().parameters());
    } else {
        for (std::size_t b = 0; b < masked.size(); ++b) {
            groups.emplace_back("block" + std::to_string(b + 1), masked[b].parameters());
        }
    }
    return groups;
}

RunModels build_models(const RunConfig& cfg) {
    cfg.validate();
    RunModels m;
    const std::uint64_t seed = cfg.train.seed;
    std::vector<LayerSpec> specs = layer_specs(cfg, cfg.layers);
    ConvertOptions opts;
    opts.blocks = cfg.blocks;
    opts.gamma = cfg.gamma;
    opts.distribution = cfg.layer_distribution;
    opts.strategy = cfg.partition;
    opts.seed = seed;

    if (cfg.task == TaskKind::char_ar || cfg.task == TaskKind::char_masked) {
        m.corpus = cfg.corpus_path.empty() ? gen_char_corpus(seed, cfg.corpus_length) : load_char_corpus(cfg.corpus_path);
        m.train_tokens = m.corpus.ids.size() * 9 / 10;
        if (static_cast<Index>(m.corpus.ids.size() - m.train_tokens) < cfg.seq_len * cfg.eval_sequences ||
            static_cast<Index>(m.train_tokens) < cfg.seq_len) {
            throw ConfigError("corpus too short for seq_len and eval_sequences");
        }
    }

    TokenShape shape;
    shape.width = cfg.width;
    switch (cfg.task) {
        case TaskKind::mixture2d:
            shape.z_tokens = 1;
            shape.z_dim = 2;
            break;
        case TaskKind::clusters: {
            const Matrix labels = label_embeddings(cfg.classes);
            m.head = TiedHead{labels};
            shape.x_tokens = kClusterTokens;
            shape.x_dim = kClusterDim / kClusterTokens;
            shape.z_tokens = 1;
            shape.z_dim = labels.cols();
            break;
        }
        case TaskKind::char_ar:
            m.token_embeddings = random_unit_embeddings(m.corpus.vocab, kTokenEmbeddingDim, kTokenEmbeddingSeed);
            m.head = TiedHead{m.token_embeddings};
            shape = ar_token_shape(cfg.width, cfg.seq_len, m.token_embeddings);
            break;
        case TaskKind::char_masked: {
            std::mt19937_64 rng(seed);
            if (cfg.mode == TrainMode::masked) {
                m.time_boundaries = time_boundaries(MaskSchedule::linear(), cfg.blocks);
                std::size_t next = 0;
                const auto sizes = block_sizes(cfg);
                for (std::size_t b = 0; b < sizes.size(); ++b) {
                    std::vector<LayerSpec> group(specs.begin() + static_cast<std::ptrdiff_t>(next),
                                                 specs.begin() + static_cast<std::ptrdiff_t>(next + sizes[b]));
                    next += sizes[b];
                    m.masked.emplace_back("block" + std::to_string(b + 1), group, m.corpus.vocab, cfg.seq_len, rng);
                }
            } else {
                m.time_boundaries = {0.0, 1.0};
                m.masked_single = true;
                m.masked.emplace_back("model", specs, m.corpus.vocab, cfg.seq_len, rng);
            }
            return m;
        }
    }

    if (cfg.mode == TrainMode::blockwise) {
        m.blocks = convert(specs, shape, cfg.noise, opts);
    } else if (cfg.task == TaskKind::clusters) {
        std::mt19937_64 rng(seed);
        m.classifier = ClassifierNet("model", specs, kClusterTokens, kClusterDim / kClusterTokens, cfg.classes, rng);
    } else {
        for (auto& s : specs) s.conditioning = true;
        std::mt19937_64 rng(seed);
        m.net = DenoiserNet("model", specs, shape, rng);
    }
    return m;
}

// ---------------------------------------------------------------------------

RunResult run_training(const RunConfig& cfg) {
    RunResult result;
    result.config = cfg;
    result.models = build_models(cfg);
    RunModels& m = result.models;
    TrainConfig train = cfg.train;
    train.threads = capped_threads(train.threads);

    LossObjective objective;
    objective.kind = cfg.train.loss;
    objective.weighted = cfg.train.weighted_loss;
    if (m.head) objective.head = &*m.head;
    if (objective.kind == LossKind::cross_entropy && !objective.head) {
        throw ConfigError("cross_entropy loss needs a task with discrete targets");
    }

    const std::vector<int> train_ids(m.corpus.ids.begin(),
                                     m.corpus.ids.begin() + static_cast<std::ptrdiff_t>(m.train_tokens));
    if (cfg.task == TaskKind::char_masked) {
        SequenceSource data = corpus_windows(train_ids, cfg.seq_len);
        const MaskSchedule schedule = MaskSchedule::linear();
        result.record = cfg.mode == TrainMode::masked
                            ? train_masked_blockwise(m.masked, m.time_boundaries, data, cfg.seq_len, schedule, train)
                            : train_masked_end_to_end(m.masked.front(), data, cfg.seq_len, schedule, train);
    } else {
        BatchSource data;
        switch (cfg.task) {
            case TaskKind::mixture2d: data = mixture_source(); break;
            case TaskKind::clusters: data = cluster_source(cfg.classes); break;
            case TaskKind::char_ar: data = ar_source(train_ids, cfg.seq_len, m.token_embeddings); break;
            case TaskKind::char_masked: break;
        }
        switch (cfg.mode) {
            case TrainMode::blockwise:
                result.record = train_blockwise(*m.blocks, data, cfg.noise, objective, train);
                break;
            case TrainMode::end_to_end:
                result.record = m.classifier ? train_classifier(*m.classifier, data, train)
                                             : train_end_to_end(*m.net, data, cfg.noise, objective, train);
                break;
            case TrainMode::recurrent:
                result.record = train_recurrent_single_pass(*m.net, data, cfg.noise, objective, train);
                break;
            case TrainMode::unrolled:
                result.record = train_unrolled(*m.net, data, cfg.noise, cfg.recurrent_iterations, train);
                break;
            case TrainMode::masked: break;
        }
    }
    result.metrics = evaluate(cfg, m);
    return result;
}

namespace {

ConvertedModel diffusion_model(const RunConfig& cfg, const RunModels& m) {
    if (m.blocks) return *m.blocks;
    if (m.net) return single_block_model(*m.net, cfg.noise);
    throw std::logic_error("run has no diffusion model");
}

// Weight-tied passes per denoiser call: K for the looped baseline.
std::size_t depth_loops(const RunConfig& cfg) {
    return cfg.mode == TrainMode::unrolled ? cfg.recurrent_iterations : 1;
}

std::size_t inference_steps(const RunConfig& cfg) {
    return cfg.mode == TrainMode::recurrent || cfg.mode == TrainMode::unrolled ? cfg.recurrent_iterations
                                                                               : cfg.sample_steps;
}

std::vector<int> held_out_sequences(const RunConfig& cfg, const RunModels& m) {
    const std::vector<int> rest(m.corpus.ids.begin() + static_cast<std::ptrdiff_t>(m.train_tokens), m.corpus.ids.end());
    return corpus_sequences(rest, cfg.seq_len, cfg.eval_sequences);
}

std::vector<MaskedPredictor> predictors(const RunModels& m) {
    std::vector<MaskedPredictor> p;
    for (const auto& d : m.masked) p.push_back(d.predictor());
    return p;
}

}  // namespace

Json evaluate(const RunConfig& cfg, const RunModels& m) {
    Json metrics = Json::object();
    std::mt19937_64 rng(cfg.train.seed ^ kHeldOutSalt);
    switch (cfg.task) {
        case TaskKind::mixture2d: {
            const Matrix held = gen_mixture2d(cfg.train.seed ^ kHeldOutSalt, cfg.eval_samples);
            const Matrix samples = sample(diffusion_model(cfg, m), Matrix(), cfg.eval_samples, inference_steps(cfg),
                                          cfg.noise, rng, nullptr, depth_loops(cfg));
            metrics["energy_distance"] = energy_distance(samples, held);
            metrics["inference_steps"] = inference_steps(cfg);
            break;
        }
        case TaskKind::clusters: {
            const ClusterData test = gen_cluster_classify(cfg.train.seed ^ kHeldOutSalt, cfg.eval_samples, cfg.classes);
            const std::vector<int> pred =
                m.classifier ? m.classifier->predict(as_feature_tokens(test.features), cfg.eval_samples)
                             : classify_infer(*m.blocks, *m.head, test.features, cfg.sample_steps, cfg.noise, rng);
            metrics["accuracy"] = accuracy(pred, test.labels);
            metrics["nearest_centroid_accuracy"] =
                accuracy(nearest_centroid(test.features, cluster_centroids(cfg.classes)), test.labels);
            break;
        }
        case TaskKind::char_ar: {
            const std::vector<int> seqs = held_out_sequences(cfg, m);
            metrics["next_token_accuracy"] =
                ar_accuracy(diffusion_model(cfg, m), *m.head, seqs, cfg.seq_len, cfg.sample_steps, cfg.noise, rng);
            break;
        }
        case TaskKind::char_masked: {
            const std::vector<int> seqs = held_out_sequences(cfg, m);
            metrics["bpc"] = masked_bits_per_char(predictors(m), m.time_boundaries, seqs, cfg.seq_len,
                                                  m.masked.front().mask_id(), cfg.eval_nodes, MaskSchedule::linear(),
                                                  rng);
            if (cfg.corpus_path.empty()) {
                const MarkovSource& src = char_source();
                metrics["entropy_rate_bits"] = src.entropy_rate_bits;
                double exact = 0.0;
                for (Index s = 0; s < cfg.eval_sequences; ++s) {
                    exact += markov_bits_per_char(
                        src, std::vector<int>(seqs.begin() + s * cfg.seq_len, seqs.begin() + (s + 1) * cfg.seq_len));
                }
                metrics["source_bpc"] = exact / static_cast<double>(cfg.eval_sequences);
            }
            break;
        }
    }
    return metrics;
}

// ---------------------------------------------------------------------------

double layer_evals_per_iteration(const RunConfig& cfg) {
    const double L = static_cast<double>(cfg.layers);
    switch (cfg.mode) {
        case TrainMode::blockwise:
        case TrainMode::masked: return L / static_cast<double>(cfg.blocks);
        case TrainMode::end_to_end:
        case TrainMode::recurrent: return L;
        case TrainMode::unrolled: return L * static_cast<double>(cfg.recurrent_iterations);
    }
    return L;
}

Json memory_table(const RunConfig& cfg, const RunModels& m) {
    MemoryModel mm;
    const auto groups = m.checkpoint_groups();
    std::size_t per_layer = 0;
    for (const auto& p : groups.front().second) {
        if (p.name.find(".layer1.") != std::string::npos) per_layer += static_cast<std::size_t>(p.tensor.size());
    }
    Index tokens = 1;
    switch (cfg.task) {
        case TaskKind::mixture2d: tokens = 1; break;
        case TaskKind::clusters: tokens = kClusterTokens + 1; break;
        case TaskKind::char_ar: tokens = 2 * cfg.seq_len; break;
        case TaskKind::char_masked: tokens = cfg.seq_len; break;
    }
    mm.P = static_cast<double>(per_layer);
    mm.A = static_cast<double>(cfg.train.batch_size * tokens * cfg.width);
    mm.L = cfg.layers;
    mm.B = std::min(cfg.blocks, cfg.layers);
    Json j;
    j["P"] = mm.P;
    j["A"] = mm.A;
    j["L"] = mm.L;
    j["B"] = mm.B;
    j["optimizer_multiplier"] = mm.optimizer_multiplier;
    for (MemoryMode mode : {MemoryMode::standard, MemoryMode::checkpointing, MemoryMode::diffblocks,
                            MemoryMode::diffblocks_checkpointing}) {
        j[to_string(mode)] = memory_model_eval(mm, mode);
    }
    return j;
}

Json summary_json(const RunResult& r) {
    Json j;
    j["task"] = to_string(r.config.task);
    j["mode"] = to_string(r.config.mode);
    j["seed"] = r.config.train.seed;
    Json losses = Json::object();
    for (std::size_t b = 1; b <= r.record.iterations_per_block.size(); ++b) {
        const double v = r.record.final_loss(b);
        losses["block" + std::to_string(b)] = std::isfinite(v) ? Json(v) : Json(nullptr);
    }
    j["final_losses"] = losses;
    j["iterations_per_block"] = r.record.iterations_per_block;
    const Counters& c = r.record.counters;
    j["counters"] = {{"layer_evals_forward", c.layer_evals_forward},
                     {"layer_evals_backward", c.layer_evals_backward},
                     {"peak_stored_activation_layers", c.peak_stored_activation_layers},
                     {"parameter_gradient_bytes_touched", c.parameter_gradient_bytes_touched}};
    j["peak_stored_activation_layers"] = c.peak_stored_activation_layers;
    j["peak_per_block"] = r.record.peak_per_block;
    j["layer_evals_per_iteration"] = layer_evals_per_iteration(r.config);
    j["memory_model"] = memory_table(r.config, r.models);
    j["metrics"] = r.metrics;
    j["config"] = to_json(r.config);
    return j;
}

namespace {

void write_json(const std::filesystem::path& path, const Json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace

void write_run(const RunResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_json(dir / "config.json", to_json(result.config));
    result.record.write_csv(dir / "train.csv");
    write_json(dir / "summary.json", summary_json(result));
    for (const auto& [stem, params] : result.models.checkpoint_groups()) save_parameters(dir / (stem + ".json"), params);
}

std::pair<RunConfig, RunModels> load_run(const std::filesystem::path& dir) {
    RunConfig cfg = load_run_config(dir / "config.json");
    RunModels models = build_models(cfg);
    for (const auto& [stem, params] : models.checkpoint_groups()) {
        const auto path = dir / (stem + ".json");
        if (!std::filesystem::exists(path)) throw std::runtime_error("missing checkpoint " + path.string());
        load_parameters(path, params);
    }
    return {cfg, std::move(models)};
}

SampleOutput sample_run(const RunConfig& cfg, const RunModels& m, std::size_t steps, std::uint64_t seed,
                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    SampleOutput out;
    std::mt19937_64 rng(seed);
    std::ofstream samples(dir / "samples.csv");
    if (!samples) throw std::runtime_error("cannot write samples");
    samples << std::setprecision(17);
    out.summary["steps"] = steps;
    out.summary["seed"] = seed;

    switch (cfg.task) {
        case TaskKind::mixture2d: {
            const Matrix s = sample(diffusion_model(cfg, m), Matrix(), cfg.eval_samples, steps, cfg.noise, rng,
                                    &out.trace, depth_loops(cfg));
            samples << "x,y\n";
            for (Index i = 0; i < s.rows(); ++i) samples << s(i, 0) << ',' << s(i, 1) << '\n';
            out.summary["energy_distance"] =
                energy_distance(s, gen_mixture2d(cfg.train.seed ^ kHeldOutSalt, cfg.eval_samples));
            break;
        }
        case TaskKind::clusters: {
            const ClusterData test = gen_cluster_classify(seed, cfg.eval_samples, cfg.classes);
            std::vector<int> pred;
            if (m.classifier) {
                pred = m.classifier->predict(as_feature_tokens(test.features), cfg.eval_samples);
                out.trace.push_back({0, 0.0, 0.0, 1, m.classifier->layer_count()});
            } else {
                Matrix z0 = normal_matrix(cfg.eval_samples, m.head->embeddings.cols(), 1.0, rng) * cfg.noise.sigma_max;
                pred = m.head->predict(
                    sample_from(*m.blocks, as_feature_tokens(test.features), std::move(z0), steps, cfg.noise, &out.trace));
            }
            samples << "index,label,predicted\n";
            for (std::size_t i = 0; i < pred.size(); ++i) samples << i << ',' << test.labels[i] << ',' << pred[i] << '\n';
            out.summary["accuracy"] = accuracy(pred, test.labels);
            break;
        }
        case TaskKind::char_ar: {
            const ConvertedModel model = diffusion_model(cfg, m);
            const std::vector<int> ids = ar_generate(model, *m.head, cfg.seq_len, m.corpus.ids.front(), steps, cfg.noise, rng);
            // One teacher-forced pass over the generated text for the trace.
            const Matrix x = [&] {
                Matrix e(cfg.seq_len, m.token_embeddings.cols());
                for (Index i = 0; i < cfg.seq_len; ++i) e.row(i) = m.token_embeddings.row(ids[static_cast<std::size_t>(i)]);
                return e;
            }();
            Matrix z0 = normal_matrix(cfg.seq_len, x.cols(), 1.0, rng) * cfg.noise.sigma_max;
            sample_from(model, x, std::move(z0), steps, cfg.noise, &out.trace);
            std::string text;
            for (int id : ids) text.push_back(m.corpus.symbols[static_cast<std::size_t>(id)]);
            samples << "sequence,text\n0,\"" << text << "\"\n";
            out.summary["text"] = text;
            break;
        }
        case TaskKind::char_masked: {
            const Index count = std::min<Index>(cfg.eval_samples, 16);
            std::vector<DemaskStep> steps_trace;
            const std::vector<int> ids =
                demask_sample(predictors(m), m.time_boundaries, count, cfg.seq_len, m.masked.front().mask_id(),
                              std::max(steps, m.masked.size()), MaskSchedule::linear(), rng, CommitRule::sample,
                              &steps_trace);
            for (std::size_t i = 0; i < steps_trace.size(); ++i) {
                const auto& s = steps_trace[i];
                out.trace.push_back({i, s.t, s.t_next, s.block, m.masked[s.block - 1].layer_count()});
            }
            samples << "sequence,text\n";
            for (Index q = 0; q < count; ++q) {
                std::string text;
                for (Index p = 0; p < cfg.seq_len; ++p) {
                    text.push_back(m.corpus.symbols[static_cast<std::size_t>(ids[static_cast<std::size_t>(q * cfg.seq_len + p)])]);
                }
                samples << q << ",\"" << text << "\"\n";
            }
            break;
        }
    }

    std::ofstream trace(dir / "trace.csv");
    if (!trace) throw std::runtime_error("cannot write trace");
    trace << "step,sigma,block,layer_evals\n" << std::setprecision(17);
    std::uint64_t total = 0;
    for (const auto& r : out.trace) {
        trace << r.step << ',' << r.sigma << ',' << r.block << ',' << r.layer_evals << '\n';
        total += r.layer_evals;
    }
    out.summary["trace_rows"] = out.trace.size();
    out.summary["total_layer_evals"] = total;
    return out;
}

std::size_t capped_threads(std::size_t requested) {
    const char* env = std::getenv("DIFFBLOCKS_THREADS");
    if (!env || !*env) return requested;
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (*end != '\0' || cap <= 0) throw ConfigError("DIFFBLOCKS_THREADS must be a positive integer");
    return std::min<std::size_t>(requested, static_cast<std::size_t>(cap));
}

}  // namespace dblocks
