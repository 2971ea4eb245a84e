#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "metakgr/error.hpp"
#include "metakgr/synthetic.hpp"

namespace metakgr {

inline const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names = {"random", "transfer", "maml", "maml-mask", "neighbor", "path"};
    return names;
}

inline bool is_method(const std::string& m) {
    for (const auto& n : method_names())
        if (n == m) return true;
    return false;
}

/// Every knob of an experiment. Sentinel -1 marks "derive from the method"
/// and is eliminated by resolve(); a resolved config written next to results
/// re-runs the experiment byte-for-byte.
struct ExperimentConfig {
    int schema_version = 1;
    std::string method = "neighbor";
    std::uint64_t seed = 7;
    std::string out_dir = "out";
    std::string checkpoint_in; // load instead of training when non-empty

    // dataset
    std::string dataset_kind = "synthetic"; // synthetic | files
    SyntheticSpec synthetic;
    std::string triples_file;
    std::string split_file;

    // model
    int embed_dim = 32;
    int hidden_dim = 64;
    int path_length = 3;
    double embed_init_std = 0.01;

    // encoder
    int max_paths = 100;

    // train
    int meta_steps = 2000;
    int meta_batch = 5;
    int support_size = 5;
    int query_size = 5;
    int adapt_steps = -1;   // -1: path -> 1, other meta methods -> 5, random/transfer -> 0
    double inner_lr = -1.0; // -1: 0.01 when adapt_steps == 1, else 0.001
    double outer_lr = 0.001;
    int transfer_batch = -1; // -1: meta_batch * query_size
    int rollouts = 20;
    double entropy_base = 0.02;
    double entropy_decay = 0.9;
    int entropy_decay_every = 200;
    bool hide_query_edge = true;

    // eval
    int shots = 5;
    int beam_width = 100;
    bool sum_paths = false;
    int max_finetune_steps = 10;
    double finetune_lr = -1.0; // -1: resolved inner_lr
    std::vector<int> sweep_shots = {1, 2, 5, 10, 20, 50};
    std::vector<std::string> sweep_methods; // empty: just `method`

    bool resolved = false;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.contains(key)) throw ConfigError("unknown config key '" + key + "' in " + where);
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + std::string(key) + "' in " + where + " has the wrong type: " + e.what());
    }
}

} // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_field;
    ExperimentConfig c;
    check_keys(j, {"schema_version", "method", "seed", "out_dir", "checkpoint_in", "dataset", "model", "encoder",
                   "train", "eval"},
               "the top level");
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    read_field(j, "schema_version", c.schema_version, "the top level");
    if (c.schema_version != 1)
        throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version) +
                          "; this build reads version 1");
    read_field(j, "method", c.method, "the top level");
    if (!is_method(c.method)) {
        std::string all;
        for (const auto& n : method_names()) all += (all.empty() ? "" : ", ") + n;
        throw ConfigError("unknown method '" + c.method + "'; expected one of: " + all);
    }
    read_field(j, "seed", c.seed, "the top level");
    read_field(j, "out_dir", c.out_dir, "the top level");
    read_field(j, "checkpoint_in", c.checkpoint_in, "the top level");

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"kind", "synthetic", "triples", "split"}, "dataset");
        read_field(d, "kind", c.dataset_kind, "dataset");
        if (c.dataset_kind != "synthetic" && c.dataset_kind != "files")
            throw ConfigError("dataset.kind must be 'synthetic' or 'files', got '" + c.dataset_kind + "'");
        if (d.contains("synthetic")) {
            const auto& s = d.at("synthetic");
            check_keys(s,
                       {"n_entities", "n_base_relations", "edges_per_relation", "n_composed", "meta_train_tasks",
                        "meta_dev_tasks", "meta_test_tasks", "eval_fraction", "inverse_edges", "seed"},
                       "dataset.synthetic");
            read_field(s, "n_entities", c.synthetic.n_entities, "dataset.synthetic");
            read_field(s, "n_base_relations", c.synthetic.n_base_relations, "dataset.synthetic");
            read_field(s, "edges_per_relation", c.synthetic.edges_per_relation, "dataset.synthetic");
            read_field(s, "n_composed", c.synthetic.n_composed, "dataset.synthetic");
            read_field(s, "meta_train_tasks", c.synthetic.meta_train_tasks, "dataset.synthetic");
            read_field(s, "meta_dev_tasks", c.synthetic.meta_dev_tasks, "dataset.synthetic");
            read_field(s, "meta_test_tasks", c.synthetic.meta_test_tasks, "dataset.synthetic");
            read_field(s, "eval_fraction", c.synthetic.eval_fraction, "dataset.synthetic");
            read_field(s, "inverse_edges", c.synthetic.inverse_edges, "dataset.synthetic");
            read_field(s, "seed", c.synthetic.seed, "dataset.synthetic");
        }
        read_field(d, "triples", c.triples_file, "dataset");
        read_field(d, "split", c.split_file, "dataset");
        if (c.dataset_kind == "files" && (c.triples_file.empty() || c.split_file.empty()))
            throw ConfigError("dataset.kind 'files' requires dataset.triples and dataset.split paths");
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, {"embed_dim", "hidden_dim", "path_length", "embed_init_std"}, "model");
        read_field(m, "embed_dim", c.embed_dim, "model");
        read_field(m, "hidden_dim", c.hidden_dim, "model");
        read_field(m, "path_length", c.path_length, "model");
        read_field(m, "embed_init_std", c.embed_init_std, "model");
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        check_keys(e, {"max_paths"}, "encoder");
        read_field(e, "max_paths", c.max_paths, "encoder");
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t,
                   {"meta_steps", "meta_batch", "support_size", "query_size", "adapt_steps", "inner_lr", "outer_lr",
                    "transfer_batch", "rollouts", "entropy_base", "entropy_decay", "entropy_decay_every",
                    "hide_query_edge"},
                   "train");
        read_field(t, "meta_steps", c.meta_steps, "train");
        read_field(t, "meta_batch", c.meta_batch, "train");
        read_field(t, "support_size", c.support_size, "train");
        read_field(t, "query_size", c.query_size, "train");
        read_field(t, "adapt_steps", c.adapt_steps, "train");
        read_field(t, "inner_lr", c.inner_lr, "train");
        read_field(t, "outer_lr", c.outer_lr, "train");
        read_field(t, "transfer_batch", c.transfer_batch, "train");
        read_field(t, "rollouts", c.rollouts, "train");
        read_field(t, "entropy_base", c.entropy_base, "train");
        read_field(t, "entropy_decay", c.entropy_decay, "train");
        read_field(t, "entropy_decay_every", c.entropy_decay_every, "train");
        read_field(t, "hide_query_edge", c.hide_query_edge, "train");
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e,
                   {"shots", "beam_width", "sum_paths", "max_finetune_steps", "finetune_lr", "sweep_shots",
                    "sweep_methods"},
                   "eval");
        read_field(e, "shots", c.shots, "eval");
        read_field(e, "beam_width", c.beam_width, "eval");
        read_field(e, "sum_paths", c.sum_paths, "eval");
        read_field(e, "max_finetune_steps", c.max_finetune_steps, "eval");
        read_field(e, "finetune_lr", c.finetune_lr, "eval");
        read_field(e, "sweep_shots", c.sweep_shots, "eval");
        read_field(e, "sweep_methods", c.sweep_methods, "eval");
    }

    auto positive = [](int v, const char* name) {
        if (v < 1) throw ConfigError(std::string("config value ") + name + " must be >= 1");
    };
    positive(c.embed_dim, "model.embed_dim");
    positive(c.hidden_dim, "model.hidden_dim");
    positive(c.path_length, "model.path_length");
    positive(c.max_paths, "encoder.max_paths");
    positive(c.meta_batch, "train.meta_batch");
    positive(c.support_size, "train.support_size");
    positive(c.query_size, "train.query_size");
    positive(c.rollouts, "train.rollouts");
    positive(c.entropy_decay_every, "train.entropy_decay_every");
    positive(c.shots, "eval.shots");
    positive(c.beam_width, "eval.beam_width");
    if (c.meta_steps < 0) throw ConfigError("config value train.meta_steps must be >= 0");
    if (c.max_finetune_steps < 0) throw ConfigError("config value eval.max_finetune_steps must be >= 0");
    if (c.sweep_shots.empty()) throw ConfigError("eval.sweep_shots must not be empty");
    for (int s : c.sweep_shots) positive(s, "eval.sweep_shots entries");
    for (const auto& m : c.sweep_methods)
        if (!is_method(m)) throw ConfigError("unknown method '" + m + "' in eval.sweep_methods");
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

/// Eliminates every -1 sentinel using the method-dependent rules, so the
/// emitted config is complete on its own.
inline ExperimentConfig resolve(ExperimentConfig c) {
    const bool meta_method =
        c.method == "maml" || c.method == "maml-mask" || c.method == "neighbor" || c.method == "path";
    if (c.adapt_steps < 0) c.adapt_steps = !meta_method ? 0 : (c.method == "path" ? 1 : 5);
    if (c.inner_lr < 0) c.inner_lr = c.adapt_steps == 1 ? 0.01 : 0.001;
    if (c.finetune_lr < 0) c.finetune_lr = c.inner_lr;
    if (c.transfer_batch < 0) c.transfer_batch = c.meta_batch * c.query_size;
    if (c.sweep_methods.empty()) c.sweep_methods = {c.method};
    c.resolved = true;
    return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["method"] = c.method;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["checkpoint_in"] = c.checkpoint_in;
    j["dataset"]["kind"] = c.dataset_kind;
    j["dataset"]["synthetic"] = {{"n_entities", c.synthetic.n_entities},
                                 {"n_base_relations", c.synthetic.n_base_relations},
                                 {"edges_per_relation", c.synthetic.edges_per_relation},
                                 {"n_composed", c.synthetic.n_composed},
                                 {"meta_train_tasks", c.synthetic.meta_train_tasks},
                                 {"meta_dev_tasks", c.synthetic.meta_dev_tasks},
                                 {"meta_test_tasks", c.synthetic.meta_test_tasks},
                                 {"eval_fraction", c.synthetic.eval_fraction},
                                 {"inverse_edges", c.synthetic.inverse_edges},
                                 {"seed", c.synthetic.seed}};
    j["dataset"]["triples"] = c.triples_file;
    j["dataset"]["split"] = c.split_file;
    j["model"] = {{"embed_dim", c.embed_dim},
                  {"hidden_dim", c.hidden_dim},
                  {"path_length", c.path_length},
                  {"embed_init_std", c.embed_init_std}};
    j["encoder"] = {{"max_paths", c.max_paths}};
    j["train"] = {{"meta_steps", c.meta_steps},
                  {"meta_batch", c.meta_batch},
                  {"support_size", c.support_size},
                  {"query_size", c.query_size},
                  {"adapt_steps", c.adapt_steps},
                  {"inner_lr", c.inner_lr},
                  {"outer_lr", c.outer_lr},
                  {"transfer_batch", c.transfer_batch},
                  {"rollouts", c.rollouts},
                  {"entropy_base", c.entropy_base},
                  {"entropy_decay", c.entropy_decay},
                  {"entropy_decay_every", c.entropy_decay_every},
                  {"hide_query_edge", c.hide_query_edge}};
    j["eval"] = {{"shots", c.shots},
                 {"beam_width", c.beam_width},
                 {"sum_paths", c.sum_paths},
                 {"max_finetune_steps", c.max_finetune_steps},
                 {"finetune_lr", c.finetune_lr},
                 {"sweep_shots", c.sweep_shots},
                 {"sweep_methods", c.sweep_methods}};
    return j;
}

inline void save_resolved_config(const ExperimentConfig& c, const std::string& path) {
    if (!c.resolved) throw ContractError("refusing to write an unresolved config next to results");
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write resolved config: " + path);
    out << config_to_json(c).dump(2) << '\n';
}

} // namespace metakgr
