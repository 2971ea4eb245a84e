#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metakgr/checkpoint.hpp"
#include "metakgr/config.hpp"
#include "metakgr/encoders.hpp"
#include "metakgr/eval.hpp"
#include "metakgr/gradcheck.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/meta.hpp"
#include "metakgr/reports.hpp"
#include "metakgr/rng.hpp"
#include "metakgr/splits.hpp"
#include "metakgr/synthetic.hpp"

namespace metakgr {

struct Dataset {
    KnowledgeGraph graph;
    std::vector<KgTask> meta_train;
    std::vector<KgTask> meta_dev;
    std::vector<KgTask> meta_test;
    std::string description;
};

/// Builds the experiment dataset. Synthetic graphs are derived from the run
/// seed; file datasets keep held-out relations' edges out of the background
/// graph entirely.
inline Dataset load_dataset(const ExperimentConfig& c) {
    Dataset data;
    if (c.dataset_kind == "synthetic") {
        SyntheticSpec spec = c.synthetic;
        spec.seed = Rng::derive(c.seed, {0x64617461});
        SyntheticData gen = gen_synthetic(spec);
        data.graph = std::move(gen.graph);
        data.meta_train = std::move(gen.meta_train);
        data.meta_dev = std::move(gen.meta_dev);
        data.meta_test = std::move(gen.meta_test);
        data.description = "synthetic compositional KG (" + std::to_string(spec.n_entities) + " entities, " +
                           std::to_string(spec.n_base_relations) + " base relations, " +
                           std::to_string(spec.n_composed) + " composed tasks)";
        return data;
    }

    Vocabulary vocab;
    const std::vector<Triple> triples = load_triples(c.triples_file, vocab);
    const RelationSplit split = load_split_file(c.split_file);
    auto relation_ids = [&](const std::vector<std::string>& names) {
        std::vector<int> ids;
        for (const auto& name : names) {
            const int id = vocab.find_relation(name);
            if (id < 0)
                throw ConfigError("split relation '" + name + "' does not occur in " + c.triples_file);
            ids.push_back(id);
        }
        return ids;
    };
    const std::vector<int> dev_ids = relation_ids(split.meta_dev);
    const std::vector<int> test_ids = relation_ids(split.meta_test);

    enum class Role { Train, Dev, Test };
    std::map<int, Role> roles;
    for (int id : dev_ids) roles[id] = Role::Dev;
    for (int id : test_ids) {
        if (roles.contains(id))
            throw ConfigError("relation '" + vocab.relation_label(id) + "' appears in both meta_dev and meta_test");
        roles[id] = Role::Test;
    }
    if (split.train_is_rest) {
        for (const Triple& t : triples)
            if (!roles.contains(t.relation)) roles.emplace(t.relation, Role::Train);
    } else {
        for (int id : relation_ids(split.meta_train)) {
            if (roles.contains(id) && roles[id] != Role::Train)
                throw ConfigError("relation '" + vocab.relation_label(id) + "' assigned to two splits");
            roles[id] = Role::Train;
        }
    }

    std::map<int, std::vector<Triple>> by_relation;
    std::vector<Triple> background;
    for (const Triple& t : triples) {
        auto it = roles.find(t.relation);
        if (it == roles.end()) continue; // unlisted relation: background only
        by_relation[t.relation].push_back(t);
        if (it->second != Role::Train) continue;
        background.push_back(t);
    }
    for (const Triple& t : triples)
        if (!roles.contains(t.relation)) background.push_back(t);

    data.graph = KnowledgeGraph(background, std::move(vocab));
    for (auto& [rel, pool] : by_relation) {
        KgTask task;
        task.relation = rel;
        task.name = data.graph.vocab().relation_label(rel);
        task.train = std::move(pool);
        switch (roles.at(rel)) {
        case Role::Train: data.meta_train.push_back(std::move(task)); break;
        case Role::Dev: data.meta_dev.push_back(std::move(task)); break;
        case Role::Test: data.meta_test.push_back(std::move(task)); break;
        }
    }
    if (data.meta_train.empty()) throw ConfigError("split yields no meta-train relations");
    if (data.meta_dev.empty()) throw ConfigError("split yields no meta-dev relations");
    if (data.meta_test.empty()) throw ConfigError("split yields no meta-test relations");
    data.description = c.triples_file + " with split " + c.split_file;
    return data;
}

inline RepKind method_rep_kind(const std::string& method) {
    if (method == "maml-mask") return RepKind::Zero;
    if (method == "neighbor") return RepKind::Neighbor;
    if (method == "path") return RepKind::Path;
    return RepKind::Identity; // random, transfer, maml
}

inline typename KgProblem<float>::Options problem_options(const ExperimentConfig& c) {
    typename KgProblem<float>::Options opt;
    opt.rep_kind = method_rep_kind(c.method);
    opt.path_length = c.path_length;
    opt.max_paths = static_cast<std::size_t>(c.max_paths);
    // Encoder reps stand in for a relation-embedding row, so rescale them to
    // the norm an embedding row has at initialization.
    opt.rep_norm = std::sqrt(static_cast<double>(c.embed_dim)) * c.embed_init_std;
    opt.rollouts = c.rollouts;
    opt.entropy_base = static_cast<float>(c.entropy_base);
    opt.entropy_decay = static_cast<float>(c.entropy_decay);
    opt.entropy_decay_every = c.entropy_decay_every;
    opt.hide_query_edge = c.hide_query_edge;
    return opt;
}

/// Policy + both encoder parameter tables, so checkpoints have one layout
/// regardless of method. Unused tables stay at their initialization.
inline ParamStore<float> init_params(const ExperimentConfig& c, const KnowledgeGraph& g) {
    ParamStore<float> store(c.seed);
    Rng rng(Rng::derive(c.seed, {0x696e6974}));
    add_policy_params(store, g.vocab(), {.d = c.embed_dim, .hidden = c.hidden_dim}, rng);
    add_neighbor_encoder_params(store, c.embed_dim, rng);
    add_path_encoder_params(store, c.embed_dim, rng);
    if (c.embed_init_std != 0.01) {
        const float k = static_cast<float>(c.embed_init_std / 0.01);
        for (const char* name : {"entity_emb", "relation_emb"})
            for (float& x : store.value(name).v) x *= k;
    }
    return store;
}

inline BeamOptions beam_options(const ExperimentConfig& c) {
    BeamOptions beam;
    beam.width = static_cast<std::size_t>(c.beam_width);
    beam.path_length = c.path_length;
    beam.sum_paths = c.sum_paths;
    return beam;
}

struct TrainOutput {
    ParamStore<float> params;
    std::vector<LossPoint> curve;
};

/// Dispatches the configured method: `random` keeps the initialization,
/// `transfer` pre-trains jointly on meta-train relations, everything else
/// runs first-order meta-training with the method's task representation.
inline TrainOutput train_method(const ExperimentConfig& c, const Dataset& data) {
    if (!c.resolved) throw ContractError("train_method needs a resolved config");
    TrainOutput out{init_params(c, data.graph), {}};
    if (c.method == "random" || c.meta_steps == 0) return out;
    Rng task_rng(Rng::derive(c.seed, {0x7461736b}));
    Rng rollout_rng(Rng::derive(c.seed, {0x726f6c6c}));
    KgProblem<float> problem(data.graph, problem_options(c), rollout_rng);
    const std::span<const KgTask> tasks(data.meta_train);
    if (c.method == "transfer") {
        train_transfer(out.params, problem, tasks, c.meta_steps, c.transfer_batch,
                       static_cast<float>(c.outer_lr), task_rng, [&](int step, float loss) {
                           out.curve.push_back({step, loss, problem.last_batch_reward()});
                       });
        return out;
    }
    MetaTrainConfig<float> mc;
    mc.meta_steps = c.meta_steps;
    mc.meta_batch = c.meta_batch;
    mc.support_size = c.support_size;
    mc.query_size = c.query_size;
    mc.inner_steps = c.adapt_steps;
    mc.inner_lr = static_cast<float>(c.inner_lr);
    mc.outer_lr = static_cast<float>(c.outer_lr);
    meta_train(out.params, problem, tasks, mc, task_rng, [&](int step, const MetaStepStats<float>& st) {
        out.curve.push_back({step, st.outer_loss, st.outer_reward});
    });
    return out;
}

/// Few-shot episodes: `shots` support triples per task, queries from the
/// task's held-out eval set (or the unsampled remainder when none exists).
inline std::vector<EvalEpisode> make_episodes(std::span<const KgTask> tasks, int shots, Rng& rng) {
    if (tasks.empty()) throw ContractError("make_episodes: no tasks");
    if (shots < 1) throw ContractError("make_episodes: shots must be >= 1");
    std::vector<EvalEpisode> episodes;
    for (const KgTask& task : tasks) {
        if (task.train.size() < static_cast<std::size_t>(shots))
            throw ConfigError("task '" + task.name + "' offers " + std::to_string(task.train.size()) +
                              " support candidates but " + std::to_string(shots) + " shots were requested");
        EvalEpisode ep;
        ep.task = &task;
        const auto idx = rng.sample_indices(task.train.size(), static_cast<std::size_t>(shots));
        for (std::size_t i : idx) ep.support.push_back(task.train[i]);
        if (!task.eval.empty()) {
            ep.queries = task.eval;
        } else {
            std::vector<bool> taken(task.train.size(), false);
            for (std::size_t i : idx) taken[i] = true;
            for (std::size_t i = 0; i < task.train.size(); ++i)
                if (!taken[i]) ep.queries.push_back(task.train[i]);
            if (ep.queries.empty())
                throw ConfigError("task '" + task.name + "' has no queries left after sampling support");
        }
        episodes.push_back(std::move(ep));
    }
    return episodes;
}

struct ProtocolBundle {
    std::vector<FinetunePoint> dev_curve;
    FineTuneSchedule schedule;
    ProtocolResult test;
    std::vector<std::string> test_task_names;
};

/// The full held-out protocol: fine-tune curve on meta-dev, freeze the step
/// count it selects, then Initial/Best on meta-test.
inline ProtocolBundle run_protocol(const ExperimentConfig& c, const Dataset& data,
                                   const ParamStore<float>& params) {
    if (!c.resolved) throw ContractError("run_protocol needs a resolved config");
    Rng episode_rng(Rng::derive(c.seed, {0x6576616c}));
    Rng rollout_rng(Rng::derive(c.seed, {0x66696e65}));
    KgProblem<float> problem(data.graph, problem_options(c), rollout_rng);
    const BeamOptions beam = beam_options(c);
    const float ft_lr = static_cast<float>(c.finetune_lr);

    ProtocolBundle bundle;
    const auto dev_eps = make_episodes(std::span<const KgTask>(data.meta_dev), c.shots, episode_rng);
    bundle.dev_curve = finetune_curve(problem, params, std::span<const EvalEpisode>(dev_eps),
                                      c.max_finetune_steps, ft_lr, beam);
    bundle.schedule = select_schedule(std::span<const FinetunePoint>(bundle.dev_curve));
    const auto test_eps = make_episodes(std::span<const KgTask>(data.meta_test), c.shots, episode_rng);
    bundle.test = apply_schedule(problem, params, std::span<const EvalEpisode>(test_eps), bundle.schedule,
                                 ft_lr, beam);
    for (const EvalEpisode& ep : test_eps) bundle.test_task_names.push_back(ep.task->name);
    return bundle;
}

namespace detail {

inline std::string out_path(const ExperimentConfig& c, const char* file) {
    return (std::filesystem::path(c.out_dir) / file).string();
}

inline ExperimentConfig prepare(const ExperimentConfig& raw) {
    ExperimentConfig c = raw.resolved ? raw : resolve(raw);
    std::filesystem::create_directories(c.out_dir);
    save_resolved_config(c, out_path(c, "resolved-config.json"));
    return c;
}

/// Loads the configured checkpoint or trains from scratch. A loaded store
/// must match the layout the config describes.
inline TrainOutput obtain_params(const ExperimentConfig& c, const Dataset& data) {
    if (c.checkpoint_in.empty()) return train_method(c, data);
    ParamStore<float> loaded = load_checkpoint<float>(c.checkpoint_in);
    const ParamStore<float> expected = init_params(c, data.graph);
    if (loaded.param_count() != expected.param_count())
        throw ConfigError("checkpoint '" + c.checkpoint_in + "' holds " + std::to_string(loaded.param_count()) +
                          " parameters but the configured model has " + std::to_string(expected.param_count()));
    for (std::size_t i = 0; i < expected.param_count(); ++i) {
        const auto& want = expected.entry(static_cast<int>(i));
        const auto& got = loaded.entry(static_cast<int>(i));
        if (want.name != got.name || want.value.shape != got.value.shape)
            throw ConfigError("checkpoint '" + c.checkpoint_in + "' parameter '" + got.name +
                              "' does not match the configured model (expected '" + want.name + "' " +
                              shape_str(want.value.shape) + ")");
    }
    return {std::move(loaded), {}};
}

inline std::vector<MetricRow> protocol_rows(const ProtocolBundle& b) {
    std::vector<MetricRow> rows;
    for (std::size_t i = 0; i < b.test_task_names.size(); ++i)
        rows.push_back({b.test_task_names[i], 0, b.test.per_task_initial[i]});
    rows.push_back({"macro", 0, b.test.initial});
    for (std::size_t i = 0; i < b.test_task_names.size(); ++i)
        rows.push_back({b.test_task_names[i], b.test.best_steps, b.test.per_task_best[i]});
    rows.push_back({"macro", b.test.best_steps, b.test.best});
    return rows;
}

} // namespace detail

inline int cmd_train(const ExperimentConfig& raw) {
    const ExperimentConfig c = detail::prepare(raw);
    const Dataset data = load_dataset(c);
    TrainOutput out = train_method(c, data);
    write_loss_csv(detail::out_path(c, "loss.csv"), out.curve);
    save_checkpoint(out.params, detail::out_path(c, "checkpoint.bin"));
    std::printf("trained %s for %d steps on %s\n", c.method.c_str(), c.meta_steps, data.description.c_str());
    if (!out.curve.empty())
        std::printf("final loss %.6g, final batch reward %.6g\n", out.curve.back().loss,
                    out.curve.back().reward);
    return 0;
}

inline int cmd_eval(const ExperimentConfig& raw) {
    const ExperimentConfig c = detail::prepare(raw);
    const Dataset data = load_dataset(c);
    const TrainOutput trained = detail::obtain_params(c, data);
    const ProtocolBundle bundle = run_protocol(c, data, trained.params);

    const auto rows = detail::protocol_rows(bundle);
    write_metrics_csv(detail::out_path(c, "metrics.csv"), rows);
    std::vector<MetricRow> dev_rows;
    for (const FinetunePoint& p : bundle.dev_curve) dev_rows.push_back({"dev-macro", p.steps, p.macro});
    write_metrics_csv(detail::out_path(c, "dev-curve.csv"), dev_rows);

    SummaryInfo s;
    s.method = c.method;
    s.seed = c.seed;
    s.dataset = data.description;
    s.shots = c.shots;
    s.best_steps = bundle.test.best_steps;
    s.initial = bundle.test.initial;
    s.best = bundle.test.best;
    s.task_names = bundle.test_task_names;
    s.per_task_initial = bundle.test.per_task_initial;
    s.per_task_best = bundle.test.per_task_best;
    write_summary_md(detail::out_path(c, "summary.md"), s);
    std::printf("%s: Initial MRR %.4f, Best MRR %.4f (at %d fine-tune steps)\n", c.method.c_str(),
                bundle.test.initial.mrr, bundle.test.best.mrr, bundle.test.best_steps);
    return 0;
}

inline int cmd_finetune(const ExperimentConfig& raw) {
    const ExperimentConfig c = detail::prepare(raw);
    const Dataset data = load_dataset(c);
    const TrainOutput trained = detail::obtain_params(c, data);

    Rng episode_rng(Rng::derive(c.seed, {0x6576616c}));
    Rng rollout_rng(Rng::derive(c.seed, {0x66696e65}));
    KgProblem<float> problem(data.graph, problem_options(c), rollout_rng);
    const auto episodes = make_episodes(std::span<const KgTask>(data.meta_test), c.shots, episode_rng);
    const auto curve = finetune_curve(problem, trained.params, std::span<const EvalEpisode>(episodes),
                                      c.max_finetune_steps, static_cast<float>(c.finetune_lr), beam_options(c));

    std::vector<MetricRow> rows;
    for (const FinetunePoint& p : curve) {
        for (std::size_t i = 0; i < episodes.size(); ++i)
            rows.push_back({episodes[i].task->name, p.steps, p.per_task[i]});
        rows.push_back({"macro", p.steps, p.macro});
    }
    write_metrics_csv(detail::out_path(c, "metrics.csv"), rows);

    auto out = open_report(detail::out_path(c, "summary.md"));
    out << "# Fine-tuning curve on meta-test (" << c.method << ", " << c.shots << "-shot)\n\n";
    out << "| Steps | MRR | Hits@1 | Hits@3 | Hits@10 |\n|---|---|---|---|---|\n";
    for (const FinetunePoint& p : curve)
        out << "| " << p.steps << " | " << format_metric(p.macro.mrr) << " | " << format_metric(p.macro.hits1)
            << " | " << format_metric(p.macro.hits3) << " | " << format_metric(p.macro.hits10) << " |\n";
    std::printf("fine-tuned %s over %d steps: MRR %.4f -> %.4f\n", c.method.c_str(), c.max_finetune_steps,
                curve.front().macro.mrr, curve.back().macro.mrr);
    return 0;
}

inline int cmd_sweep(const ExperimentConfig& raw) {
    const ExperimentConfig c0 = detail::prepare(raw);
    std::vector<SweepRow> rows;
    for (const std::string& method : c0.sweep_methods) {
        ExperimentConfig cm = raw;
        cm.method = method;
        cm.out_dir = c0.out_dir;
        const ExperimentConfig c = resolve(cm);
        const Dataset data = load_dataset(c);
        const TrainOutput trained = detail::obtain_params(c, data);
        for (int shots : c.sweep_shots) {
            ExperimentConfig cs = c;
            cs.shots = shots;
            const ProtocolBundle bundle = run_protocol(cs, data, trained.params);
            rows.push_back({method, shots, bundle.test.initial, bundle.test.best, bundle.test.best_steps});
            std::printf("sweep %s %d-shot: Initial MRR %.4f, Best MRR %.4f\n", method.c_str(), shots,
                        bundle.test.initial.mrr, bundle.test.best.mrr);
        }
    }
    write_sweep_csv(detail::out_path(c0, "sweep.csv"), rows);
    return 0;
}

inline int cmd_ablate(const ExperimentConfig& raw) {
    const ExperimentConfig c0 = detail::prepare(raw);
    const std::string encoder_method =
        (c0.method == "neighbor" || c0.method == "path") ? c0.method : std::string("neighbor");

    auto initial_macro = [&](const ExperimentConfig& c, const Dataset& data, const ParamStore<float>& params,
                             int shots) {
        Rng episode_rng(Rng::derive(c.seed, {0x6576616c}));
        Rng rollout_rng(Rng::derive(c.seed, {0x66696e65}));
        KgProblem<float> problem(data.graph, problem_options(c), rollout_rng);
        const auto eps = make_episodes(std::span<const KgTask>(data.meta_test), shots, episode_rng);
        ParamStore<float> store = params;
        std::vector<TaskEval> per_task;
        for (const EvalEpisode& ep : eps)
            per_task.push_back(evaluate_task(problem, store, *ep.task, std::span<const Triple>(ep.support),
                                             std::span<const Triple>(ep.queries), beam_options(c)));
        return macro_average(std::span<const TaskEval>(per_task));
    };

    std::vector<AblateRow> rows;
    {
        ExperimentConfig cm = raw;
        cm.method = encoder_method;
        cm.out_dir = c0.out_dir;
        const ExperimentConfig c = resolve(cm);
        const Dataset data = load_dataset(c);
        const TrainOutput trained = detail::obtain_params(c, data);
        rows.push_back({"encoder-1-shot", initial_macro(c, data, trained.params, 1)});
        rows.push_back({"encoder-50-shot", initial_macro(c, data, trained.params, 50)});
    }
    {
        ExperimentConfig cm = raw;
        cm.method = "maml-mask";
        cm.out_dir = c0.out_dir;
        cm.checkpoint_in.clear(); // a checkpoint for the encoder method cannot seed the masked baseline
        const ExperimentConfig c = resolve(cm);
        const Dataset data = load_dataset(c);
        const TrainOutput trained = train_method(c, data);
        rows.push_back({"no-encoder", initial_macro(c, data, trained.params, 50)});
    }
    write_ablate_csv(detail::out_path(c0, "ablate.csv"), rows);
    write_ablate_md(detail::out_path(c0, "ablate.md"), rows);
    for (const AblateRow& r : rows)
        std::printf("ablate %s: Initial MRR %.4f, Hits@10 %.4f\n", r.setting.c_str(), r.initial.mrr,
                    r.initial.hits10);
    return 0;
}

inline int cmd_gradcheck(const ExperimentConfig& raw) {
    const ExperimentConfig c = detail::prepare(raw);
    const GradCheckReport report = run_gradcheck(10, c.seed);
    std::vector<GradCheckRow> rows;
    for (const GradCheckSuite& s : report.suites) {
        rows.push_back({s.name, s.max_rel_err, s.checks});
        std::printf("gradcheck %-18s max rel-err %.3e over %d checks\n", s.name.c_str(), s.max_rel_err, s.checks);
    }
    write_gradcheck_csv(detail::out_path(c, "gradcheck.csv"), rows);
    const bool ok = report.passed();
    std::printf("gradcheck overall max rel-err %.3e: %s\n", report.max_rel_err(), ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}

inline int run_command(const std::string& cmd, const ExperimentConfig& raw) {
    if (cmd == "train") return cmd_train(raw);
    if (cmd == "eval") return cmd_eval(raw);
    if (cmd == "finetune") return cmd_finetune(raw);
    if (cmd == "sweep") return cmd_sweep(raw);
    if (cmd == "ablate") return cmd_ablate(raw);
    if (cmd == "gradcheck") return cmd_gradcheck(raw);
    throw ConfigError("unknown command '" + cmd + "'");
}

} // namespace metakgr
