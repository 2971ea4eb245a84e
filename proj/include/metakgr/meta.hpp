#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/encoders.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/policy.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

/// A Problem binds the meta-learning loops to a concrete model. It provides
///   using Scalar, Task, Instance;
///   Tensor<Scalar> task_representation(Tape&, ParamStore&, const Task&, std::span<const Instance> support);
///   Tensor<Scalar> loss(Tape&, ParamStore&, const Task&, std::span<const Instance>, const Tensor<Scalar>& rep);
/// Tasks expose their episode pool as a `train` member. Problems may
/// additionally provide begin_meta_step(int) and last_batch_reward().
template <class P>
using ProblemScalar = typename P::Scalar;

template <class P>
struct MetaBatchItem {
    const typename P::Task* task = nullptr;
    std::vector<typename P::Instance> support;
    std::vector<typename P::Instance> query;
};

template <class T>
struct MetaStepStats {
    int tasks = 0;
    int inner_updates = 0;
    T outer_loss = T(0);   // mean over the batch
    T outer_reward = T(0); // mean over the batch; 0 unless the problem reports rewards
};

/// Inner loop: deep-copies theta and runs k SGD steps on the support set,
/// re-deriving the task representation from the copy's parameters each step.
/// k = 0 returns an exact copy. The original store is never touched.
template <class P, class T = ProblemScalar<P>>
ParamStore<T> adapt(const ParamStore<T>& theta, P& problem, const typename P::Task& task,
                    std::span<const typename P::Instance> support, int k, T alpha) {
    if (k < 0) throw ContractError("adapt: negative step count");
    ParamStore<T> th = theta;
    th.zero_grads();
    for (int i = 0; i < k; ++i) {
        Tape<T> tape;
        const Tensor<T> rep = problem.task_representation(tape, th, task, support);
        tape.backward(problem.loss(tape, th, task, support, rep));
        sgd_step(th, alpha);
    }
    return th;
}

/// First-order meta-update: each task contributes the gradient of its
/// post-adaptation query loss, taken at the adapted parameters and applied
/// to the shared ones. theta <- theta - beta * sum_i grad_i.
template <class P, class T = ProblemScalar<P>>
MetaStepStats<T> meta_step(ParamStore<T>& theta, P& problem, std::span<const MetaBatchItem<P>> batch,
                           int k, T alpha, T beta) {
    if (batch.empty()) throw ContractError("meta_step: empty batch");
    theta.zero_grads();
    MetaStepStats<T> stats;
    for (const MetaBatchItem<P>& item : batch) {
        ParamStore<T> th = adapt(theta, problem, *item.task, item.support, k, alpha);
        stats.inner_updates += k;
        th.zero_grads();
        Tape<T> tape;
        const Tensor<T> rep = problem.task_representation(tape, th, *item.task, item.support);
        const Tensor<T> loss = problem.loss(tape, th, *item.task, item.query, rep);
        tape.backward(loss);
        if (th.param_count() != theta.param_count())
            throw ContractError("meta_step: adapted store layout diverged");
        for (std::size_t j = 0; j < theta.param_count(); ++j) {
            auto& dst = theta.entry(static_cast<int>(j)).grad.v;
            const auto& src = th.entry(static_cast<int>(j)).grad.v;
            for (std::size_t x = 0; x < dst.size(); ++x) dst[x] += src[x];
        }
        stats.outer_loss += loss.value();
        if constexpr (requires { problem.last_batch_reward(); })
            stats.outer_reward += problem.last_batch_reward();
        ++stats.tasks;
    }
    sgd_step(theta, beta);
    stats.outer_loss /= static_cast<T>(stats.tasks);
    stats.outer_reward /= static_cast<T>(stats.tasks);
    return stats;
}

/// Draws `batch` distinct task indices.
inline std::vector<std::size_t> sample_task_batch(Rng& rng, std::size_t task_count, std::size_t batch) {
    if (batch > task_count)
        throw ContractError("sample_task_batch: batch " + std::to_string(batch) + " exceeds " +
                            std::to_string(task_count) + " tasks");
    return rng.sample_indices(task_count, batch);
}

template <class Instance>
struct SupportQuerySplit {
    std::vector<Instance> support;
    std::vector<Instance> query;
    bool overlap = false; // pool too small for a disjoint split
};

/// Splits a pool into support and query sets, disjoint whenever the pool is
/// large enough. A short pool falls back to independent draws (shortfall
/// filled with replacement) and sets `overlap`.
template <class Instance>
SupportQuerySplit<Instance> split_support_query(Rng& rng, std::span<const Instance> pool,
                                                std::size_t support_size, std::size_t query_size) {
    if (pool.empty()) throw ContractError("split_support_query: empty pool");
    SupportQuerySplit<Instance> out;
    const std::size_t n = pool.size();
    if (n >= support_size + query_size) {
        const auto idx = rng.sample_indices(n, support_size + query_size);
        for (std::size_t i = 0; i < support_size; ++i) out.support.push_back(pool[idx[i]]);
        for (std::size_t i = 0; i < query_size; ++i) out.query.push_back(pool[idx[support_size + i]]);
        return out;
    }
    out.overlap = true;
    auto draw = [&](std::size_t want) {
        std::vector<Instance> got;
        const auto idx = rng.sample_indices(n, std::min(want, n));
        for (auto i : idx) got.push_back(pool[i]);
        while (got.size() < want) got.push_back(pool[rng.below(n)]);
        return got;
    };
    out.support = draw(support_size);
    out.query = draw(query_size);
    return out;
}

template <class T>
struct MetaTrainConfig {
    int meta_steps = 2000;
    int meta_batch = 5;
    int support_size = 5;
    int query_size = 5;
    int inner_steps = 1; // k
    T inner_lr = T(0.01);
    T outer_lr = T(0.001);
};

/// Outer loop over meta-training tasks. `on_step` sees every step's stats
/// (for loss curves); the returned stats are the last step's.
template <class P, class T = ProblemScalar<P>>
MetaStepStats<T> meta_train(ParamStore<T>& theta, P& problem, std::span<const typename P::Task> tasks,
                            const MetaTrainConfig<T>& cfg, Rng& rng,
                            const std::type_identity_t<std::function<void(int, const MetaStepStats<T>&)>>&
                                on_step = {}) {
    if (tasks.empty()) throw ContractError("meta_train: no tasks");
    MetaStepStats<T> last;
    for (int step = 0; step < cfg.meta_steps; ++step) {
        if constexpr (requires { problem.begin_meta_step(0); }) problem.begin_meta_step(step);
        const auto picked = sample_task_batch(rng, tasks.size(), static_cast<std::size_t>(cfg.meta_batch));
        std::vector<MetaBatchItem<P>> batch;
        batch.reserve(picked.size());
        for (auto ti : picked) {
            const auto& task = tasks[ti];
            auto split = split_support_query(rng, std::span<const typename P::Instance>(task.train),
                                             static_cast<std::size_t>(cfg.support_size),
                                             static_cast<std::size_t>(cfg.query_size));
            batch.push_back({&task, std::move(split.support), std::move(split.query)});
        }
        last = meta_step(theta, problem, std::span<const MetaBatchItem<P>>(batch), cfg.inner_steps,
                         cfg.inner_lr, cfg.outer_lr);
        if (on_step) on_step(step, last);
    }
    return last;
}

/// Multi-task pre-training for the transfer baseline: plain SGD on batches
/// pooled across every task's episode pool, one update per step. Batch
/// entries are drawn with replacement and grouped by task; each group's loss
/// is weighted by its share of the batch.
template <class P, class T = ProblemScalar<P>>
void train_transfer(ParamStore<T>& theta, P& problem, std::span<const typename P::Task> tasks, int steps,
                    int batch_size, T lr, Rng& rng,
                    const std::type_identity_t<std::function<void(int, T)>>& on_step = {}) {
    std::vector<std::pair<std::size_t, std::size_t>> pool; // (task index, instance index)
    for (std::size_t ti = 0; ti < tasks.size(); ++ti)
        for (std::size_t ii = 0; ii < tasks[ti].train.size(); ++ii) pool.emplace_back(ti, ii);
    if (pool.empty()) throw ContractError("train_transfer: no instances");
    for (int step = 0; step < steps; ++step) {
        if constexpr (requires { problem.begin_meta_step(0); }) problem.begin_meta_step(step);
        std::map<std::size_t, std::vector<typename P::Instance>> groups;
        for (int b = 0; b < batch_size; ++b) {
            const auto& [ti, ii] = pool[rng.below(pool.size())];
            groups[ti].push_back(tasks[ti].train[ii]);
        }
        theta.zero_grads();
        Tape<T> tape;
        std::vector<Tensor<T>> parts;
        for (const auto& [ti, instances] : groups) {
            const auto& task = tasks[ti];
            const Tensor<T> rep = problem.task_representation(
                tape, theta, task, std::span<const typename P::Instance>(instances));
            const Tensor<T> loss =
                problem.loss(tape, theta, task, std::span<const typename P::Instance>(instances), rep);
            parts.push_back(tape.scale(loss, static_cast<T>(instances.size()) / static_cast<T>(batch_size)));
        }
        const Tensor<T> total = tape.add_n(std::span<const Tensor<T>>(parts));
        tape.backward(total);
        sgd_step(theta, lr);
        if (on_step) on_step(step, total.value());
    }
}

/// One few-shot relation: its vocab id, the episode pool, and held-out pairs.
struct KgTask {
    int relation = -1;
    std::string name;
    std::vector<Triple> train;
    std::vector<Triple> eval;
};

/// Binds the meta loops to the KG walker: the task representation is the
/// configured encoder's output and the loss is the REINFORCE surrogate over
/// sampled rollouts for each instance.
template <class T>
class KgProblem {
public:
    using Scalar = T;
    using Task = KgTask;
    using Instance = Triple;

    struct Options {
        RepKind rep_kind = RepKind::Identity;
        int path_length = 3;       // walk length, and path-encoder enumeration length
        std::size_t max_paths = 100;
        double rep_norm = 0.0;     // > 0: rescale encoder reps toward this L2 norm
        int rollouts = 20;         // sampled episodes per training instance
        T entropy_base = T(0.02);
        T entropy_decay = T(0.9);
        int entropy_decay_every = 200;
        bool hide_query_edge = true;
    };

    KgProblem(const KnowledgeGraph& g, Options opt, Rng& rng)
        : g_(&g), opt_(opt), rng_(&rng), entropy_(opt.entropy_base) {}

    const KnowledgeGraph& graph() const { return *g_; }
    const Options& options() const { return opt_; }
    T entropy_weight() const { return entropy_; }
    T last_batch_reward() const { return last_reward_; }

    void begin_meta_step(int step) {
        entropy_ = opt_.entropy_base *
                   std::pow(opt_.entropy_decay, static_cast<T>(step / opt_.entropy_decay_every));
    }

    Tensor<T> task_representation(Tape<T>& tape, ParamStore<T>& store, const Task& task,
                                  std::span<const Instance> support) {
        return make_task_rep(tape, store, *g_, opt_.rep_kind, task.relation, support,
                             {.path_length = opt_.path_length, .max_paths = opt_.max_paths,
                              .rep_norm = opt_.rep_norm},
                             &cache_)
            .rep;
    }

    Tensor<T> loss(Tape<T>& tape, ParamStore<T>& store, const Task& task,
                   std::span<const Instance> instances, const Tensor<T>& rep) {
        if (instances.empty()) throw ContractError("KgProblem::loss: no instances");
        std::vector<Episode<T>> episodes;
        episodes.reserve(instances.size() * static_cast<std::size_t>(opt_.rollouts));
        EpisodeOptions eopt{.path_length = opt_.path_length};
        for (const Instance& q : instances) {
            eopt.hide_edge = opt_.hide_query_edge ? std::optional<Triple>(q) : std::nullopt;
            for (int r = 0; r < opt_.rollouts; ++r) {
                Episode<T> ep = run_episode(tape, store, *g_, q.subject, rep, eopt, rng_);
                ep.reward = ep.final_entity == q.object ? T(1) : T(0);
                episodes.push_back(std::move(ep));
            }
        }
        T total = T(0);
        for (const auto& ep : episodes) total += ep.reward;
        last_reward_ = total / static_cast<T>(episodes.size());
        return reinforce_loss(tape, std::span<const Episode<T>>(episodes), baseline_, entropy_);
    }

private:
    const KnowledgeGraph* g_;
    Options opt_;
    Rng* rng_;
    BaselineState<T> baseline_;
    PathCache cache_;
    T entropy_;
    T last_reward_ = T(0);
};

} // namespace metakgr
