#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "metakgr/meta.hpp"
#include "metakgr/parallel.hpp"
#include "metakgr/policy.hpp"

namespace metakgr {

inline constexpr std::size_t kUnranked = std::numeric_limits<std::size_t>::max();

/// Mean reciprocal rank; an unranked gold contributes 0 (1/infinity).
inline double mrr(std::span<const std::size_t> ranks) {
    if (ranks.empty()) throw ContractError("mrr: no ranks");
    double s = 0.0;
    for (std::size_t r : ranks) {
        if (r == 0) throw ContractError("mrr: ranks are 1-based");
        if (r != kUnranked) s += 1.0 / static_cast<double>(r);
    }
    return s / static_cast<double>(ranks.size());
}

inline double hits_at(std::span<const std::size_t> ranks, std::size_t k) {
    if (ranks.empty()) throw ContractError("hits_at: no ranks");
    std::size_t hit = 0;
    for (std::size_t r : ranks) {
        if (r == 0) throw ContractError("hits_at: ranks are 1-based");
        if (r <= k) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(ranks.size());
}

struct ScoredEntity {
    int entity;
    double score; // total path log-probability (or logsumexp in sum mode)
};

struct BeamOptions {
    int width = 100;
    int path_length = 3;
    bool sum_paths = false; // aggregate multiple paths per entity by logsumexp instead of max
    std::optional<Triple> hide_edge;
};

/// Deterministic beam search over complete length-T walks. Returns entities
/// reached by any surviving walk, sorted by score descending with ties broken
/// toward the lower entity id. Pruning ties keep earlier candidates, which
/// follow beam order then slate order.
template <class T>
std::vector<ScoredEntity> beam_decode(ParamStore<T>& store, const KnowledgeGraph& g, int start,
                                      std::span<const T> rep_values, const BeamOptions& opt) {
    if (opt.width < 1) throw ContractError("beam_decode: width must be >= 1");
    struct Item {
        int entity;
        int prev_rel;
        LstmState<T> state;
        double lp;
    };
    Tape<T> tape;
    const Tensor<T> rep = tape.constant({static_cast<int>(rep_values.size())},
                                        std::vector<T>(rep_values.begin(), rep_values.end()));
    std::vector<Item> beam{{start, begin_relation_row(store), lstm_zero_state(tape, policy_hidden_width(store)), 0.0}};
    for (int step = 0; step < opt.path_length; ++step) {
        std::vector<Item> candidates;
        for (const Item& item : beam) {
            const PolicyStepOut<T> out =
                policy_step(tape, store, g, item.entity, item.prev_rel, item.state, rep, opt.hide_edge);
            const auto& lp = out.log_probs.values();
            for (std::size_t i = 0; i < out.slate.size(); ++i)
                candidates.push_back({out.slate[i].target, out.slate[i].relation, out.state,
                                      item.lp + static_cast<double>(lp[i])});
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Item& a, const Item& b) { return a.lp > b.lp; });
        if (candidates.size() > static_cast<std::size_t>(opt.width))
            candidates.resize(static_cast<std::size_t>(opt.width));
        beam = std::move(candidates);
    }

    std::map<int, double> by_entity;
    for (const Item& item : beam) {
        auto it = by_entity.find(item.entity);
        if (it == by_entity.end()) {
            by_entity.emplace(item.entity, item.lp);
        } else if (opt.sum_paths) {
            const double hi = std::max(it->second, item.lp);
            it->second = hi + std::log(std::exp(it->second - hi) + std::exp(item.lp - hi));
        } else {
            it->second = std::max(it->second, item.lp);
        }
    }
    std::vector<ScoredEntity> ranked;
    ranked.reserve(by_entity.size());
    for (const auto& [e, s] : by_entity) ranked.push_back({e, s});
    std::sort(ranked.begin(), ranked.end(), [](const ScoredEntity& a, const ScoredEntity& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.entity < b.entity;
    });
    return ranked;
}

/// 1-based position of `gold` in a ranked list; kUnranked when absent.
inline std::size_t rank_of(std::span<const ScoredEntity> ranked, int gold) {
    for (std::size_t i = 0; i < ranked.size(); ++i)
        if (ranked[i].entity == gold) return i + 1;
    return kUnranked;
}

struct TaskEval {
    double mrr = 0.0;
    double hits1 = 0.0;
    double hits3 = 0.0;
    double hits10 = 0.0;
    std::size_t n = 0; // query count
};

inline TaskEval eval_from_ranks(std::span<const std::size_t> ranks) {
    return {mrr(ranks), hits_at(ranks, 1), hits_at(ranks, 3), hits_at(ranks, 10), ranks.size()};
}

/// Unweighted mean over tasks; n is the total query count.
inline TaskEval macro_average(std::span<const TaskEval> per_task) {
    if (per_task.empty()) throw ContractError("macro_average: no tasks");
    TaskEval m;
    for (const TaskEval& t : per_task) {
        m.mrr += t.mrr;
        m.hits1 += t.hits1;
        m.hits3 += t.hits3;
        m.hits10 += t.hits10;
        m.n += t.n;
    }
    const double k = static_cast<double>(per_task.size());
    m.mrr /= k;
    m.hits1 /= k;
    m.hits3 /= k;
    m.hits10 /= k;
    return m;
}

/// Ranks every query's gold object under beam decoding. The representation is
/// derived from the support set only; queries are never shown to the encoder.
/// Queries run in parallel (bounded by META_KGR_THREADS) with one result slot
/// each, so the outcome is independent of scheduling.
template <class T>
TaskEval evaluate_task(KgProblem<T>& problem, ParamStore<T>& store, const KgTask& task,
                       std::span<const Triple> support, std::span<const Triple> queries,
                       const BeamOptions& beam) {
    if (queries.empty()) throw ContractError("evaluate_task: no queries");
    Tape<T> tape;
    const std::vector<T> rep = problem.task_representation(tape, store, task, support).values();
    std::vector<std::size_t> ranks(queries.size(), kUnranked);
    parallel_for(queries.size(), [&](std::size_t i) {
        BeamOptions opt = beam;
        if (problem.options().hide_query_edge) opt.hide_edge = queries[i];
        const auto ranked = beam_decode(store, problem.graph(), queries[i].subject,
                                        std::span<const T>(rep), opt);
        ranks[i] = rank_of(ranked, queries[i].object);
    });
    return eval_from_ranks(ranks);
}

/// Support/query material for one held-out task at a given shot count.
struct EvalEpisode {
    const KgTask* task = nullptr;
    std::vector<Triple> support;
    std::vector<Triple> queries;
};

struct FinetunePoint {
    int steps = 0;
    TaskEval macro;
    std::vector<TaskEval> per_task;
};

/// Evaluates theta on every episode after j = 0..max_steps fine-tuning steps
/// on the episode's support set. Step j+1 continues from step j's parameters,
/// one walk per task.
template <class T>
std::vector<FinetunePoint> finetune_curve(KgProblem<T>& problem, const ParamStore<T>& theta,
                                             std::span<const EvalEpisode> episodes, int max_steps, T alpha,
                                             const BeamOptions& beam) {
    if (episodes.empty()) throw ContractError("finetune_curve: no episodes");
    if (max_steps < 0) throw ContractError("finetune_curve: negative step budget");
    std::vector<FinetunePoint> points(static_cast<std::size_t>(max_steps) + 1);
    for (int j = 0; j <= max_steps; ++j) points[static_cast<std::size_t>(j)].steps = j;
    for (const EvalEpisode& ep : episodes) {
        ParamStore<T> th = theta;
        th.zero_grads();
        for (int j = 0; j <= max_steps; ++j) {
            if (j > 0) {
                Tape<T> tape;
                const std::span<const Triple> sup(ep.support);
                const Tensor<T> rep = problem.task_representation(tape, th, *ep.task, sup);
                tape.backward(problem.loss(tape, th, *ep.task, sup, rep));
                sgd_step(th, alpha);
            }
            points[static_cast<std::size_t>(j)].per_task.push_back(
                evaluate_task(problem, th, *ep.task, std::span<const Triple>(ep.support),
                              std::span<const Triple>(ep.queries), beam));
        }
    }
    for (auto& p : points) p.macro = macro_average(std::span<const TaskEval>(p.per_task));
    return points;
}

/// Fine-tune step count chosen once on meta-dev and then frozen; meta-test
/// may only be evaluated under a selected schedule.
struct FineTuneSchedule {
    int steps = -1;

    bool selected() const { return steps >= 0; }
};

/// Picks the step count with the best dev macro MRR (ties toward fewer steps).
inline FineTuneSchedule select_schedule(std::span<const FinetunePoint> dev_curve) {
    if (dev_curve.empty()) throw ProtocolError("schedule selection requires a dev curve");
    std::size_t best = 0;
    for (std::size_t j = 1; j < dev_curve.size(); ++j)
        if (dev_curve[j].macro.mrr > dev_curve[best].macro.mrr) best = j;
    return {dev_curve[best].steps};
}

struct ProtocolResult {
    TaskEval initial;                  // macro over tasks before any fine-tuning
    TaskEval best;                     // macro at the frozen step count
    std::vector<TaskEval> per_task_initial;
    std::vector<TaskEval> per_task_best;
    int best_steps = 0;
};

/// Initial and Best evaluation of held-out episodes under a frozen schedule.
template <class T>
ProtocolResult apply_schedule(KgProblem<T>& problem, const ParamStore<T>& theta,
                                 std::span<const EvalEpisode> episodes, const FineTuneSchedule& schedule,
                                 T alpha, const BeamOptions& beam) {
    if (!schedule.selected())
        throw ProtocolError("meta-test evaluation without a dev-selected fine-tune schedule");
    const auto curve = finetune_curve(problem, theta, episodes, schedule.steps, alpha, beam);
    ProtocolResult out;
    out.initial = curve.front().macro;
    out.per_task_initial = curve.front().per_task;
    out.best = curve.back().macro;
    out.per_task_best = curve.back().per_task;
    out.best_steps = schedule.steps;
    return out;
}

} // namespace metakgr
