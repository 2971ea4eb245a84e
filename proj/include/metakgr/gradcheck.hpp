#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/encoders.hpp"
#include "metakgr/error.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/policy.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

struct GradCheckSuite {
    std::string name;
    double max_rel_err = 0.0;
    int checks = 0;
};

struct GradCheckReport {
    std::vector<GradCheckSuite> suites;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& s : suites) m = std::max(m, s.max_rel_err);
        return m;
    }
    bool passed(double tol = 1e-4) const { return max_rel_err() < tol; }
};

namespace detail {

/// Central finite differences against the tape gradient for every component
/// of every parameter. `lossf` must be a pure function of the store.
template <class F>
void fd_accumulate(GradCheckSuite& suite, ParamStore<double>& store, F&& lossf, double h = 1e-5) {
    store.zero_grads();
    {
        Tape<double> tape;
        tape.backward(lossf(tape, store));
    }
    std::vector<std::vector<double>> analytic;
    for (std::size_t p = 0; p < store.param_count(); ++p)
        analytic.push_back(store.entry(static_cast<int>(p)).grad.v);
    store.zero_grads();

    auto value = [&] {
        Tape<double> tape;
        return lossf(tape, store).value();
    };
    for (std::size_t p = 0; p < store.param_count(); ++p) {
        auto& theta = store.entry(static_cast<int>(p)).value.v;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double orig = theta[i];
            theta[i] = orig + h;
            const double up = value();
            theta[i] = orig - h;
            const double down = value();
            theta[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = analytic[p][i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            suite.max_rel_err = std::max(suite.max_rel_err, rel);
            ++suite.checks;
        }
    }
}

struct GradCheckFixture {
    KnowledgeGraph graph;
    ParamStore<double> store;
    Rng rng;

    explicit GradCheckFixture(std::uint64_t seed) : rng(Rng::derive(seed, {0x6d6b6772})) {
        Vocabulary vocab;
        const int n = 6;
        for (int e = 0; e < n; ++e) vocab.entity_id("g" + std::to_string(e));
        vocab.relation_id("r0");
        vocab.relation_id("r1");
        std::vector<Triple> triples;
        Rng graph_rng(Rng::derive(seed, {0x67726170}));
        for (int i = 0; i < 10; ++i) {
            const int s = static_cast<int>(graph_rng.below(n));
            int o = static_cast<int>(graph_rng.below(n));
            if (o == s) o = (o + 1) % n;
            triples.push_back({s, static_cast<int>(graph_rng.below(2)), o});
        }
        graph = KnowledgeGraph(triples, std::move(vocab));
        Rng init(Rng::derive(seed, {0x696e6974}));
        add_policy_params(store, graph.vocab(), {.d = 4, .hidden = 4}, init);
        add_neighbor_encoder_params(store, 4, init);
        add_path_encoder_params(store, 4, init);
        // N(0, 0.01) embeddings are too flat to exercise nonlinear regions;
        // widen them so the checks see curvature.
        for (const char* name : {"entity_emb", "relation_emb"}) {
            auto& v = store.value(name).v;
            for (double& x : v) x += init.uniform(-0.4, 0.4);
        }
    }

    int random_entity() { return static_cast<int>(rng.below(static_cast<std::uint64_t>(graph.entity_count()))); }

    Tensor<double> identity_rep(Tape<double>& tape, ParamStore<double>& store_ref, int relation) {
        return tape.lookup(store_ref, "relation_emb", relation);
    }

    /// Fixed random projection so vector-valued outputs reduce to one scalar.
    Tensor<double> project(Tape<double>& tape, const Tensor<double>& v) {
        Rng w(Rng::derive(17, {0x70726f6a}));
        const int width = static_cast<int>(v.values().size());
        std::vector<double> weights(static_cast<std::size_t>(width));
        for (double& x : weights) x = w.uniform(-1.0, 1.0);
        return tape.dot(v, tape.constant({width}, std::move(weights)));
    }

    /// Pre-samples rollouts so the loss can replay them as a pure function of
    /// the parameters (Follow mode keeps the walk fixed under perturbation).
    std::vector<std::vector<int>> sample_actions(int count, int path_length, const std::vector<int>& starts,
                                                 std::span<const double> rep_values) {
        std::vector<std::vector<int>> actions;
        for (int i = 0; i < count; ++i) {
            Tape<double> tape;
            const int width = static_cast<int>(rep_values.size());
            const Tensor<double> rep =
                tape.constant({width}, std::vector<double>(rep_values.begin(), rep_values.end()));
            const Episode<double> ep = run_episode(tape, store, graph, starts[static_cast<std::size_t>(i)], rep,
                                                   {.path_length = path_length}, &rng);
            std::vector<int> seq;
            for (const auto& s : ep.steps) seq.push_back(s.action_index);
            actions.push_back(std::move(seq));
        }
        return actions;
    }
};

} // namespace detail

/// Finite-difference sweep over every parameterized pathway: one policy step,
/// the full REINFORCE surrogate, both task encoders, and the composite
/// inner-loop objective whose gradient an adaptation step applies. Small dims
/// (4) and double precision keep the comparison sharp.
inline GradCheckReport run_gradcheck(int n_seeds = 10, std::uint64_t seed0 = 1) {
    if (n_seeds < 1) throw ContractError("run_gradcheck: need at least one seed");
    GradCheckReport report;
    report.suites = {{"policy-step"}, {"reinforce"}, {"neighbor-encoder"}, {"path-encoder"}, {"adapt-composite"}};
    GradCheckSuite& policy = report.suites[0];
    GradCheckSuite& reinforce = report.suites[1];
    GradCheckSuite& neighbor = report.suites[2];
    GradCheckSuite& path = report.suites[3];
    GradCheckSuite& composite = report.suites[4];

    for (int s = 0; s < n_seeds; ++s) {
        const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(s);
        detail::GradCheckFixture fx(seed);
        const int start = fx.random_entity();
        const int query_rel = static_cast<int>(fx.rng.below(2));

        {
            const int prev = static_cast<int>(fx.rng.below(2));
            std::size_t slate_size;
            {
                Tape<double> probe;
                LstmState<double> st = lstm_zero_state(probe, policy_hidden_width(fx.store));
                slate_size = policy_step(probe, fx.store, fx.graph, start, prev, st,
                                         fx.identity_rep(probe, fx.store, query_rel), std::nullopt)
                                 .slate.size();
            }
            const int target = static_cast<int>(fx.rng.below(slate_size));
            detail::fd_accumulate(policy, fx.store, [&](Tape<double>& tape, ParamStore<double>& st) {
                LstmState<double> state = lstm_zero_state(tape, policy_hidden_width(st));
                PolicyStepOut<double> out = policy_step(tape, st, fx.graph, start, prev, state,
                                                        fx.identity_rep(tape, st, query_rel), std::nullopt);
                return tape.pick(out.log_probs, target);
            });
        }

        std::vector<int> starts = {start, fx.random_entity()};
        std::vector<double> rep_values;
        {
            Tape<double> tape;
            rep_values = fx.identity_rep(tape, fx.store, query_rel).values();
        }
        const auto actions = fx.sample_actions(2, 3, starts, rep_values);
        auto replay_loss = [&](Tape<double>& tape, ParamStore<double>& st, const Tensor<double>& rep) {
            std::vector<Episode<double>> eps;
            for (std::size_t i = 0; i < actions.size(); ++i) {
                EpisodeOptions opt{.path_length = 3, .mode = RolloutMode::Follow, .forced_actions = actions[i]};
                eps.push_back(run_episode(tape, st, fx.graph, starts[i], rep, opt));
            }
            eps[0].reward = 1.0; // mixed advantages so both signs of the surrogate are exercised
            eps[1].reward = 0.0;
            BaselineState<double> bl{.value = 0.3};
            return reinforce_loss(tape, std::span<const Episode<double>>(eps), bl, 0.05);
        };
        detail::fd_accumulate(reinforce, fx.store, [&](Tape<double>& tape, ParamStore<double>& st) {
            return replay_loss(tape, st, fx.identity_rep(tape, st, query_rel));
        });

        std::vector<Triple> support;
        for (int i = 0; i < 3; ++i) support.push_back({fx.random_entity(), query_rel, fx.random_entity()});
        detail::fd_accumulate(neighbor, fx.store, [&](Tape<double>& tape, ParamStore<double>& st) {
            return fx.project(tape, neighbor_task_rep(tape, st, fx.graph, std::span<const Triple>(support)));
        });

        std::vector<Triple> connected;
        for (const Triple& t : support) {
            // walk two edges from the subject so a connecting path exists
            auto hop1 = fx.graph.outgoing(t.subject);
            const Edge& e1 = hop1[fx.rng.below(hop1.size())];
            auto hop2 = fx.graph.outgoing(e1.target);
            const Edge& e2 = hop2[fx.rng.below(hop2.size())];
            connected.push_back({t.subject, query_rel, e2.target});
        }
        detail::fd_accumulate(path, fx.store, [&](Tape<double>& tape, ParamStore<double>& st) {
            return fx.project(
                tape, path_task_rep(tape, st, fx.graph, std::span<const Triple>(connected), 3, 100).rep);
        });

        detail::fd_accumulate(composite, fx.store, [&](Tape<double>& tape, ParamStore<double>& st) {
            // Substitution path exactly as in training: the encoder output is
            // rescaled toward the embedding norm before it reaches the policy.
            const Tensor<double> rep =
                make_task_rep(tape, st, fx.graph, RepKind::Neighbor, query_rel,
                              std::span<const Triple>(support), {.rep_norm = 0.8})
                    .rep;
            return replay_loss(tape, st, rep);
        });
    }
    return report;
}

} // namespace metakgr
