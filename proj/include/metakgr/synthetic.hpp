#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metakgr/error.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/meta.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

/// Composed relation rule: c := first ∘ second, i.e. (a, c, z) holds whenever
/// a --first--> b --second--> z for some witness b.
struct CompositionRule {
    int first = -1;
    int second = -1;

    friend bool operator==(const CompositionRule&, const CompositionRule&) = default;
    friend auto operator<=>(const CompositionRule&, const CompositionRule&) = default;
};

struct SyntheticSpec {
    int n_entities = 200;
    int n_base_relations = 12;
    int edges_per_relation = 160;
    int n_composed = 10;
    int meta_train_tasks = 8;
    int meta_dev_tasks = 1;
    int meta_test_tasks = 1;
    double eval_fraction = 0.5; // share of each composed relation held out as queries
    bool inverse_edges = false; // composed rules are forward joins, so inverses only widen slates
    std::uint64_t seed = 7;
    // When empty, n_composed distinct rules are drawn from the seed.
    std::vector<CompositionRule> rules;

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct SyntheticData {
    KnowledgeGraph graph;
    std::vector<CompositionRule> rules; // rules[i] defines composed relation i
    std::vector<int> composed_ids;      // vocabulary id of composed relation i
    std::vector<KgTask> meta_train;
    std::vector<KgTask> meta_dev;
    std::vector<KgTask> meta_test;
};

namespace detail {

inline std::string padded_label(char prefix, int id, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c%0*d", prefix, width, id);
    return buf;
}

} // namespace detail

inline std::string synthetic_entity_label(int id) { return detail::padded_label('e', id, 3); }
inline std::string synthetic_base_label(int id) { return detail::padded_label('b', id, 2); }
inline std::string synthetic_composed_label(int id) { return detail::padded_label('c', id, 2); }

/// Reference join used by both the generator and its oracle test: every
/// (a, z) with a 2-hop witness a --first--> b --second--> z, deduplicated and
/// sorted.
inline std::vector<std::pair<int, int>> compose_join(std::span<const Triple> base, const CompositionRule& rule) {
    std::vector<std::vector<int>> by_subject;
    for (const Triple& t : base) {
        if (t.relation != rule.second) continue;
        if (static_cast<std::size_t>(t.subject) >= by_subject.size())
            by_subject.resize(static_cast<std::size_t>(t.subject) + 1);
        by_subject[static_cast<std::size_t>(t.subject)].push_back(t.object);
    }
    std::set<std::pair<int, int>> out;
    for (const Triple& t : base) {
        if (t.relation != rule.first) continue;
        if (static_cast<std::size_t>(t.object) >= by_subject.size()) continue;
        for (int z : by_subject[static_cast<std::size_t>(t.object)]) out.emplace(t.subject, z);
    }
    return {out.begin(), out.end()};
}

/// Deterministic compositional KG: seeded base-relation edges plus one task
/// per composed relation. Composed triples are materialized by the 2-hop join
/// and never added to the graph; the composed relation ids exist only in the
/// vocabulary (and in task queries).
inline SyntheticData gen_synthetic(const SyntheticSpec& spec) {
    if (spec.n_entities < 3)
        throw GenerationError("synthetic spec needs at least 3 entities for a 2-hop rule plus STOP slack");
    if (spec.n_base_relations < 1) throw GenerationError("synthetic spec needs at least 1 base relation");
    if (spec.edges_per_relation < 1) throw GenerationError("synthetic spec needs at least 1 edge per relation");
    if (spec.n_composed < 1) throw GenerationError("synthetic spec needs at least 1 composed relation");
    if (spec.meta_train_tasks + spec.meta_dev_tasks + spec.meta_test_tasks != spec.n_composed)
        throw GenerationError("synthetic task split must partition the composed relations: " +
                              std::to_string(spec.meta_train_tasks) + "+" + std::to_string(spec.meta_dev_tasks) +
                              "+" + std::to_string(spec.meta_test_tasks) +
                              " != " + std::to_string(spec.n_composed));
    if (!(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0))
        throw GenerationError("eval_fraction must lie strictly between 0 and 1");
    const std::size_t max_pairs =
        static_cast<std::size_t>(spec.n_entities) * static_cast<std::size_t>(spec.n_entities - 1);
    if (static_cast<std::size_t>(spec.edges_per_relation) > max_pairs)
        throw GenerationError("edges_per_relation exceeds the number of distinct entity pairs");

    Rng rule_rng(Rng::derive(spec.seed, {1}));
    Rng edge_rng(Rng::derive(spec.seed, {2}));
    Rng split_rng(Rng::derive(spec.seed, {3}));

    std::vector<CompositionRule> rules = spec.rules;
    if (rules.empty()) {
        // Pooled cycle design: first hops drawn from relations [0, f), second
        // hops from [s0, s0+f). Rule i = (i%f, s0 + (i%f + i/f) % f) keeps the
        // pairs distinct and spreads each pooled relation over >= 2 rules per
        // role, so a held-out rule's hops still occur in meta-train rules in
        // the same role. Relations outside the pools act as distractor edges.
        int f = std::max(1, std::min(spec.n_base_relations / 2,
                                     static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_composed))))));
        while (static_cast<std::size_t>(f) * static_cast<std::size_t>(f) <
                   static_cast<std::size_t>(spec.n_composed) &&
               f < spec.n_base_relations)
            ++f; // few base relations: widen (and overlap) the pools to reach capacity
        if (static_cast<std::size_t>(f) * static_cast<std::size_t>(f) < static_cast<std::size_t>(spec.n_composed))
            throw GenerationError("not enough distinct base-relation pairs for " +
                                  std::to_string(spec.n_composed) + " composition rules");
        const int s0 = std::min(f, spec.n_base_relations - f);
        for (int i = 0; i < spec.n_composed; ++i)
            rules.push_back({i % f, s0 + (i % f + i / f) % f});
        rule_rng.shuffle(rules.begin(), rules.end()); // decouple task split from rule ordering
    } else {
        if (static_cast<int>(rules.size()) != spec.n_composed)
            throw GenerationError("explicit rule list length must equal n_composed");
        for (const CompositionRule& r : rules)
            if (r.first < 0 || r.first >= spec.n_base_relations || r.second < 0 ||
                r.second >= spec.n_base_relations)
                throw GenerationError("composition rule references a base relation out of range");
    }

    Vocabulary vocab;
    for (int e = 0; e < spec.n_entities; ++e) vocab.entity_id(synthetic_entity_label(e));
    std::vector<int> base_ids(static_cast<std::size_t>(spec.n_base_relations));
    for (int r = 0; r < spec.n_base_relations; ++r) base_ids[static_cast<std::size_t>(r)] = vocab.relation_id(synthetic_base_label(r));
    std::vector<int> composed_ids(static_cast<std::size_t>(spec.n_composed));
    for (int c = 0; c < spec.n_composed; ++c)
        composed_ids[static_cast<std::size_t>(c)] = vocab.relation_id(synthetic_composed_label(c));

    std::vector<Triple> base_triples;
    base_triples.reserve(static_cast<std::size_t>(spec.n_base_relations) *
                         static_cast<std::size_t>(spec.edges_per_relation));
    for (int r = 0; r < spec.n_base_relations; ++r) {
        std::set<std::pair<int, int>> edges;
        while (edges.size() < static_cast<std::size_t>(spec.edges_per_relation)) {
            const int s = static_cast<int>(edge_rng.below(static_cast<std::size_t>(spec.n_entities)));
            const int o = static_cast<int>(edge_rng.below(static_cast<std::size_t>(spec.n_entities)));
            if (s == o) continue;
            edges.emplace(s, o);
        }
        for (const auto& [s, o] : edges) base_triples.push_back({s, base_ids[static_cast<std::size_t>(r)], o});
    }

    std::vector<std::vector<Triple>> composed(static_cast<std::size_t>(spec.n_composed));
    for (int c = 0; c < spec.n_composed; ++c) {
        CompositionRule rule = rules[static_cast<std::size_t>(c)];
        rule.first = base_ids[static_cast<std::size_t>(rule.first)];
        rule.second = base_ids[static_cast<std::size_t>(rule.second)];
        for (const auto& [a, z] : compose_join(base_triples, rule))
            composed[static_cast<std::size_t>(c)].push_back({a, composed_ids[static_cast<std::size_t>(c)], z});
        if (composed[static_cast<std::size_t>(c)].size() < 2)
            throw GenerationError("composition rule for " + synthetic_composed_label(c) +
                                  " yields fewer than 2 triples (a task needs a train and an eval half); "
                                  "densify edges_per_relation or reseed");
    }

    std::vector<int> order(static_cast<std::size_t>(spec.n_composed));
    for (int c = 0; c < spec.n_composed; ++c) order[static_cast<std::size_t>(c)] = c;
    split_rng.shuffle(order.begin(), order.end());

    SyntheticData data;
    data.graph = KnowledgeGraph(base_triples, std::move(vocab), {.inverse_edges = spec.inverse_edges});
    data.rules = rules;
    data.composed_ids = composed_ids;
    for (int i = 0; i < spec.n_composed; ++i) {
        const int c = order[static_cast<std::size_t>(i)];
        auto& triples = composed[static_cast<std::size_t>(c)];
        split_rng.shuffle(triples.begin(), triples.end());
        std::size_t n_eval = static_cast<std::size_t>(spec.eval_fraction * static_cast<double>(triples.size()));
        n_eval = std::clamp<std::size_t>(n_eval, 1, triples.size() - 1);
        KgTask task;
        task.relation = composed_ids[static_cast<std::size_t>(c)];
        task.name = synthetic_composed_label(c);
        task.eval.assign(triples.begin(), triples.begin() + static_cast<std::ptrdiff_t>(n_eval));
        task.train.assign(triples.begin() + static_cast<std::ptrdiff_t>(n_eval), triples.end());
        if (i < spec.meta_train_tasks)
            data.meta_train.push_back(std::move(task));
        else if (i < spec.meta_train_tasks + spec.meta_dev_tasks)
            data.meta_dev.push_back(std::move(task));
        else
            data.meta_test.push_back(std::move(task));
    }
    return data;
}

} // namespace metakgr
