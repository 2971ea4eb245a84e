#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "metakgr/meta.hpp"
#include "support/lsq_problem.hpp"

using namespace metakgr;

namespace {

using D = double;

struct KgFixture {
    Vocabulary vocab;
    std::vector<Triple> triples;
    KnowledgeGraph graph;
    std::vector<KgTask> tasks;

    KgFixture() {
        auto add = [&](const char* s, const char* r, const char* o) {
            triples.push_back({vocab.entity_id(s), vocab.relation_id(r), vocab.entity_id(o)});
        };
        add("a", "r1", "b");
        add("b", "r2", "c");
        add("c", "r1", "d");
        add("d", "r2", "a");
        add("a", "r3", "c");
        add("b", "r3", "d");
        const int t1 = vocab.relation_id("task1");
        const int t2 = vocab.relation_id("task2");
        graph = KnowledgeGraph(triples, vocab);
        const auto& v = graph.vocab();
        const int a = v.find_entity("a"), b = v.find_entity("b"), c = v.find_entity("c"), d = v.find_entity("d");
        tasks.push_back({t1, "task1", {{a, t1, c}, {b, t1, d}, {a, t1, d}, {c, t1, a}}, {{d, t1, b}}});
        tasks.push_back({t2, "task2", {{b, t2, a}, {c, t2, b}, {d, t2, c}, {a, t2, b}}, {{a, t2, c}}});
    }

    ParamStore<D> params(std::uint64_t seed, int d = 4) const {
        ParamStore<D> store(seed);
        Rng rng(seed);
        add_policy_params(store, graph.vocab(), {.d = d, .hidden = d + 2}, rng);
        add_neighbor_encoder_params(store, d, rng);
        add_path_encoder_params(store, d, rng);
        return store;
    }
};

std::vector<D> flat_values(const ParamStore<D>& s) {
    std::vector<D> out;
    for (const auto& e : s.entries()) out.insert(out.end(), e.value.v.begin(), e.value.v.end());
    return out;
}

} // namespace

TEST_CASE("task batches are distinct and roughly uniform", "[meta]") {
    Rng rng(42);
    std::vector<std::size_t> counts(10, 0);
    const int draws = 4000;
    for (int i = 0; i < draws; ++i) {
        const auto batch = sample_task_batch(rng, 10, 3);
        REQUIRE(batch.size() == 3);
        REQUIRE(std::set<std::size_t>(batch.begin(), batch.end()).size() == 3);
        for (auto t : batch) ++counts[t];
    }
    // Each task appears with p = 3/10 per draw; 3 sigma band around the mean.
    const double mean = draws * 0.3;
    const double sigma = std::sqrt(draws * 0.3 * 0.7);
    for (auto c : counts) {
        REQUIRE(static_cast<double>(c) > mean - 3 * sigma);
        REQUIRE(static_cast<double>(c) < mean + 3 * sigma);
    }
    REQUIRE_THROWS_AS(sample_task_batch(rng, 2, 3), ContractError);
}

TEST_CASE("support/query split is disjoint when the pool allows", "[meta]") {
    std::vector<int> pool;
    for (int i = 0; i < 20; ++i) pool.push_back(i);
    Rng rng(7);
    const auto split = split_support_query(rng, std::span<const int>(pool), 5, 5);
    REQUIRE_FALSE(split.overlap);
    REQUIRE(split.support.size() == 5);
    REQUIRE(split.query.size() == 5);
    std::set<int> seen(split.support.begin(), split.support.end());
    for (int q : split.query) REQUIRE_FALSE(seen.count(q));

    Rng rng2(7);
    const auto again = split_support_query(rng2, std::span<const int>(pool), 5, 5);
    REQUIRE(again.support == split.support);
    REQUIRE(again.query == split.query);
}

TEST_CASE("short pools overlap and pad with replacement", "[meta]") {
    const std::vector<int> pool{1, 2, 3};
    Rng rng(11);
    const auto split = split_support_query(rng, std::span<const int>(pool), 5, 4);
    REQUIRE(split.overlap);
    REQUIRE(split.support.size() == 5);
    REQUIRE(split.query.size() == 4);
    const std::set<int> allowed(pool.begin(), pool.end());
    for (int v : split.support) REQUIRE(allowed.count(v));
    for (int v : split.query) REQUIRE(allowed.count(v));
    // First draws are distinct, so all three pool values appear.
    REQUIRE(std::set<int>(split.support.begin(), split.support.end()).size() == 3);
    REQUIRE_THROWS_AS(split_support_query(rng, std::span<const int>(), 1, 1), ContractError);
}

TEST_CASE("adapt never touches the source parameters", "[meta]") {
    KgFixture fx;
    auto theta = fx.params(1);
    Rng rng(2);
    KgProblem<D> problem(fx.graph, {.rep_kind = RepKind::Neighbor, .rollouts = 2}, rng);
    const auto before_vals = flat_values(theta);
    theta.grad("entity_emb").v[0] = 5.0; // sentinel

    auto adapted = adapt(theta, problem, fx.tasks[0], std::span<const Triple>(fx.tasks[0].train), 2, D(0.01));
    REQUIRE(flat_values(theta) == before_vals);
    REQUIRE(theta.grad("entity_emb").v[0] == 5.0);
    REQUIRE(adapted.update_count() == 2);
    REQUIRE(flat_values(adapted) != before_vals);
}

TEST_CASE("adapt with k = 0 is an exact copy", "[meta]") {
    KgFixture fx;
    auto theta = fx.params(3);
    Rng rng(4);
    KgProblem<D> problem(fx.graph, {.rep_kind = RepKind::Path, .rollouts = 2}, rng);
    auto adapted = adapt(theta, problem, fx.tasks[0], std::span<const Triple>(fx.tasks[0].train), 0, D(0.01));
    REQUIRE(adapted == theta);
    REQUIRE(adapted.update_count() == 0);
}

TEST_CASE("a quadratic probe adapts to 0.98 theta", "[meta]") {
    // loss = w^2 (one instance; x = 1, y = 0 makes the error w itself? no:
    // use rep masked and data (1, 0): loss = (w*1 - 0)^2 = w^2, grad 2w.
    lsq::Problem problem(true);
    auto store = lsq::make_params(1.0, 0.7);
    lsq::Task task;
    const std::vector<lsq::Instance> support{{1.0, 0.0}};
    auto adapted = adapt(store, problem, task, std::span<const lsq::Instance>(support), 1, 0.01);
    REQUIRE_THAT(adapted.value("w").v[0], Catch::Matchers::WithinAbs(0.98, 1e-12));
    REQUIRE(adapted.value("c").v[0] == 0.7); // masked rep leaves c out of the graph
}

TEST_CASE("first-order meta-update matches the closed form", "[meta][oracle]") {
    const std::vector<lsq::RefBatchItem> batch{
        {{{0.5, 1.0}, {1.5, 2.2}, {-1.0, -0.7}}, {{2.0, 3.1}, {0.2, 0.4}}},
        {{{1.0, -0.5}, {-2.0, 1.8}, {0.3, 0.0}}, {{-0.7, 0.9}, {1.2, -1.1}}},
    };
    for (const bool mask : {false, true}) {
        for (const int k : {0, 1, 2, 5}) {
            lsq::Problem problem(mask);
            auto store = lsq::make_params(0.4, -0.3);
            lsq::Task task;
            std::vector<MetaBatchItem<lsq::Problem>> items;
            for (const auto& b : batch) items.push_back({&task, b.support, b.query});

            const auto stats = meta_step(store, problem, std::span<const MetaBatchItem<lsq::Problem>>(items),
                                         k, 0.05, 0.1);
            const auto want = lsq::ref_meta_step({0.4, -0.3}, mask, std::span<const lsq::RefBatchItem>(batch),
                                                 k, 0.05, 0.1);
            const double got_w = store.value("w").v[0];
            const double got_c = store.value("c").v[0];
            INFO("mask=" << mask << " k=" << k);
            REQUIRE(std::abs(got_w - want.w) / std::max({std::abs(want.w), 1e-12}) < 1e-6);
            REQUIRE(std::abs(got_c - want.c) / std::max({std::abs(want.c), 1e-12}) < 1e-6);
            REQUIRE(stats.tasks == 2);
            REQUIRE(stats.inner_updates == 2 * k);
        }
    }
}

TEST_CASE("masked representation makes the meta-update support-order invariant", "[meta]") {
    const std::vector<lsq::Instance> support{{0.5, 1.0}, {1.5, 2.2}, {-1.0, -0.7}};
    std::vector<lsq::Instance> permuted{support[2], support[0], support[1]};
    const std::vector<lsq::Instance> query{{2.0, 3.1}, {0.2, 0.4}};

    auto run = [&](const std::vector<lsq::Instance>& sup) {
        lsq::Problem problem(true);
        auto store = lsq::make_params(0.4, -0.3);
        lsq::Task task;
        const std::vector<MetaBatchItem<lsq::Problem>> items{{&task, sup, query}};
        meta_step(store, problem, std::span<const MetaBatchItem<lsq::Problem>>(items), 2, 0.05, 0.1);
        return std::pair(store.value("w").v[0], store.value("c").v[0]);
    };
    const auto a = run(support);
    const auto b = run(permuted);
    REQUIRE_THAT(a.first, Catch::Matchers::WithinAbs(b.first, 1e-12));
    REQUIRE_THAT(a.second, Catch::Matchers::WithinAbs(b.second, 1e-12));
}

TEST_CASE("meta-step batch gradients are additive over tasks", "[meta]") {
    lsq::Problem problem(false);
    lsq::Task task;
    const std::vector<lsq::Instance> sup_a{{0.5, 1.0}, {1.5, 2.2}};
    const std::vector<lsq::Instance> qry_a{{2.0, 3.1}};
    const std::vector<lsq::Instance> sup_b{{1.0, -0.5}, {-2.0, 1.8}};
    const std::vector<lsq::Instance> qry_b{{-0.7, 0.9}};

    auto grads_for = [&](const std::vector<lsq::Instance>& sup, const std::vector<lsq::Instance>& qry) {
        auto theta = lsq::make_params(0.4, -0.3);
        auto th = adapt(theta, problem, task, std::span<const lsq::Instance>(sup), 1, 0.05);
        th.zero_grads();
        Tape<D> tape;
        auto rep = problem.task_representation(tape, th, task, std::span<const lsq::Instance>(sup));
        tape.backward(problem.loss(tape, th, task, std::span<const lsq::Instance>(qry), rep));
        return std::pair(th.grad("w").v[0], th.grad("c").v[0]);
    };
    const auto ga = grads_for(sup_a, qry_a);
    const auto gb = grads_for(sup_b, qry_b);

    auto store = lsq::make_params(0.4, -0.3);
    const std::vector<MetaBatchItem<lsq::Problem>> items{{&task, sup_a, qry_a}, {&task, sup_b, qry_b}};
    meta_step(store, problem, std::span<const MetaBatchItem<lsq::Problem>>(items), 1, 0.05, 0.1);
    REQUIRE_THAT(store.value("w").v[0],
                 Catch::Matchers::WithinAbs(0.4 - 0.1 * (ga.first + gb.first), 1e-15));
    REQUIRE_THAT(store.value("c").v[0],
                 Catch::Matchers::WithinAbs(-0.3 - 0.1 * (ga.second + gb.second), 1e-15));
}

TEST_CASE("meta-training is deterministic for a fixed seed", "[meta]") {
    KgFixture fx;
    auto run = [&] {
        auto theta = fx.params(21);
        Rng rng(31);
        KgProblem<D> problem(fx.graph, {.rep_kind = RepKind::Neighbor, .rollouts = 2}, rng);
        MetaTrainConfig<D> cfg{.meta_steps = 5, .meta_batch = 2, .support_size = 2, .query_size = 2,
                               .inner_steps = 1, .inner_lr = D(0.01), .outer_lr = D(0.001)};
        int calls = 0;
        auto stats = meta_train(theta, problem, std::span<const KgTask>(fx.tasks), cfg, rng,
                                [&](int, const MetaStepStats<D>&) { ++calls; });
        REQUIRE(calls == 5);
        REQUIRE(stats.tasks == 2);
        REQUIRE(std::isfinite(stats.outer_loss));
        REQUIRE(stats.outer_reward >= D(0));
        REQUIRE(stats.outer_reward <= D(1));
        return flat_values(theta);
    };
    REQUIRE(run() == run());
}

TEST_CASE("transfer pre-training is deterministic and updates every step", "[meta]") {
    KgFixture fx;
    auto run = [&] {
        auto theta = fx.params(41);
        Rng rng(51);
        KgProblem<D> problem(fx.graph, {.rep_kind = RepKind::Identity, .rollouts = 2}, rng);
        std::vector<D> losses;
        train_transfer(theta, problem, std::span<const KgTask>(fx.tasks), 4, 6, D(0.01), rng,
                       [&](int, D loss) { losses.push_back(loss); });
        REQUIRE(losses.size() == 4);
        for (D l : losses) REQUIRE(std::isfinite(l));
        REQUIRE(theta.update_count() == 4);
        return flat_values(theta);
    };
    REQUIRE(run() == run());
}

TEST_CASE("entropy weight decays stepwise during meta-training", "[meta]") {
    KgFixture fx;
    Rng rng(61);
    KgProblem<D> problem(fx.graph, {.entropy_base = D(0.02), .entropy_decay = D(0.9), .entropy_decay_every = 200},
                         rng);
    problem.begin_meta_step(0);
    REQUIRE_THAT(problem.entropy_weight(), Catch::Matchers::WithinAbs(0.02, 1e-12));
    problem.begin_meta_step(199);
    REQUIRE_THAT(problem.entropy_weight(), Catch::Matchers::WithinAbs(0.02, 1e-12));
    problem.begin_meta_step(200);
    REQUIRE_THAT(problem.entropy_weight(), Catch::Matchers::WithinAbs(0.018, 1e-12));
    problem.begin_meta_step(400);
    REQUIRE_THAT(problem.entropy_weight(), Catch::Matchers::WithinAbs(0.0162, 1e-12));
}

TEST_CASE("hiding the query edge forces reward zero when it is the only route", "[meta]") {
    Vocabulary vocab;
    std::vector<Triple> ts{{vocab.entity_id("s"), vocab.relation_id("r"), vocab.entity_id("t")}};
    KnowledgeGraph g(ts, vocab, {.inverse_edges = false});
    ParamStore<D> store(71);
    Rng prng(71);
    add_policy_params(store, g.vocab(), {.d = 4, .hidden = 6}, prng);

    Rng rng(72);
    KgProblem<D> problem(g, {.rollouts = 5, .hide_query_edge = true}, rng);
    KgTask task{g.vocab().find_relation("r"), "r", {}, {}};
    const std::vector<Triple> instances{{g.vocab().find_entity("s"), task.relation, g.vocab().find_entity("t")}};
    Tape<D> tape;
    auto rep = problem.task_representation(tape, store, task, std::span<const Triple>(instances));
    problem.loss(tape, store, task, std::span<const Triple>(instances), rep);
    REQUIRE(problem.last_batch_reward() == D(0)); // only STOP remains at s

    Rng rng2(73);
    KgProblem<D> open(g, {.rollouts = 64, .hide_query_edge = false}, rng2);
    Tape<D> tape2;
    auto rep2 = open.task_representation(tape2, store, task, std::span<const Triple>(instances));
    open.loss(tape2, store, task, std::span<const Triple>(instances), rep2);
    REQUIRE(open.last_batch_reward() > D(0)); // near-uniform policy finds the edge
}
