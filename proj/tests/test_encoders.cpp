#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "metakgr/encoders.hpp"
#include "metakgr/kg.hpp"

using namespace metakgr;

namespace {

using D = double;

struct Fixture {
    Vocabulary vocab;
    std::vector<Triple> triples;
    KnowledgeGraph graph;
    ParamStore<D> store;

    Fixture(std::uint64_t seed, const std::vector<std::array<const char*, 3>>& spec, int d)
        : store(seed) {
        for (const auto& [s, r, o] : spec)
            triples.push_back({vocab.entity_id(s), vocab.relation_id(r), vocab.entity_id(o)});
        graph = KnowledgeGraph(triples, vocab);
        Rng rng(seed);
        add_policy_params(store, graph.vocab(), {.d = d, .hidden = 2 * d}, rng);
        add_neighbor_encoder_params(store, d, rng);
        add_path_encoder_params(store, d, rng);
        Rng noise(seed + 1000);
        for (auto& e : store.entries())
            for (auto& v : e.value.v) v += noise.uniform(-0.4, 0.4);
    }
};

std::vector<D> row_of(const Array<D>& table, int r) {
    const int d = table.shape[1];
    return std::vector<D>(table.v.begin() + static_cast<std::ptrdiff_t>(r) * d,
                          table.v.begin() + static_cast<std::ptrdiff_t>(r + 1) * d);
}

/// Reference: average the per-neighbor affine images, then tanh.
std::vector<D> neighbor_embed_ref(const ParamStore<D>& store, const KnowledgeGraph& g, int e) {
    const auto& W = store.value("nbr.w_c");
    const auto& b = store.value("nbr.b_c").v;
    const int d = W.shape[0];
    const auto nbrs = g.neighbors(e);
    std::vector<D> acc(static_cast<std::size_t>(d), 0.0);
    if (nbrs.empty()) {
        for (int i = 0; i < d; ++i) acc[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)];
    } else {
        for (const Edge& n : nbrs) {
            std::vector<D> f = row_of(store.value("relation_emb"), n.relation);
            const auto t = row_of(store.value("entity_emb"), n.target);
            f.insert(f.end(), t.begin(), t.end());
            for (int i = 0; i < d; ++i) {
                D s = b[static_cast<std::size_t>(i)];
                for (int j = 0; j < 2 * d; ++j) s += W.at(i, j) * f[static_cast<std::size_t>(j)];
                acc[static_cast<std::size_t>(i)] += s;
            }
        }
        for (auto& v : acc) v /= static_cast<D>(nbrs.size());
    }
    for (auto& v : acc) v = std::tanh(v);
    return acc;
}

using LossFn = std::function<Tensor<D>(Tape<D>&, ParamStore<D>&)>;

void fd_check(const LossFn& f, ParamStore<D>& store, double eps = 1e-4, double tol = 1e-4) {
    store.zero_grads();
    Tape<D> tape;
    tape.backward(f(tape, store));
    for (auto& e : store.entries()) {
        for (std::size_t i = 0; i < e.value.v.size(); ++i) {
            const double saved = e.value.v[i];
            e.value.v[i] = saved + eps;
            Tape<D> tp;
            const double fp = f(tp, store).value();
            e.value.v[i] = saved - eps;
            Tape<D> tm;
            const double fm = f(tm, store).value();
            e.value.v[i] = saved;
            const double fd = (fp - fm) / (2 * eps);
            const double an = e.grad.v[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            INFO(e.name << "[" << i << "] fd=" << fd << " analytic=" << an);
            REQUIRE(rel < tol);
        }
    }
}

} // namespace

TEST_CASE("neighbor embedding matches the per-neighbor reference", "[encoders]") {
    Fixture fx(7, {{"a", "r1", "b"}, {"a", "r2", "c"}, {"b", "r1", "c"}, {"d", "r2", "a"}}, 5);
    for (const char* name : {"a", "b", "c", "d"}) {
        const int e = fx.graph.vocab().find_entity(name);
        Tape<D> tape;
        const auto got = neighbor_embed(tape, fx.store, fx.graph, e).values();
        const auto want = neighbor_embed_ref(fx.store, fx.graph, e);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
    }
}

TEST_CASE("entity with no neighbors embeds as tanh of the bias", "[encoders]") {
    Vocabulary vocab;
    std::vector<Triple> ts{{vocab.entity_id("a"), vocab.relation_id("r"), vocab.entity_id("b")}};
    vocab.entity_id("lonely");
    KnowledgeGraph g(ts, vocab);
    ParamStore<D> store(3);
    Rng rng(3);
    add_policy_params(store, g.vocab(), {.d = 4, .hidden = 8}, rng);
    add_neighbor_encoder_params(store, 4, rng);
    store.value("nbr.b_c").v = {0.5, -0.5, 0.0, 1.0};
    Tape<D> tape;
    const auto got = neighbor_embed(tape, store, g, g.vocab().find_entity("lonely")).values();
    for (int i = 0; i < 4; ++i)
        REQUIRE_THAT(got[static_cast<std::size_t>(i)],
                     Catch::Matchers::WithinAbs(std::tanh(store.value("nbr.b_c").v[static_cast<std::size_t>(i)]), 1e-12));
}

TEST_CASE("neighbor task representation is antisymmetric and order invariant", "[encoders]") {
    Fixture fx(17, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"c", "r1", "d"}, {"d", "r2", "a"}, {"a", "r2", "c"}}, 5);
    const std::vector<Triple> fwd{{0, 0, 1}, {2, 0, 3}};
    const std::vector<Triple> rev{{1, 0, 0}, {3, 0, 2}};
    const std::vector<Triple> perm{{2, 0, 3}, {0, 0, 1}};
    Tape<D> tape;
    const auto a = neighbor_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(fwd)).values();
    const auto b = neighbor_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(rev)).values();
    const auto c = neighbor_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(perm)).values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE_THAT(a[i], Catch::Matchers::WithinAbs(-b[i], 1e-12));
        REQUIRE_THAT(a[i], Catch::Matchers::WithinAbs(c[i], 1e-12));
    }
    REQUIRE_THROWS_AS(neighbor_task_rep(tape, fx.store, fx.graph, std::span<const Triple>()), ContractError);
}

TEST_CASE("neighbor task representation matches finite differences", "[encoders][fd]") {
    Fixture fx(27, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"a", "r2", "c"}}, 4);
    const std::vector<Triple> support{{0, 1, 2}, {1, 0, 0}};
    fd_check([&](Tape<D>& t, ParamStore<D>& s) {
        auto rep = neighbor_task_rep(t, s, fx.graph, std::span<const Triple>(support));
        return t.sum(t.mul(rep, rep));
    }, fx.store);
}

TEST_CASE("path encoding consumes relations in order", "[encoders]") {
    Fixture fx(37, {{"a", "r1", "b"}, {"b", "r2", "c"}}, 4);
    const int r1 = fx.graph.vocab().find_relation("r1");
    const int r2 = fx.graph.vocab().find_relation("r2");
    Tape<D> tape;
    const auto fwd = path_encode(tape, fx.store, {r1, r2}).values();
    const auto rev = path_encode(tape, fx.store, {r2, r1}).values();
    REQUIRE(fwd != rev); // order must matter for a sequence encoder
    REQUIRE_THROWS_AS(path_encode(tape, fx.store, {}), ContractError);
}

TEST_CASE("path task representation averages over every discovered path", "[encoders]") {
    // a -> b -> c plus a direct a -> c edge: two 2-hop classes pad differently.
    Fixture fx(47, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"a", "r3", "c"}}, 4);
    const auto& v = fx.graph.vocab();
    const std::vector<Triple> support{{v.find_entity("a"), 0, v.find_entity("c")}};
    const auto ps = fx.graph.enumerate_paths(v.find_entity("a"), v.find_entity("c"), 3, 100);

    Tape<D> tape;
    auto out = path_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(support), 3, 100);
    REQUIRE(out.path_count == ps.paths.size());
    REQUIRE_FALSE(out.fallback);

    std::vector<D> want(4, 0.0);
    for (const auto& p : ps.paths) {
        const auto e = path_encode(tape, fx.store, p).values();
        for (std::size_t i = 0; i < want.size(); ++i) want[i] += e[i];
    }
    for (auto& x : want) x /= static_cast<D>(ps.paths.size());
    const auto got = out.rep.values();
    for (std::size_t i = 0; i < want.size(); ++i)
        REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
}

TEST_CASE("path task representation falls back to zero when nothing connects", "[encoders]") {
    Vocabulary vocab;
    std::vector<Triple> ts{{vocab.entity_id("a"), vocab.relation_id("r"), vocab.entity_id("b")}};
    vocab.entity_id("x");
    vocab.entity_id("y");
    KnowledgeGraph g(ts, vocab, {.inverse_edges = false});
    ParamStore<D> store(5);
    Rng rng(5);
    add_policy_params(store, g.vocab(), {.d = 4, .hidden = 8}, rng);
    add_path_encoder_params(store, 4, rng);

    const std::vector<Triple> disconnected{{g.vocab().find_entity("x"), 0, g.vocab().find_entity("y")}};
    Tape<D> tape;
    auto out = path_task_rep(tape, store, g, std::span<const Triple>(disconnected), 3, 100);
    REQUIRE(out.fallback);
    REQUIRE(out.path_count == 0);
    for (D x : out.rep.values()) REQUIRE(x == 0.0);

    // One connected pair is enough to avoid the fallback.
    const std::vector<Triple> mixed{{g.vocab().find_entity("x"), 0, g.vocab().find_entity("y")},
                                    {g.vocab().find_entity("a"), 0, g.vocab().find_entity("b")}};
    auto out2 = path_task_rep(tape, store, g, std::span<const Triple>(mixed), 3, 100);
    REQUIRE_FALSE(out2.fallback);
    REQUIRE(out2.path_count > 0);
}

TEST_CASE("path task representation matches finite differences", "[encoders][fd]") {
    Fixture fx(57, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"a", "r3", "c"}}, 4);
    const std::vector<Triple> support{{0, 0, 2}};
    fd_check([&](Tape<D>& t, ParamStore<D>& s) {
        auto out = path_task_rep(t, s, fx.graph, std::span<const Triple>(support), 3, 100);
        return t.sum(t.mul(out.rep, out.rep));
    }, fx.store);
}

TEST_CASE("path cache returns the same paths as direct enumeration", "[encoders]") {
    Fixture fx(67, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"a", "r3", "c"}, {"c", "r1", "a"}}, 4);
    PathCache cache;
    const auto& direct = fx.graph.enumerate_paths(0, 2, 3, 50);
    const auto& cached1 = cache.get(fx.graph, 0, 2, 3, 50);
    const auto& cached2 = cache.get(fx.graph, 0, 2, 3, 50);
    REQUIRE(cached1.paths == direct.paths);
    REQUIRE(&cached1 == &cached2); // second call must hit the memo

    const std::vector<Triple> support{{0, 0, 2}};
    Tape<D> tape;
    const auto with_cache =
        path_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(support), 3, 50, &cache).rep.values();
    const auto without =
        path_task_rep(tape, fx.store, fx.graph, std::span<const Triple>(support), 3, 50).rep.values();
    REQUIRE(with_cache == without);
}

TEST_CASE("task representation dispatch covers all four kinds", "[encoders]") {
    Fixture fx(77, {{"a", "r1", "b"}, {"b", "r2", "c"}}, 4);
    const std::vector<Triple> support{{0, 0, 1}};
    Tape<D> tape;

    auto ident = make_task_rep(tape, fx.store, fx.graph, RepKind::Identity, 1, std::span<const Triple>(support));
    REQUIRE(ident.rep.values() == row_of(fx.store.value("relation_emb"), 1));
    REQUIRE(ident.kind == RepKind::Identity);
    REQUIRE(ident.support_size == 1);

    auto zero = make_task_rep(tape, fx.store, fx.graph, RepKind::Zero, 1, std::span<const Triple>(support));
    for (D x : zero.rep.values()) REQUIRE(x == 0.0);

    auto nbr = make_task_rep(tape, fx.store, fx.graph, RepKind::Neighbor, 1, std::span<const Triple>(support));
    Tape<D> tape2;
    const auto direct = neighbor_task_rep(tape2, fx.store, fx.graph, std::span<const Triple>(support)).values();
    REQUIRE(nbr.rep.values() == direct);

    auto path = make_task_rep(tape, fx.store, fx.graph, RepKind::Path, 1, std::span<const Triple>(support));
    REQUIRE(path.kind == RepKind::Path);
    REQUIRE(path.path_count > 0);
}

TEST_CASE("rep_norm rescales encoder representations but not identity or zero", "[encoders]") {
    Fixture fx(78, {{"a", "r1", "b"}, {"b", "r2", "c"}, {"a", "r2", "c"}}, 4);
    const std::vector<Triple> support{{0, 0, 1}, {1, 1, 2}};
    const RepOptions opt{.rep_norm = 3.0};
    Tape<D> tape;

    auto norm_of = [](std::span<const D> v) {
        D s = 0;
        for (D x : v) s += x * x;
        return std::sqrt(s);
    };

    for (RepKind kind : {RepKind::Neighbor, RepKind::Path}) {
        auto raw = make_task_rep(tape, fx.store, fx.graph, kind, 1, std::span<const Triple>(support));
        auto scaled = make_task_rep(tape, fx.store, fx.graph, kind, 1, std::span<const Triple>(support), opt);
        const auto rv = raw.rep.values();
        const auto sv = scaled.rep.values();
        const D rn = norm_of(rv);
        REQUIRE(rn > 0.0);
        // norm moves to target * ||raw|| / sqrt(||raw||^2 + eps), direction unchanged
        const D want = 3.0 * rn / std::sqrt(rn * rn + opt.rep_norm_eps);
        REQUIRE_THAT(norm_of(sv), Catch::Matchers::WithinRel(want, 1e-9));
        for (std::size_t i = 0; i < rv.size(); ++i)
            REQUIRE_THAT(sv[i] * rn, Catch::Matchers::WithinAbs(rv[i] * norm_of(sv), 1e-9));
    }

    auto ident = make_task_rep(tape, fx.store, fx.graph, RepKind::Identity, 1, std::span<const Triple>(support), opt);
    REQUIRE(ident.rep.values() == row_of(fx.store.value("relation_emb"), 1));
    auto zero = make_task_rep(tape, fx.store, fx.graph, RepKind::Zero, 1, std::span<const Triple>(support), opt);
    for (D x : zero.rep.values()) REQUIRE(x == 0.0);
}
