#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/checkpoint.hpp"
#include "metakgr/lstm.hpp"
#include "metakgr/rng.hpp"

using namespace metakgr;

namespace {

using D = double;
using LossFn = std::function<Tensor<D>(Tape<D>&, ParamStore<D>&)>;

double loss_value(const LossFn& f, ParamStore<D>& store) {
    Tape<D> tape;
    return f(tape, store).value();
}

/// Central finite differences against reverse-mode gradients, coordinate by
/// coordinate over every parameter in the store.
void fd_check(const LossFn& f, ParamStore<D>& store, double eps = 1e-3, double tol = 1e-4) {
    store.zero_grads();
    Tape<D> tape;
    Tensor<D> loss = f(tape, store);
    tape.backward(loss);
    for (auto& e : store.entries()) {
        for (std::size_t i = 0; i < e.value.v.size(); ++i) {
            const double saved = e.value.v[i];
            e.value.v[i] = saved + eps;
            const double fp = loss_value(f, store);
            e.value.v[i] = saved - eps;
            const double fm = loss_value(f, store);
            e.value.v[i] = saved;
            const double fd = (fp - fm) / (2 * eps);
            const double an = e.grad.v[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            INFO(e.name << "[" << i << "] fd=" << fd << " analytic=" << an);
            REQUIRE(rel < tol);
        }
    }
}

std::vector<std::uint8_t> all_true(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

struct TempPath {
    std::string path;
    explicit TempPath(const std::string& name) : path("mkgr_test_" + name) {}
    ~TempPath() { std::remove(path.c_str()); }
};

} // namespace

TEST_CASE("affine and matvec match finite differences", "[autodiff]") {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        store.add_matrix("W", 4, 3, rng);
        store.add_bias("b", 4);
        store.add("x", {3});
        for (auto& v : store.value("x").v) v = rng.uniform(-1.0, 1.0);
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            auto y = t.affine(t.param(s, "W"), t.param(s, "b"), t.param(s, "x"));
            return t.sum(t.mul(y, y));
        }, store);
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            return t.sum(t.matvec(t.param(s, "W"), t.param(s, "x")));
        }, store);
    }
}

TEST_CASE("activations match finite differences", "[autodiff]") {
    for (std::uint64_t seed : {7u, 8u, 9u, 10u, 11u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        store.add("x", {6});
        for (auto& v : store.value("x").v) {
            v = rng.uniform(-2.0, 2.0);
            if (std::abs(v) < 0.05) v = 0.1; // keep relu kink away from the FD probe
        }
        fd_check([](Tape<D>& t, ParamStore<D>& s) { return t.sum(t.relu(t.param(s, "x"))); }, store);
        fd_check([](Tape<D>& t, ParamStore<D>& s) { return t.sum(t.tanh_act(t.param(s, "x"))); }, store);
        fd_check([](Tape<D>& t, ParamStore<D>& s) { return t.sum(t.sigmoid(t.param(s, "x"))); }, store);
    }
}

TEST_CASE("elementwise, reduction and indexing ops match finite differences", "[autodiff]") {
    for (std::uint64_t seed : {21u, 22u, 23u, 24u, 25u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        store.add("a", {5});
        store.add("b", {5});
        for (auto& v : store.value("a").v) v = rng.uniform(-1.0, 1.0);
        for (auto& v : store.value("b").v) v = rng.uniform(-1.0, 1.0);
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            auto a = t.param(s, "a"), b = t.param(s, "b");
            auto mixed = t.add(t.mul(a, b), t.sub(a, t.scale(b, 0.5)));
            const Tensor<D> parts[2] = {mixed, t.mul(a, a)};
            auto agg = t.add_n(std::span<const Tensor<D>>(parts, 2));
            auto cat = t.concat(a, agg);
            const Tensor<D> scalars[3] = {t.dot(a, b), t.sum(cat), t.pick(agg, 2)};
            return t.sum(t.stack(std::span<const Tensor<D>>(scalars, 3)));
        }, store);
    }
}

TEST_CASE("l2_rescale matches finite differences", "[autodiff]") {
    for (std::uint64_t seed : {31u, 32u, 33u, 34u, 35u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        store.add("x", {5});
        for (auto& v : store.value("x").v) v = rng.uniform(-1.0, 1.0);
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            auto y = t.l2_rescale(t.param(s, "x"), 2.5, 1e-2);
            return t.sum(t.mul(y, y));
        }, store);
        // small-norm regime, where the eps floor shapes the derivative
        for (auto& v : store.value("x").v) v *= 0.05;
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            return t.sum(t.l2_rescale(t.param(s, "x"), 2.5, 1e-2));
        }, store);
    }
}

TEST_CASE("l2_rescale forward keeps direction and caps tiny vectors", "[autodiff]") {
    Tape<D> tape;
    const auto x = tape.constant({2}, {3.0, 4.0}); // norm 5
    const auto y = tape.l2_rescale(x, 2.0, 1e-2);
    const auto yv = y.values();
    const double n = std::hypot(yv[0], yv[1]);
    REQUIRE_THAT(n, Catch::Matchers::WithinRel(2.0 * 5.0 / std::sqrt(25.0 + 1e-2), 1e-12));
    REQUIRE_THAT(yv[0] * 4.0, Catch::Matchers::WithinAbs(yv[1] * 3.0, 1e-12));

    // a zero vector maps to zero instead of dividing by zero
    const auto z = tape.l2_rescale(tape.zeros({3}), 2.0, 1e-2);
    for (double v : z.values()) REQUIRE(v == 0.0);

    // vectors far below the eps floor stay far below the target
    const auto tiny = tape.l2_rescale(tape.constant({1}, {1e-4}), 2.0, 1e-2);
    REQUIRE(std::abs(tiny.values()[0]) < 1e-2);

    REQUIRE_THROWS_AS(tape.l2_rescale(x, 2.0, 0.0), ContractError);
}

TEST_CASE("masked softmax family matches finite differences", "[autodiff]") {
    for (std::uint64_t seed : {31u, 32u, 33u, 34u, 35u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        store.add("l", {6});
        store.add("w", {6});
        for (auto& v : store.value("l").v) v = rng.uniform(-3.0, 3.0);
        for (auto& v : store.value("w").v) v = rng.uniform(-1.0, 1.0);
        const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};
        fd_check([&](Tape<D>& t, ParamStore<D>& s) {
            return t.dot(t.softmax_masked(t.param(s, "l"), mask), t.param(s, "w"));
        }, store);
        fd_check([&](Tape<D>& t, ParamStore<D>& s) {
            return t.pick(t.log_softmax_masked(t.param(s, "l"), mask), 3);
        }, store);
        fd_check([&](Tape<D>& t, ParamStore<D>& s) {
            return t.entropy_masked(t.param(s, "l"), mask);
        }, store);
    }
}

TEST_CASE("lstm step matches finite differences", "[autodiff][lstm]") {
    for (std::uint64_t seed : {41u, 42u, 43u}) {
        Rng rng(seed);
        ParamStore<D> store(seed);
        add_lstm_params(store, "cell", 3, 4, rng);
        store.add("x0", {3});
        store.add("x1", {3});
        for (auto& v : store.value("x0").v) v = rng.uniform(-1.0, 1.0);
        for (auto& v : store.value("x1").v) v = rng.uniform(-1.0, 1.0);
        fd_check([](Tape<D>& t, ParamStore<D>& s) {
            auto st = lstm_zero_state(t, 4);
            st = lstm_step(t, s, "cell", t.param(s, "x0"), st);
            st = lstm_step(t, s, "cell", t.param(s, "x1"), st);
            return t.sum(t.mul(st.h, st.h));
        }, store);
    }
}

TEST_CASE("lookup gradient lands on the looked-up row only", "[autodiff]") {
    Rng rng(5);
    ParamStore<D> store(5);
    store.add_embedding("emb", 4, 3, rng);
    Tape<D> tape;
    auto row = tape.lookup(store, "emb", 2);
    tape.backward(tape.sum(row));
    const auto& g = store.grad("emb").v;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
            REQUIRE(g[static_cast<std::size_t>(r * 3 + c)] == (r == 2 ? 1.0 : 0.0));

    REQUIRE_THROWS_AS(tape.lookup(store, "emb", 4), LookupError);
    REQUIRE_THROWS_AS(tape.lookup(store, "emb", -1), LookupError);
}

TEST_CASE("repeated lookup of one row accumulates", "[autodiff]") {
    Rng rng(6);
    ParamStore<D> store(6);
    store.add_embedding("emb", 3, 2, rng);
    fd_check([](Tape<D>& t, ParamStore<D>& s) {
        auto a = t.lookup(s, "emb", 1);
        auto b = t.lookup(s, "emb", 1);
        return t.dot(a, b);
    }, store);
}

TEST_CASE("relu subgradient at zero is zero", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("x", {3});
    store.value("x").v = {-1.0, 0.0, 2.0};
    Tape<D> tape;
    tape.backward(tape.sum(tape.relu(tape.param(store, "x"))));
    REQUIRE(store.grad("x").v == std::vector<D>{0.0, 0.0, 1.0});
}

TEST_CASE("masked entries get probability exactly zero", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("l", {4});
    store.value("l").v = {5.0, 1000.0, -2.0, 0.0};
    const std::vector<std::uint8_t> mask = {1, 0, 1, 1};
    Tape<D> tape;
    auto p = tape.softmax_masked(tape.param(store, "l"), mask);
    REQUIRE(p.values()[1] == 0.0);
    double total = 0.0;
    for (double v : p.values()) total += v;
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("all-masked action set is rejected", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("l", {3});
    const std::vector<std::uint8_t> mask = {0, 0, 0};
    Tape<D> tape;
    REQUIRE_THROWS_AS(tape.softmax_masked(tape.param(store, "l"), mask), InvalidActionSetError);
    REQUIRE_THROWS_AS(tape.log_softmax_masked(tape.param(store, "l"), mask), InvalidActionSetError);
    REQUIRE_THROWS_AS(tape.entropy_masked(tape.param(store, "l"), mask), InvalidActionSetError);
}

TEST_CASE("softmax stays finite under extreme logits", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("l", {3});
    store.value("l").v = {1e4, -1e4, 0.0};
    Tape<D> tape;
    auto p = tape.softmax_masked(tape.param(store, "l"), all_true(3));
    REQUIRE_THAT(p.values()[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    auto lp = tape.log_softmax_masked(tape.param(store, "l"), all_true(3));
    REQUIRE(std::isfinite(lp.values()[2]));
    REQUIRE_THAT(lp.values()[2], Catch::Matchers::WithinAbs(-1e4, 1e-9));
}

TEST_CASE("backward contract violations throw", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("x", {2});
    store.value("x").v = {1.0, 2.0};

    SECTION("non-scalar loss") {
        Tape<D> tape;
        auto x = tape.param(store, "x");
        REQUIRE_THROWS_AS(tape.backward(x), ContractError);
    }
    SECTION("second backward on one tape") {
        Tape<D> tape;
        auto loss = tape.sum(tape.param(store, "x"));
        tape.backward(loss);
        REQUIRE_THROWS_AS(tape.backward(loss), ContractError);
    }
    SECTION("cross-tape tensors") {
        Tape<D> a, b;
        auto xa = a.param(store, "x");
        auto xb = b.param(store, "x");
        REQUIRE_THROWS_AS(a.add(xa, xb), ContractError);
    }
}

TEST_CASE("unreached parameters keep untouched gradient slots", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("used", {2});
    store.add("unused", {2});
    store.value("used").v = {1.0, 2.0};
    store.grad("unused").v = {7.0, 7.0}; // sentinel: backward must not write here
    Tape<D> tape;
    tape.backward(tape.sum(tape.param(store, "used")));
    REQUIRE(store.grad("used").v == std::vector<D>{1.0, 1.0});
    REQUIRE(store.grad("unused").v == std::vector<D>{7.0, 7.0});
}

TEST_CASE("parameter node reuse accumulates into one slot", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("p", {3});
    store.value("p").v = {1.0, -2.0, 3.0};
    Tape<D> tape;
    auto a = tape.param(store, "p");
    auto b = tape.param(store, "p");
    REQUIRE(a.node == b.node);
    tape.backward(tape.dot(a, b)); // d(p.p)/dp = 2p
    REQUIRE(store.grad("p").v == std::vector<D>{2.0, -4.0, 6.0});
}

TEST_CASE("gradient accumulation is additive across backward passes", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("p", {2});
    store.value("p").v = {3.0, 4.0};
    for (int pass = 0; pass < 2; ++pass) {
        Tape<D> tape;
        tape.backward(tape.sum(tape.param(store, "p")));
    }
    REQUIRE(store.grad("p").v == std::vector<D>{2.0, 2.0});
}

TEST_CASE("sgd_step applies the update and clears gradients", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("p", {2});
    store.value("p").v = {1.0, 2.0};
    store.grad("p").v = {0.5, -1.0};
    sgd_step(store, 0.1);
    REQUIRE_THAT(store.value("p").v[0], Catch::Matchers::WithinAbs(0.95, 1e-12));
    REQUIRE_THAT(store.value("p").v[1], Catch::Matchers::WithinAbs(2.1, 1e-12));
    REQUIRE(store.grad("p").v == std::vector<D>{0.0, 0.0});
    REQUIRE(store.update_count() == 1);
}

TEST_CASE("sgd_step rejects non-finite gradients before mutating", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("p", {2});
    store.add("q", {1});
    store.value("p").v = {1.0, 2.0};
    store.grad("p").v = {0.5, std::numeric_limits<D>::quiet_NaN()};
    store.grad("q").v = {1.0};
    REQUIRE_THROWS_AS(sgd_step(store, 0.1), NumericError);
    REQUIRE(store.value("p").v == std::vector<D>{1.0, 2.0});
    REQUIRE(store.value("q").v == std::vector<D>{0.0});
    REQUIRE(store.update_count() == 0);
}

TEST_CASE("forward pass rejects non-finite results", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("x", {1});
    store.value("x").v = {1e308};
    Tape<D> tape;
    auto x = tape.param(store, "x");
    REQUIRE_THROWS_AS(tape.mul(x, x), NumericError);
}

TEST_CASE("initializers are seeded and in range", "[autodiff]") {
    Rng rng1(123), rng2(123);
    ParamStore<float> a(123), b(123);
    a.add_matrix("W", 8, 32, rng1);
    a.add_bias("b", 8);
    a.add_embedding("E", 50, 16, rng1);
    b.add_matrix("W", 8, 32, rng2);
    b.add_bias("b", 8);
    b.add_embedding("E", 50, 16, rng2);
    REQUIRE(a == b);

    const float bound = 1.0f / std::sqrt(32.0f);
    for (float v : a.value("W").v) {
        REQUIRE(v >= -bound);
        REQUIRE(v <= bound);
    }
    for (float v : a.value("b").v) REQUIRE(v == 0.0f);
    double sq = 0.0;
    for (float v : a.value("E").v) sq += double(v) * double(v);
    const double stddev = std::sqrt(sq / double(a.value("E").v.size()));
    REQUIRE(stddev > 0.005);
    REQUIRE(stddev < 0.02);
}

TEST_CASE("duplicate parameter names are rejected", "[autodiff]") {
    ParamStore<D> store(0);
    store.add("p", {2});
    REQUIRE_THROWS_AS(store.add("p", {3}), ContractError);
    REQUIRE_THROWS_AS(store.value("missing"), LookupError);
}

TEST_CASE("same seed gives bitwise identical gradients", "[autodiff]") {
    auto run = [] {
        Rng rng(99);
        ParamStore<float> store(99);
        store.add_matrix("W", 5, 4, rng);
        store.add_bias("b", 5);
        store.add_embedding("x", 1, 4, rng);
        Tape<float> tape;
        auto y = tape.affine(tape.param(store, "W"), tape.param(store, "b"), tape.lookup(store, "x", 0));
        tape.backward(tape.sum(tape.mul(y, tape.tanh_act(y))));
        std::vector<float> grads;
        for (const auto& e : store.entries()) grads.insert(grads.end(), e.grad.v.begin(), e.grad.v.end());
        return grads;
    };
    REQUIRE(run() == run());
}

TEST_CASE("checkpoint roundtrip is bit-exact for float stores", "[checkpoint]") {
    Rng rng(77);
    ParamStore<float> store(7701);
    store.add_matrix("layer.W", 6, 5, rng);
    store.add_bias("layer.b", 6);
    store.add_embedding("emb", 10, 4, rng);
    TempPath tmp("ckpt_roundtrip.bin");
    save_checkpoint(store, tmp.path);
    ParamStore<float> loaded = load_checkpoint<float>(tmp.path);
    REQUIRE(loaded.seed() == 7701);
    REQUIRE(loaded == store);
    REQUIRE(loaded.entry(0).name == "layer.W");
    REQUIRE(loaded.entry(1).name == "layer.b");
    REQUIRE(loaded.entry(2).name == "emb");
}

TEST_CASE("checkpoint rejects corruption", "[checkpoint]") {
    Rng rng(78);
    ParamStore<float> store(78);
    store.add_matrix("W", 3, 3, rng);
    TempPath tmp("ckpt_corrupt.bin");
    save_checkpoint(store, tmp.path);

    auto read_all = [&] {
        std::ifstream is(tmp.path, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    auto write_all = [&](const std::string& bytes) {
        std::ofstream os(tmp.path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    const std::string good = read_all();

    SECTION("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        write_all(bad);
        REQUIRE_THROWS_AS(load_checkpoint<float>(tmp.path), FormatError);
    }
    SECTION("unsupported version") {
        std::string bad = good;
        bad[4] = static_cast<char>(kCheckpointVersion + 1);
        write_all(bad);
        REQUIRE_THROWS_AS(load_checkpoint<float>(tmp.path), FormatError);
    }
    SECTION("truncated payload") {
        write_all(good.substr(0, good.size() - 5));
        REQUIRE_THROWS_AS(load_checkpoint<float>(tmp.path), FormatError);
    }
    SECTION("trailing bytes") {
        write_all(good + "zz");
        REQUIRE_THROWS_AS(load_checkpoint<float>(tmp.path), FormatError);
    }
}
