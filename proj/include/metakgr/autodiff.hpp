#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metakgr/array.hpp"
#include "metakgr/error.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

template <class T>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; the buffer lives in
/// the tape node.
template <class T>
struct Tensor {
    Tape<T>* tape = nullptr;
    int node = -1;
    Shape shape;

    std::size_t size() const { return numel(shape); }
    bool is_scalar() const { return size() == 1; }
    const std::vector<T>& values() const;
    T value() const {
        const auto& v = values();
        if (v.size() != 1) throw ShapeError("value() on non-scalar tensor");
        return v[0];
    }
    Array<T> to_array() const { return Array<T>(shape, values()); }
};

/// Named parameter tensors with gradient slots, plus the seed they were
/// initialized from. Iteration order is insertion order and is part of the
/// public contract (checkpoints, meta-updates and tests rely on it).
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Array<T> value;
        Array<T> grad;
    };

    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    int add(std::string name, Shape shape) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        Entry e;
        e.name = std::move(name);
        e.value = Array<T>(shape);
        e.grad = Array<T>(std::move(shape));
        entries_.push_back(std::move(e));
        const int idx = static_cast<int>(entries_.size()) - 1;
        index_.emplace(entries_.back().name, idx);
        return idx;
    }

    /// W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the column count.
    int add_matrix(std::string name, int rows, int cols, Rng& rng) {
        const int idx = add(std::move(name), {rows, cols});
        const T bound = T(1) / std::sqrt(T(cols));
        for (T& x : entries_[idx].value.v) x = static_cast<T>(rng.uniform(-bound, bound));
        return idx;
    }

    int add_bias(std::string name, int n) { return add(std::move(name), {n}); }

    /// Embedding rows ~ N(0, 0.01).
    int add_embedding(std::string name, int rows, int dim, Rng& rng) {
        const int idx = add(std::move(name), {rows, dim});
        for (T& x : entries_[idx].value.v) x = static_cast<T>(0.01 * rng.normal());
        return idx;
    }

    int index_of(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw LookupError("unknown parameter: " + std::string(name));
        return it->second;
    }
    bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    Entry& entry(int idx) { return entries_[static_cast<std::size_t>(idx)]; }
    const Entry& entry(int idx) const { return entries_[static_cast<std::size_t>(idx)]; }
    Array<T>& value(std::string_view name) { return entries_[static_cast<std::size_t>(index_of(name))].value; }
    const Array<T>& value(std::string_view name) const {
        return entries_[static_cast<std::size_t>(index_of(name))].value;
    }
    Array<T>& grad(std::string_view name) { return entries_[static_cast<std::size_t>(index_of(name))].grad; }
    const Array<T>& grad(std::string_view name) const {
        return entries_[static_cast<std::size_t>(index_of(name))].grad;
    }

    std::size_t param_count() const { return entries_.size(); }
    std::span<const Entry> entries() const { return entries_; }
    std::span<Entry> entries() { return entries_; }

    void zero_grads() {
        for (Entry& e : entries_) e.grad.fill(T(0));
    }

    std::uint64_t seed() const { return seed_; }
    std::size_t update_count() const { return update_count_; }
    void count_update() { ++update_count_; }

    bool operator==(const ParamStore& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name != other.entries_[i].name) return false;
            if (entries_[i].value.shape != other.entries_[i].value.shape) return false;
            if (entries_[i].value.v != other.entries_[i].value.v) return false;
        }
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, int, std::less<>> index_;
    std::uint64_t seed_;
    std::size_t update_count_ = 0;
};

/// theta <- theta - lr * grad, then grads are zeroed. Aborts (throws, no
/// mutation) if any gradient is non-finite.
template <class T>
void sgd_step(ParamStore<T>& store, T lr) {
    if (!(lr > T(0))) throw ContractError("sgd_step: lr must be positive");
    for (const auto& e : store.entries())
        if (!all_finite(std::span<const T>(e.grad.v)))
            throw NumericError("non-finite gradient in parameter '" + e.name + "'");
    for (auto& e : store.entries()) {
        for (std::size_t i = 0; i < e.value.v.size(); ++i) e.value.v[i] -= lr * e.grad.v[i];
        e.grad.fill(T(0));
    }
    store.count_update();
}

/// Records forward operations and replays them in reverse for gradients.
/// One backward pass per tape.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tensor<T> constant(Array<T> a) {
        Shape shape = a.shape;
        return make(std::move(shape), std::move(a.v), nullptr);
    }
    Tensor<T> constant(Shape shape, std::vector<T> values) {
        return constant(Array<T>(std::move(shape), std::move(values)));
    }
    Tensor<T> scalar(T x) { return constant({1}, {x}); }
    Tensor<T> zeros(Shape shape) { return constant(Array<T>(std::move(shape))); }

    /// Registers a parameter as a leaf; repeated use returns the same node.
    Tensor<T> param(ParamStore<T>& store, std::string_view name) {
        const int idx = store.index_of(name);
        const auto key = std::make_pair(static_cast<const void*>(&store), idx);
        auto it = param_nodes_.find(key);
        if (it != param_nodes_.end()) {
            const int id = it->second;
            return Tensor<T>{this, id, nodes_[static_cast<std::size_t>(id)].shape};
        }
        auto& e = store.entry(idx);
        ParamStore<T>* sp = &store;
        Tensor<T> t = make(e.value.shape, e.value.v, [sp, idx](Tape& tape) {
            auto& slot = sp->entry(idx).grad.v;
            const auto& g = tape.grad_of(tape.current_node_);
            for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
        });
        param_nodes_.emplace(key, t.node);
        return t;
    }

    /// Row `id` of a [V x d] parameter table; backward touches only that row.
    Tensor<T> lookup(ParamStore<T>& store, std::string_view table, int id) {
        const int idx = store.index_of(table);
        const auto& arr = store.entry(idx).value;
        if (arr.shape.size() != 2) throw ShapeError("lookup table must be rank 2");
        const int V = arr.shape[0], d = arr.shape[1];
        if (id < 0 || id >= V)
            throw LookupError("lookup row " + std::to_string(id) + " out of range for table '" +
                              std::string(table) + "' with " + std::to_string(V) + " rows");
        std::vector<T> row(arr.v.begin() + static_cast<std::ptrdiff_t>(id) * d,
                           arr.v.begin() + static_cast<std::ptrdiff_t>(id + 1) * d);
        ParamStore<T>* sp = &store;
        return make({d}, std::move(row), [sp, idx, id, d](Tape& tape) {
            auto& slot = sp->entry(idx).grad.v;
            const auto& g = tape.grad_of(tape.current_node_);
            for (int i = 0; i < d; ++i) slot[static_cast<std::size_t>(id) * d + static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        });
    }

    /// W x + b with W [m x n], b [m], x [n].
    Tensor<T> affine(const Tensor<T>& W, const Tensor<T>& b, const Tensor<T>& x) {
        own(W); own(b); own(x);
        if (W.shape.size() != 2 || b.shape.size() != 1 || x.shape.size() != 1)
            throw ShapeError("affine expects matrix, vector, vector");
        const int m = W.shape[0], n = W.shape[1];
        if (b.shape[0] != m || x.shape[0] != n)
            throw ShapeError("affine shape mismatch: W" + shape_str(W.shape) + " b" + shape_str(b.shape) +
                             " x" + shape_str(x.shape));
        const auto& wv = values_of(W);
        const auto& xv = values_of(x);
        const auto& bv = values_of(b);
        std::vector<T> y(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
            T acc = bv[static_cast<std::size_t>(i)];
            const T* wrow = wv.data() + static_cast<std::ptrdiff_t>(i) * n;
            for (int j = 0; j < n; ++j) acc += wrow[j] * xv[static_cast<std::size_t>(j)];
            y[static_cast<std::size_t>(i)] = acc;
        }
        const int wn = W.node, bn = b.node, xn = x.node;
        return make({m}, std::move(y), [wn, bn, xn, m, n](Tape& tape) {
            const auto gy = tape.grad_of(tape.current_node_); // copy: buffers may reallocate
            const auto& wv2 = tape.out(wn);
            const auto& xv2 = tape.out(xn);
            auto& gw = tape.grad_buffer(wn);
            auto& gb = tape.grad_buffer(bn);
            auto& gx = tape.grad_buffer(xn);
            for (int i = 0; i < m; ++i) {
                const T gi = gy[static_cast<std::size_t>(i)];
                gb[static_cast<std::size_t>(i)] += gi;
                const T* wrow = wv2.data() + static_cast<std::ptrdiff_t>(i) * n;
                T* gwrow = gw.data() + static_cast<std::ptrdiff_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    gwrow[j] += gi * xv2[static_cast<std::size_t>(j)];
                    gx[static_cast<std::size_t>(j)] += gi * wrow[j];
                }
            }
        });
    }

    /// W x without a bias term.
    Tensor<T> matvec(const Tensor<T>& W, const Tensor<T>& x) {
        own(W); own(x);
        if (W.shape.size() != 2 || x.shape.size() != 1 || W.shape[1] != x.shape[0])
            throw ShapeError("matvec shape mismatch: W" + shape_str(W.shape) + " x" + shape_str(x.shape));
        const int m = W.shape[0], n = W.shape[1];
        const auto& wv = values_of(W);
        const auto& xv = values_of(x);
        std::vector<T> y(static_cast<std::size_t>(m), T(0));
        for (int i = 0; i < m; ++i) {
            T acc = T(0);
            const T* wrow = wv.data() + static_cast<std::ptrdiff_t>(i) * n;
            for (int j = 0; j < n; ++j) acc += wrow[j] * xv[static_cast<std::size_t>(j)];
            y[static_cast<std::size_t>(i)] = acc;
        }
        const int wn = W.node, xn = x.node;
        return make({m}, std::move(y), [wn, xn, m, n](Tape& tape) {
            const auto gy = tape.grad_of(tape.current_node_);
            const auto& wv2 = tape.out(wn);
            const auto& xv2 = tape.out(xn);
            auto& gw = tape.grad_buffer(wn);
            auto& gx = tape.grad_buffer(xn);
            for (int i = 0; i < m; ++i) {
                const T gi = gy[static_cast<std::size_t>(i)];
                const T* wrow = wv2.data() + static_cast<std::ptrdiff_t>(i) * n;
                T* gwrow = gw.data() + static_cast<std::ptrdiff_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    gwrow[j] += gi * xv2[static_cast<std::size_t>(j)];
                    gx[static_cast<std::size_t>(j)] += gi * wrow[j];
                }
            }
        });
    }

    Tensor<T> relu(const Tensor<T>& x) {
        own(x);
        std::vector<T> y = values_of(x);
        for (T& v : y) v = v > T(0) ? v : T(0); // relu'(0) := 0
        const int xn = x.node;
        return make(x.shape, std::move(y), [xn](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& xv = tape.out(xn);
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > T(0)) gx[i] += g[i];
        });
    }

    Tensor<T> tanh_act(const Tensor<T>& x) {
        own(x);
        std::vector<T> y = values_of(x);
        for (T& v : y) v = std::tanh(v);
        const int xn = x.node;
        const int self = next_id();
        return make(x.shape, std::move(y), [xn, self](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& yv = tape.out(self);
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - yv[i] * yv[i]);
        });
    }

    Tensor<T> sigmoid(const Tensor<T>& x) {
        own(x);
        std::vector<T> y = values_of(x);
        for (T& v : y) v = T(1) / (T(1) + std::exp(-v));
        const int xn = x.node;
        const int self = next_id();
        return make(x.shape, std::move(y), [xn, self](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& yv = tape.out(self);
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
        });
    }

    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, Bin::Add); }
    Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, Bin::Sub); }
    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, Bin::Mul); }

    Tensor<T> scale(const Tensor<T>& x, T c) {
        own(x);
        std::vector<T> y = values_of(x);
        for (T& v : y) v *= c;
        const int xn = x.node;
        return make(x.shape, std::move(y), [xn, c](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
        });
    }

    /// y = x * target / sqrt(||x||^2 + eps): rescales x toward L2 norm
    /// `target` while keeping its direction. eps > 0 keeps the map total and
    /// acts as a soft floor — vectors with ||x|| << sqrt(eps) shrink toward
    /// zero instead of being blown up, and the backward gain is bounded by
    /// target / sqrt(eps).
    Tensor<T> l2_rescale(const Tensor<T>& x, T target, T eps) {
        own(x);
        if (x.shape.size() != 1) throw ShapeError("l2_rescale expects a rank-1 tensor");
        if (!(eps > T(0))) throw ContractError("l2_rescale: eps must be positive");
        const auto& v = values_of(x);
        T n2 = T(0);
        for (T e : v) n2 += e * e;
        const T inv = target / std::sqrt(n2 + eps);
        std::vector<T> y(v.size());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = v[i] * inv;
        const int xn = x.node;
        return make(x.shape, std::move(y), [xn, inv, n2, eps](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& xv = tape.out(xn);
            auto& gx = tape.grad_buffer(xn);
            T xg = T(0);
            for (std::size_t i = 0; i < xv.size(); ++i) xg += xv[i] * g[i];
            // d y_i / d x_j = inv * (delta_ij - x_i x_j / (n2 + eps))
            const T c = inv * xg / (n2 + eps);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += inv * g[i] - c * xv[i];
        });
    }

    Tensor<T> add_n(std::span<const Tensor<T>> xs) {
        if (xs.empty()) throw ContractError("add_n: empty input");
        for (const auto& x : xs) {
            own(x);
            if (x.shape != xs[0].shape) throw ShapeError("add_n: mismatched shapes");
        }
        std::vector<T> y(xs[0].size(), T(0));
        std::vector<int> ids;
        ids.reserve(xs.size());
        for (const auto& x : xs) {
            const auto& v = values_of(x);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += v[i];
            ids.push_back(x.node);
        }
        return make(xs[0].shape, std::move(y), [ids](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            for (int id : ids) {
                auto& gx = tape.grad_buffer(id);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
        });
    }

    Tensor<T> concat(std::span<const Tensor<T>> xs) {
        if (xs.empty()) throw ContractError("concat: empty input");
        std::vector<T> y;
        std::vector<int> ids;
        std::vector<std::size_t> sizes;
        for (const auto& x : xs) {
            own(x);
            if (x.shape.size() != 1) throw ShapeError("concat expects rank-1 tensors");
            const auto& v = values_of(x);
            y.insert(y.end(), v.begin(), v.end());
            ids.push_back(x.node);
            sizes.push_back(v.size());
        }
        const int total = static_cast<int>(y.size());
        return make({total}, std::move(y), [ids, sizes](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                auto& gx = tape.grad_buffer(ids[k]);
                for (std::size_t i = 0; i < sizes[k]; ++i) gx[i] += g[off + i];
                off += sizes[k];
            }
        });
    }

    Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
        const Tensor<T> xs[2] = {a, b};
        return concat(std::span<const Tensor<T>>(xs, 2));
    }

    Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
        own(a); own(b);
        if (a.shape.size() != 1 || a.shape != b.shape) throw ShapeError("dot expects equal rank-1 shapes");
        const auto& av = values_of(a);
        const auto& bv = values_of(b);
        T acc = T(0);
        for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
        const int an = a.node, bn = b.node;
        return make({1}, {acc}, [an, bn](Tape& tape) {
            const T g = tape.grad_of(tape.current_node_)[0];
            const auto& av2 = tape.out(an);
            const auto& bv2 = tape.out(bn);
            auto& ga = tape.grad_buffer(an);
            auto& gb = tape.grad_buffer(bn);
            for (std::size_t i = 0; i < av2.size(); ++i) {
                ga[i] += g * bv2[i];
                gb[i] += g * av2[i];
            }
        });
    }

    Tensor<T> sum(const Tensor<T>& x) {
        own(x);
        const auto& v = values_of(x);
        T acc = T(0);
        for (T e : v) acc += e;
        const int xn = x.node;
        return make({1}, {acc}, [xn](Tape& tape) {
            const T g = tape.grad_of(tape.current_node_)[0];
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }

    Tensor<T> stack(std::span<const Tensor<T>> scalars) {
        if (scalars.empty()) throw ContractError("stack: empty input");
        std::vector<T> y;
        std::vector<int> ids;
        for (const auto& s : scalars) {
            own(s);
            if (!s.is_scalar()) throw ShapeError("stack expects scalars");
            y.push_back(values_of(s)[0]);
            ids.push_back(s.node);
        }
        const int k = static_cast<int>(y.size());
        return make({k}, std::move(y), [ids](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            for (std::size_t i = 0; i < ids.size(); ++i) tape.grad_buffer(ids[i])[0] += g[i];
        });
    }

    Tensor<T> pick(const Tensor<T>& x, int i) {
        own(x);
        if (x.shape.size() != 1) throw ShapeError("pick expects a rank-1 tensor");
        if (i < 0 || i >= x.shape[0]) throw LookupError("pick index out of range");
        const int xn = x.node;
        return make({1}, {values_of(x)[static_cast<std::size_t>(i)]}, [xn, i](Tape& tape) {
            tape.grad_buffer(xn)[static_cast<std::size_t>(i)] += tape.grad_of(tape.current_node_)[0];
        });
    }

    /// Stable masked softmax. Masked entries get probability exactly 0;
    /// unmasked entries sum to 1.
    Tensor<T> softmax_masked(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
        std::vector<T> p = masked_probs(logits, mask);
        const int xn = logits.node;
        const std::vector<std::uint8_t> m(mask.begin(), mask.end());
        const int self = next_id();
        return make(logits.shape, std::move(p), [xn, m, self](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& pv = tape.out(self);
            auto& gx = tape.grad_buffer(xn);
            T dotgp = T(0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (m[i]) dotgp += g[i] * pv[i];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (m[i]) gx[i] += pv[i] * (g[i] - dotgp);
        });
    }

    /// Masked log-softmax; masked entries are set to 0 and must not be read.
    Tensor<T> log_softmax_masked(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
        const auto& lv = values_of(logits);
        check_mask(lv.size(), mask);
        const T mx = masked_max(lv, mask);
        T z = T(0);
        for (std::size_t i = 0; i < lv.size(); ++i)
            if (mask[i]) z += std::exp(lv[i] - mx);
        const T logz = std::log(z) + mx;
        std::vector<T> lp(lv.size(), T(0));
        for (std::size_t i = 0; i < lv.size(); ++i)
            if (mask[i]) lp[i] = lv[i] - logz;
        const int xn = logits.node;
        const std::vector<std::uint8_t> m(mask.begin(), mask.end());
        const int self = next_id();
        return make(logits.shape, std::move(lp), [xn, m, self](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            const auto& lpv = tape.out(self);
            auto& gx = tape.grad_buffer(xn);
            T gsum = T(0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (m[i]) gsum += g[i];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (m[i]) gx[i] += g[i] - std::exp(lpv[i]) * gsum;
        });
    }

    /// H = -sum_i p_i log p_i over unmasked entries, straight from logits.
    Tensor<T> entropy_masked(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
        const auto& lv = values_of(logits);
        check_mask(lv.size(), mask);
        const T mx = masked_max(lv, mask);
        T z = T(0);
        for (std::size_t i = 0; i < lv.size(); ++i)
            if (mask[i]) z += std::exp(lv[i] - mx);
        const T logz = std::log(z) + mx;
        T h = T(0);
        std::vector<T> p(lv.size(), T(0));
        for (std::size_t i = 0; i < lv.size(); ++i) {
            if (!mask[i]) continue;
            const T lp = lv[i] - logz;
            p[i] = std::exp(lp);
            h -= p[i] * lp;
        }
        const int xn = logits.node;
        const std::vector<std::uint8_t> m(mask.begin(), mask.end());
        return make({1}, {h}, [xn, m, p, h](Tape& tape) {
            const T g = tape.grad_of(tape.current_node_)[0];
            auto& gx = tape.grad_buffer(xn);
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (!m[i] || p[i] <= T(0)) continue;
                gx[i] += g * (-p[i] * (std::log(p[i]) + h));
            }
        });
    }

    /// dLoss/dParam for every parameter reachable from `loss`, accumulated
    /// into the grad slots of the stores the leaves came from.
    void backward(const Tensor<T>& loss) {
        own(loss);
        if (!loss.is_scalar()) throw ContractError("backward: loss must be scalar");
        if (backward_done_) throw ContractError("backward already ran on this tape");
        backward_done_ = true;
        grads_.resize(nodes_.size());
        grad_buffer(loss.node)[0] = T(1);
        for (int id = loss.node; id >= 0; --id) {
            auto& node = nodes_[static_cast<std::size_t>(id)];
            if (!node.back) continue;
            if (grads_[static_cast<std::size_t>(id)].empty()) continue; // unreached
            current_node_ = id;
            node.back(*this);
        }
        current_node_ = -1;
    }

    const std::vector<T>& out(int node) const { return nodes_[static_cast<std::size_t>(node)].out; }
    std::size_t node_count() const { return nodes_.size(); }

    // -- internals used by backward closures --
    std::vector<T>& grad_buffer(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].out.size(), T(0));
        return g;
    }
    std::vector<T> grad_of(int node) { return grad_buffer(node); }
    int current_node_ = -1;

private:
    enum class Bin { Add, Sub, Mul };

    struct Node {
        Shape shape;
        std::vector<T> out;
        BackwardFn back;
    };

    int next_id() const { return static_cast<int>(nodes_.size()); }

    Tensor<T> make(Shape shape, std::vector<T> out, BackwardFn back) {
        if (out.size() != numel(shape))
            throw ShapeError("node value count does not match shape " + shape_str(shape));
        if (!all_finite(std::span<const T>(out)))
            throw NumericError("non-finite value produced by tape operation");
        nodes_.push_back(Node{std::move(shape), std::move(out), std::move(back)});
        const int id = static_cast<int>(nodes_.size()) - 1;
        return Tensor<T>{this, id, nodes_[static_cast<std::size_t>(id)].shape};
    }

    void own(const Tensor<T>& t) const {
        if (t.tape != this || t.node < 0 || t.node >= static_cast<int>(nodes_.size()))
            throw ContractError("tensor does not belong to this tape");
    }

    const std::vector<T>& values_of(const Tensor<T>& t) const {
        own(t);
        return nodes_[static_cast<std::size_t>(t.node)].out;
    }

    Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Bin op) {
        own(a); own(b);
        if (a.shape != b.shape)
            throw ShapeError("elementwise op shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
        const auto& av = values_of(a);
        const auto& bv = values_of(b);
        std::vector<T> y(av.size());
        for (std::size_t i = 0; i < y.size(); ++i)
            y[i] = op == Bin::Add ? av[i] + bv[i] : op == Bin::Sub ? av[i] - bv[i] : av[i] * bv[i];
        const int an = a.node, bn = b.node;
        return make(a.shape, std::move(y), [an, bn, op](Tape& tape) {
            const auto g = tape.grad_of(tape.current_node_);
            auto& ga = tape.grad_buffer(an);
            auto& gb = tape.grad_buffer(bn);
            if (op == Bin::Mul) {
                const auto& av2 = tape.out(an);
                const auto& bv2 = tape.out(bn);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * bv2[i];
                    gb[i] += g[i] * av2[i];
                }
            } else {
                const T s = op == Bin::Sub ? T(-1) : T(1);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] += s * g[i];
                }
            }
        });
    }

    static void check_mask(std::size_t n, std::span<const std::uint8_t> mask) {
        if (mask.size() != n) throw ShapeError("mask size does not match logits");
        for (std::uint8_t m : mask)
            if (m) return;
        throw InvalidActionSetError("all actions masked");
    }

    std::vector<T> masked_probs(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
        const auto& lv = values_of(logits);
        check_mask(lv.size(), mask);
        const T mx = masked_max(lv, mask);
        std::vector<T> p(lv.size(), T(0));
        T z = T(0);
        for (std::size_t i = 0; i < lv.size(); ++i) {
            if (!mask[i]) continue;
            p[i] = std::exp(lv[i] - mx);
            z += p[i];
        }
        for (std::size_t i = 0; i < lv.size(); ++i)
            if (mask[i]) p[i] /= z;
        return p;
    }

    static T masked_max(const std::vector<T>& v, std::span<const std::uint8_t> mask) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < v.size(); ++i)
            if (mask[i]) mx = std::max(mx, v[i]);
        return mx;
    }

    // Deque keeps node references stable while new nodes are recorded, so a
    // values() reference stays valid for the tape's lifetime.
    std::deque<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::map<std::pair<const void*, int>, int> param_nodes_;
    bool backward_done_ = false;
};

template <class T>
const std::vector<T>& Tensor<T>::values() const {
    if (!tape) throw ContractError("tensor handle is empty");
    return tape->out(node);
}

/// Spec-shaped free function; the store is implicit in the tape's leaves.
template <class T>
void backward(const Tensor<T>& loss, Tape<T>& tape, ParamStore<T>&) {
    tape.backward(loss);
}

/// embedding_lookup as a free function over a raw table tensor is covered by
/// Tape::lookup; this overload exists for table tensors already on the tape.
template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, ParamStore<T>& store, std::string_view table, int id) {
    return tape.lookup(store, table, id);
}

} // namespace metakgr
