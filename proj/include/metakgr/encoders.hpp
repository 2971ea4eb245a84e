#pragma once

#include <map>
#include <span>
#include <tuple>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/lstm.hpp"
#include "metakgr/policy.hpp"

namespace metakgr {

template <class T>
void add_neighbor_encoder_params(ParamStore<T>& store, int d, Rng& rng) {
    store.add_matrix("nbr.w_c", d, 2 * d, rng);
    store.add_bias("nbr.b_c", d);
}

template <class T>
void add_path_encoder_params(ParamStore<T>& store, int d, Rng& rng) {
    add_lstm_params(store, "path.lstm", d, d, rng);
}

/// NE_e = tanh(mean over (r, e') in N_e of (W_c [v_r; v_e'] + b_c)).
/// The affine map commutes with the mean, so the mean is taken over the
/// concatenated features first. An entity with no neighbors contributes the
/// zero feature, giving tanh(b_c).
template <class T>
Tensor<T> neighbor_embed(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g, int e) {
    const NeighborSet nbrs = g.neighbors(e);
    const int d2 = store.value("nbr.w_c").shape[1];
    Tensor<T> feat_mean;
    if (nbrs.empty()) {
        feat_mean = tape.zeros({d2});
    } else {
        std::vector<Tensor<T>> feats;
        feats.reserve(nbrs.size());
        for (const Edge& n : nbrs)
            feats.push_back(tape.concat(tape.lookup(store, "relation_emb", n.relation),
                                        tape.lookup(store, "entity_emb", n.target)));
        feat_mean = tape.scale(tape.add_n(std::span<const Tensor<T>>(feats)), T(1) / static_cast<T>(nbrs.size()));
    }
    return tape.tanh_act(tape.affine(tape.param(store, "nbr.w_c"), tape.param(store, "nbr.b_c"), feat_mean));
}

/// R_r = mean over support (e_s, r, e_t) of (NE_{e_t} - NE_{e_s}).
template <class T>
Tensor<T> neighbor_task_rep(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g,
                            std::span<const Triple> support) {
    if (support.empty()) throw ContractError("neighbor_task_rep: empty support set");
    std::vector<Tensor<T>> diffs;
    diffs.reserve(support.size());
    for (const Triple& t : support)
        diffs.push_back(tape.sub(neighbor_embed(tape, store, g, t.object),
                                 neighbor_embed(tape, store, g, t.subject)));
    return tape.scale(tape.add_n(std::span<const Tensor<T>>(diffs)), T(1) / static_cast<T>(support.size()));
}

/// Final hidden state of an LSTM read over the relation embeddings of `path`.
template <class T>
Tensor<T> path_encode(Tape<T>& tape, ParamStore<T>& store, const RelationPath& path) {
    if (path.empty()) throw ContractError("path_encode: empty path");
    const int d = store.value("relation_emb").shape[1];
    LstmState<T> state = lstm_zero_state(tape, d);
    for (int r : path) state = lstm_step(tape, store, "path.lstm", tape.lookup(store, "relation_emb", r), state);
    return state.h;
}

/// Memo for enumerate_paths keyed by (source, target, length); adaptation
/// re-derives the task representation every step over the same support pairs.
class PathCache {
public:
    const PathSet& get(const KnowledgeGraph& g, int s, int t, int n, std::size_t max_paths) {
        const auto key = std::make_tuple(s, t, n);
        auto it = memo_.find(key);
        if (it == memo_.end()) it = memo_.emplace(key, g.enumerate_paths(s, t, n, max_paths)).first;
        return it->second;
    }

private:
    std::map<std::tuple<int, int, int>, PathSet> memo_;
};

template <class T>
struct PathRepOut {
    Tensor<T> rep;
    std::size_t path_count = 0;
    bool fallback = false; // no support pair had any connecting path
};

/// Flat mean of path embeddings over every path of every support pair; pairs
/// found by the same walk twice contribute twice. With no paths at all the
/// representation falls back to the zero vector.
template <class T>
PathRepOut<T> path_task_rep(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g,
                            std::span<const Triple> support, int path_length, std::size_t max_paths,
                            PathCache* cache = nullptr) {
    if (support.empty()) throw ContractError("path_task_rep: empty support set");
    std::vector<Tensor<T>> embs;
    for (const Triple& t : support) {
        PathSet local;
        const PathSet& ps = cache ? cache->get(g, t.subject, t.object, path_length, max_paths)
                                  : (local = g.enumerate_paths(t.subject, t.object, path_length, max_paths));
        for (const RelationPath& p : ps.paths) embs.push_back(path_encode(tape, store, p));
    }
    PathRepOut<T> out;
    out.path_count = embs.size();
    if (embs.empty()) {
        out.rep = tape.zeros({store.value("relation_emb").shape[1]});
        out.fallback = true;
    } else {
        out.rep = tape.scale(tape.add_n(std::span<const Tensor<T>>(embs)), T(1) / static_cast<T>(embs.size()));
    }
    return out;
}

enum class RepKind { Identity, Zero, Neighbor, Path };

inline const char* rep_kind_name(RepKind k) {
    switch (k) {
    case RepKind::Identity: return "identity";
    case RepKind::Zero: return "zero";
    case RepKind::Neighbor: return "neighbor";
    case RepKind::Path: return "path";
    }
    return "?";
}

template <class T>
struct TaskRepresentation {
    Tensor<T> rep;
    RepKind kind = RepKind::Zero;
    int support_size = 0;
    std::size_t path_count = 0;
    bool fallback = false;
};

struct RepOptions {
    int path_length = 3;
    std::size_t max_paths = 100;
    // When > 0, encoder representations (Neighbor, Path) are rescaled toward
    // this L2 norm before being substituted into the policy input. The tanh-
    // and gate-bounded encoder outputs are otherwise an order of magnitude
    // smaller than the relation-embedding row they stand in for, which makes
    // them invisible next to the policy's other inputs. Identity is left at
    // its native embedding scale and Zero stays exactly zero.
    double rep_norm = 0.0;
    double rep_norm_eps = 1e-2; // soft floor: reps with norm << sqrt(eps) stay near zero
};

/// Query-relation input for the walker. Identity reads the task relation's
/// own embedding row; Zero hides the task; Neighbor and Path derive the
/// representation from the support pairs and the background graph.
template <class T>
TaskRepresentation<T> make_task_rep(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g,
                                    RepKind kind, int task_relation, std::span<const Triple> support,
                                    const RepOptions& opt = {}, PathCache* cache = nullptr) {
    TaskRepresentation<T> out;
    out.kind = kind;
    out.support_size = static_cast<int>(support.size());
    switch (kind) {
    case RepKind::Identity:
        out.rep = tape.lookup(store, "relation_emb", task_relation);
        break;
    case RepKind::Zero:
        out.rep = tape.zeros({store.value("relation_emb").shape[1]});
        break;
    case RepKind::Neighbor:
        out.rep = neighbor_task_rep(tape, store, g, support);
        break;
    case RepKind::Path: {
        PathRepOut<T> p = path_task_rep(tape, store, g, support, opt.path_length, opt.max_paths, cache);
        out.rep = p.rep;
        out.path_count = p.path_count;
        out.fallback = p.fallback;
        break;
    }
    }
    if (opt.rep_norm > 0.0 && (kind == RepKind::Neighbor || kind == RepKind::Path))
        out.rep = tape.l2_rescale(out.rep, static_cast<T>(opt.rep_norm), static_cast<T>(opt.rep_norm_eps));
    return out;
}

} // namespace metakgr
