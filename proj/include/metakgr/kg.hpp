#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metakgr/error.hpp"

namespace metakgr {

constexpr std::string_view kStopLabel = "__STOP__";
constexpr std::string_view kInverseLabelPrefix = "__inv__";

/// Dense string<->id tables for entities and relations. Relation ids are laid
/// out as: base relations (file order), then STOP, then one inverse id per
/// base relation when inverses are enabled.
class Vocabulary {
public:
    int entity_id(std::string_view label) {
        auto it = entity_ids_.find(std::string(label));
        if (it != entity_ids_.end()) return it->second;
        entity_labels_.emplace_back(label);
        int id = static_cast<int>(entity_labels_.size()) - 1;
        entity_ids_.emplace(entity_labels_.back(), id);
        return id;
    }

    int relation_id(std::string_view label) {
        if (finalized_)
            throw ContractError("vocabulary is finalized; cannot add relation '" + std::string(label) + "'");
        auto it = relation_ids_.find(std::string(label));
        if (it != relation_ids_.end()) return it->second;
        relation_labels_.emplace_back(label);
        int id = static_cast<int>(relation_labels_.size()) - 1;
        relation_ids_.emplace(relation_labels_.back(), id);
        return id;
    }

    int find_entity(std::string_view label) const {
        auto it = entity_ids_.find(std::string(label));
        return it == entity_ids_.end() ? -1 : it->second;
    }
    int find_relation(std::string_view label) const {
        auto it = relation_ids_.find(std::string(label));
        return it == relation_ids_.end() ? -1 : it->second;
    }

    /// Appends the reserved STOP id and, when requested, one inverse id per
    /// base relation. Idempotent layout: callable once.
    void finalize(bool with_inverses) {
        if (finalized_) throw ContractError("vocabulary finalized twice");
        base_relation_count_ = static_cast<int>(relation_labels_.size());
        for (const auto& label : relation_labels_)
            if (label.starts_with(kInverseLabelPrefix) || label == kStopLabel)
                throw ParseError("relation label '" + label + "' collides with a reserved name");
        auto push = [&](std::string label) {
            int id = static_cast<int>(relation_labels_.size());
            relation_labels_.push_back(std::move(label));
            relation_ids_.emplace(relation_labels_.back(), id);
            return id;
        };
        stop_relation_ = push(std::string(kStopLabel));
        if (with_inverses) {
            has_inverses_ = true;
            for (int r = 0; r < base_relation_count_; ++r)
                push(std::string(kInverseLabelPrefix) + relation_labels_[r]);
        }
        finalized_ = true;
    }

    bool finalized() const { return finalized_; }
    int entity_count() const { return static_cast<int>(entity_labels_.size()); }
    /// Total relation ids including reserved ones (after finalize).
    int relation_count() const { return static_cast<int>(relation_labels_.size()); }
    int base_relation_count() const { return finalized_ ? base_relation_count_ : relation_count(); }
    int stop_relation() const {
        if (!finalized_) throw ContractError("vocabulary not finalized");
        return stop_relation_;
    }
    bool has_inverses() const { return has_inverses_; }

    int inverse_of(int r) const {
        if (!has_inverses_) throw ContractError("inverse relations not enabled");
        if (r < 0 || r >= relation_count() || r == stop_relation_)
            throw LookupError("no inverse for relation id " + std::to_string(r));
        return r < base_relation_count_ ? stop_relation_ + 1 + r : r - stop_relation_ - 1;
    }
    bool is_inverse(int r) const { return has_inverses_ && r > stop_relation_; }

    const std::string& entity_label(int id) const {
        check_entity(id);
        return entity_labels_[static_cast<std::size_t>(id)];
    }
    const std::string& relation_label(int id) const {
        if (id < 0 || id >= relation_count())
            throw LookupError("relation id " + std::to_string(id) + " out of range");
        return relation_labels_[static_cast<std::size_t>(id)];
    }

    void check_entity(int id) const {
        if (id < 0 || id >= entity_count())
            throw LookupError("entity id " + std::to_string(id) + " out of range");
    }

private:
    std::vector<std::string> entity_labels_;
    std::vector<std::string> relation_labels_;
    std::unordered_map<std::string, int> entity_ids_;
    std::unordered_map<std::string, int> relation_ids_;
    bool finalized_ = false;
    bool has_inverses_ = false;
    int base_relation_count_ = 0;
    int stop_relation_ = -1;
};

struct Triple {
    int subject;
    int relation;
    int object;

    friend bool operator==(const Triple&, const Triple&) = default;
    friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct Edge {
    int relation;
    int target;

    friend bool operator==(const Edge&, const Edge&) = default;
    friend auto operator<=>(const Edge&, const Edge&) = default;
};

using NeighborSet = std::vector<Edge>;
using RelationPath = std::vector<int>;

struct PathSet {
    std::vector<RelationPath> paths; // discovery order, no duplicates
    bool truncated = false;          // hit the max_paths cap
};

/// Parses a tab-separated triple file into ids, growing `vocab` to cover every
/// label seen. `#`-prefixed lines and blank lines are skipped. Triples are
/// returned in file order, duplicates included.
inline std::vector<Triple> load_triples(const std::string& path, Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open triple file: " + path);
    std::vector<Triple> triples;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
            throw ParseError("expected 3 tab-separated fields in '" + path + "'", lineno);
        const std::string_view s(line.data(), t1);
        const std::string_view r(line.data() + t1 + 1, t2 - t1 - 1);
        const std::string_view o(line.data() + t2 + 1, line.size() - t2 - 1);
        if (s.empty() || r.empty() || o.empty())
            throw ParseError("empty field in '" + path + "'", lineno);
        triples.push_back({vocab.entity_id(s), vocab.relation_id(r), vocab.entity_id(o)});
    }
    return triples;
}

inline void save_triples(const std::string& path, std::span<const Triple> triples, const Vocabulary& vocab) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write triple file: " + path);
    for (const Triple& t : triples)
        out << vocab.entity_label(t.subject) << '\t' << vocab.relation_label(t.relation) << '\t'
            << vocab.entity_label(t.object) << '\n';
}

struct GraphOptions {
    bool inverse_edges = true;
    bool stop_edges = true;
};

/// The background graph G: immutable adjacency over a finalized vocabulary,
/// with one STOP self-loop per entity and optional inverse edges.
class KnowledgeGraph {
public:
    KnowledgeGraph() = default;

    KnowledgeGraph(std::span<const Triple> triples, Vocabulary vocab, GraphOptions opt = {})
        : vocab_(std::move(vocab)), opt_(opt) {
        if (!vocab_.finalized()) vocab_.finalize(opt.inverse_edges);
        if (opt.inverse_edges && !vocab_.has_inverses())
            throw ContractError("vocabulary was finalized without inverse relations");
        const int n = vocab_.entity_count();
        adjacency_.assign(static_cast<std::size_t>(n), {});
        for (const Triple& t : triples) {
            vocab_.check_entity(t.subject);
            vocab_.check_entity(t.object);
            if (t.relation < 0 || t.relation >= vocab_.base_relation_count())
                throw LookupError("triple uses non-base relation id " + std::to_string(t.relation));
            adjacency_[static_cast<std::size_t>(t.subject)].push_back({t.relation, t.object});
            if (opt.inverse_edges)
                adjacency_[static_cast<std::size_t>(t.object)].push_back({vocab_.inverse_of(t.relation), t.subject});
        }
        if (opt.stop_edges) {
            const int stop = vocab_.stop_relation();
            for (int e = 0; e < n; ++e)
                adjacency_[static_cast<std::size_t>(e)].push_back({stop, e});
        }
        for (auto& edges : adjacency_) {
            std::sort(edges.begin(), edges.end());
            const auto last = std::unique(edges.begin(), edges.end());
            dedup_count_ += static_cast<std::size_t>(edges.end() - last);
            edges.erase(last, edges.end());
            edge_count_ += edges.size();
        }
        if (opt.inverse_edges) dedup_count_ /= 2; // each duplicate triple also duplicated its inverse
    }

    const Vocabulary& vocab() const { return vocab_; }
    int entity_count() const { return vocab_.entity_count(); }
    int relation_count() const { return vocab_.relation_count(); }
    int stop_relation() const { return vocab_.stop_relation(); }
    bool inverse_enabled() const { return opt_.inverse_edges; }
    bool stop_enabled() const { return opt_.stop_edges; }
    std::size_t dedup_count() const { return dedup_count_; }
    std::size_t edge_count() const { return edge_count_; }

    /// All outgoing edges of e (STOP included), sorted by (relation, target).
    std::span<const Edge> outgoing(int e) const {
        vocab_.check_entity(e);
        return adjacency_[static_cast<std::size_t>(e)];
    }

    /// N_e: outgoing edges excluding the STOP self-loop.
    NeighborSet neighbors(int e) const {
        auto all = outgoing(e);
        NeighborSet out;
        out.reserve(all.size());
        const int stop = vocab_.stop_relation();
        for (const Edge& edge : all)
            if (edge.relation != stop) out.push_back(edge);
        return out;
    }

    bool has_edge(int s, int r, int o) const {
        auto all = outgoing(s);
        return std::binary_search(all.begin(), all.end(), Edge{r, o});
    }

    /// All relation sequences of length exactly n that walk from e_s to e_t.
    /// A STOP edge commits the walk to trailing STOPs, so logically shorter
    /// paths appear STOP-padded. Enumeration follows adjacency order and cuts
    /// off deterministically after max_paths distinct sequences.
    PathSet enumerate_paths(int e_s, int e_t, int n, std::size_t max_paths) const {
        if (n < 1) throw ContractError("enumerate_paths: n must be >= 1");
        vocab_.check_entity(e_s);
        vocab_.check_entity(e_t);
        PathSet result;
        std::unordered_set<std::string> seen;
        RelationPath prefix;
        prefix.reserve(static_cast<std::size_t>(n));
        dfs_paths(e_s, e_t, n, max_paths, prefix, seen, result);
        return result;
    }

private:
    void dfs_paths(int cur, int target, int n, std::size_t max_paths, RelationPath& prefix,
                   std::unordered_set<std::string>& seen, PathSet& result) const {
        if (result.truncated) return;
        if (static_cast<int>(prefix.size()) == n) {
            if (cur == target) emit(prefix, max_paths, seen, result);
            return;
        }
        const int stop = vocab_.stop_relation();
        for (const Edge& edge : adjacency_[static_cast<std::size_t>(cur)]) {
            if (result.truncated) return;
            if (edge.relation == stop) {
                // trailing-STOP completion: remaining steps are forced STOPs
                if (cur == target) {
                    RelationPath full = prefix;
                    full.resize(static_cast<std::size_t>(n), stop);
                    emit(full, max_paths, seen, result);
                }
                continue;
            }
            prefix.push_back(edge.relation);
            dfs_paths(edge.target, target, n, max_paths, prefix, seen, result);
            prefix.pop_back();
        }
    }

    void emit(const RelationPath& path, std::size_t max_paths, std::unordered_set<std::string>& seen,
              PathSet& result) const {
        std::string key;
        key.reserve(path.size() * 4);
        for (int r : path) {
            key += std::to_string(r);
            key += ',';
        }
        if (!seen.insert(std::move(key)).second) return;
        if (result.paths.size() >= max_paths) {
            result.truncated = true;
            return;
        }
        result.paths.push_back(path);
    }

    Vocabulary vocab_;
    std::vector<std::vector<Edge>> adjacency_;
    GraphOptions opt_;
    std::size_t dedup_count_ = 0;
    std::size_t edge_count_ = 0;
};

inline KnowledgeGraph build_graph(std::span<const Triple> triples, Vocabulary vocab, GraphOptions opt = {}) {
    return KnowledgeGraph(triples, std::move(vocab), opt);
}

} // namespace metakgr
