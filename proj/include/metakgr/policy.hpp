#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/kg.hpp"
#include "metakgr/lstm.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

struct PolicyDims {
    int d = 32;      // entity and relation embedding width
    int hidden = 64; // LSTM state and MLP hidden width
};

/// Walker parameters:
///   entity_emb   [E x d]
///   relation_emb [(R+1) x d], last row is the BEGIN pseudo-action fed to the
///                LSTM at the first step
///   policy.lstm  input [a_prev; o_t] of width 2d, hidden state of width `hidden`
///   policy.w1    [hidden x (hidden + 2d)] over [h_t; o_t; r_q]
///   policy.w2    [2d x hidden], projecting into action-feature space
/// Action features are concat(relation emb, target entity emb); a score is the
/// dot product of that feature with the projected state.
template <class T>
void add_policy_params(ParamStore<T>& store, const Vocabulary& vocab, const PolicyDims& dims, Rng& rng) {
    if (!vocab.finalized()) throw ContractError("add_policy_params requires a finalized vocabulary");
    store.add_embedding("entity_emb", vocab.entity_count(), dims.d, rng);
    store.add_embedding("relation_emb", vocab.relation_count() + 1, dims.d, rng);
    add_lstm_params(store, "policy.lstm", 2 * dims.d, dims.hidden, rng);
    store.add_matrix("policy.w1", dims.hidden, dims.hidden + 2 * dims.d, rng);
    store.add_matrix("policy.w2", 2 * dims.d, dims.hidden, rng);
}

template <class T>
int begin_relation_row(const ParamStore<T>& store) {
    return store.value("relation_emb").shape[0] - 1;
}

template <class T>
int policy_hidden_width(const ParamStore<T>& store) {
    return store.value("policy.w1").shape[0];
}

/// Available actions at `entity`. When `hide` names the query triple, that
/// edge and its inverse are removed so the walker cannot read off the answer;
/// the STOP self-loop keeps the slate non-empty.
inline std::vector<Edge> action_slate(const KnowledgeGraph& g, int entity, const std::optional<Triple>& hide) {
    const auto all = g.outgoing(entity);
    std::vector<Edge> slate(all.begin(), all.end());
    if (hide) {
        std::erase_if(slate, [&](const Edge& e) {
            if (entity == hide->subject && e.relation == hide->relation && e.target == hide->object) return true;
            if (g.inverse_enabled() && entity == hide->object && e.target == hide->subject &&
                e.relation == g.vocab().inverse_of(hide->relation))
                return true;
            return false;
        });
    }
    if (slate.empty()) throw InvalidActionSetError("no actions available at entity " + std::to_string(entity));
    return slate;
}

template <class T>
struct PolicyStepOut {
    LstmState<T> state;   // LSTM state after consuming (prev action, current entity)
    std::vector<Edge> slate;
    Tensor<T> logits;     // [slate size]
    Tensor<T> log_probs;  // log softmax of logits
};

/// One decision point of the walker at `cur`, arriving via relation
/// `prev_rel_row` (a row of relation_emb; BEGIN at the first step).
template <class T>
PolicyStepOut<T> policy_step(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g, int cur,
                             int prev_rel_row, const LstmState<T>& state, const Tensor<T>& query_rep,
                             const std::optional<Triple>& hide) {
    const Tensor<T> o = tape.lookup(store, "entity_emb", cur);
    const Tensor<T> a_prev = tape.lookup(store, "relation_emb", prev_rel_row);
    const LstmState<T> next = lstm_step(tape, store, "policy.lstm", tape.concat(a_prev, o), state);

    const Tensor<T> feat_parts[3] = {next.h, o, query_rep};
    const Tensor<T> feat = tape.concat(std::span<const Tensor<T>>(feat_parts, 3));
    const Tensor<T> hid = tape.relu(tape.matvec(tape.param(store, "policy.w1"), feat));
    const Tensor<T> proj = tape.matvec(tape.param(store, "policy.w2"), hid);

    std::vector<Edge> slate = action_slate(g, cur, hide);
    std::vector<Tensor<T>> scores;
    scores.reserve(slate.size());
    for (const Edge& e : slate) {
        const Tensor<T> feature = tape.concat(tape.lookup(store, "relation_emb", e.relation),
                                              tape.lookup(store, "entity_emb", e.target));
        scores.push_back(tape.dot(feature, proj));
    }
    const Tensor<T> logits = tape.stack(std::span<const Tensor<T>>(scores));
    const std::vector<std::uint8_t> mask(slate.size(), 1);
    const Tensor<T> log_probs = tape.log_softmax_masked(logits, mask);
    return {next, std::move(slate), logits, log_probs};
}

enum class RolloutMode { Sample, Greedy, Follow };

struct EpisodeOptions {
    int path_length = 3;
    RolloutMode mode = RolloutMode::Sample;
    std::span<const int> forced_actions; // slate indices, Follow mode only
    std::optional<Triple> hide_edge;     // query edge masked in both directions
};

template <class T>
struct EpisodeStep {
    int entity;       // entity occupied when the action was chosen
    Edge action;
    int action_index; // position in that step's slate
    int slate_size;
    Tensor<T> log_prob;
    Tensor<T> entropy;
};

template <class T>
struct Episode {
    int start_entity = -1;
    int final_entity = -1;
    T reward = T(0);
    std::vector<EpisodeStep<T>> steps;

    RelationPath relations() const {
        RelationPath p;
        p.reserve(steps.size());
        for (const auto& s : steps) p.push_back(s.action.relation);
        return p;
    }
};

/// Walks `path_length` steps from `start`. Sample mode draws from the policy
/// distribution via `rng`; Greedy takes the argmax (ties to the lower slate
/// index, i.e. the smaller (relation, target) pair); Follow replays
/// `forced_actions`. Reward is left at 0 for the caller to assign.
template <class T>
Episode<T> run_episode(Tape<T>& tape, ParamStore<T>& store, const KnowledgeGraph& g, int start,
                       const Tensor<T>& query_rep, const EpisodeOptions& opt, Rng* rng = nullptr) {
    if (opt.path_length < 1) throw ContractError("run_episode: path_length must be >= 1");
    if (opt.mode == RolloutMode::Sample && rng == nullptr)
        throw ContractError("run_episode: Sample mode needs an rng");
    if (opt.mode == RolloutMode::Follow &&
        opt.forced_actions.size() != static_cast<std::size_t>(opt.path_length))
        throw ContractError("run_episode: forced_actions must cover every step");

    Episode<T> ep;
    ep.start_entity = start;
    LstmState<T> state = lstm_zero_state(tape, policy_hidden_width(store));
    int cur = start;
    int prev_rel = begin_relation_row(store);
    for (int step = 0; step < opt.path_length; ++step) {
        PolicyStepOut<T> out = policy_step(tape, store, g, cur, prev_rel, state, query_rep, opt.hide_edge);
        const int k = static_cast<int>(out.slate.size());
        int choice;
        switch (opt.mode) {
        case RolloutMode::Sample: {
            std::vector<double> probs(static_cast<std::size_t>(k));
            const auto& lp = out.log_probs.values();
            for (int i = 0; i < k; ++i) probs[static_cast<std::size_t>(i)] = std::exp(double(lp[static_cast<std::size_t>(i)]));
            choice = static_cast<int>(rng->categorical(probs));
            break;
        }
        case RolloutMode::Greedy: {
            const auto& lv = out.logits.values();
            choice = 0;
            for (int i = 1; i < k; ++i)
                if (lv[static_cast<std::size_t>(i)] > lv[static_cast<std::size_t>(choice)]) choice = i;
            break;
        }
        case RolloutMode::Follow: {
            choice = opt.forced_actions[static_cast<std::size_t>(step)];
            if (choice < 0 || choice >= k)
                throw ContractError("run_episode: forced action " + std::to_string(choice) +
                                    " out of range for slate of " + std::to_string(k));
            break;
        }
        }
        const std::vector<std::uint8_t> mask(out.slate.size(), 1);
        ep.steps.push_back({cur, out.slate[static_cast<std::size_t>(choice)], choice, k,
                            tape.pick(out.log_probs, choice), tape.entropy_masked(out.logits, mask)});
        prev_rel = out.slate[static_cast<std::size_t>(choice)].relation;
        cur = out.slate[static_cast<std::size_t>(choice)].target;
        state = out.state;
    }
    ep.final_entity = cur;
    return ep;
}

/// Exponential moving average of batch mean reward. The advantage for a batch
/// uses the value from before that batch, then the batch folds in.
template <class T>
struct BaselineState {
    T value = T(0);
    T decay = T(0.95);

    void update(T batch_mean_reward) { value = decay * value + (T(1) - decay) * batch_mean_reward; }
};

/// REINFORCE surrogate with entropy bonus:
///   -(1/N) sum_i (R_i - b) sum_t log pi_t  -  lambda (1/N) sum_i (1/T_i) sum_t H_t
/// Advantages are host constants; gradients flow only through log pi and H.
/// Updates `baseline` with this batch's mean reward after computing advantages.
template <class T>
Tensor<T> reinforce_loss(Tape<T>& tape, std::span<const Episode<T>> episodes, BaselineState<T>& baseline,
                         T entropy_weight) {
    if (episodes.empty()) throw ContractError("reinforce_loss: empty batch");
    const T n = static_cast<T>(episodes.size());
    std::vector<Tensor<T>> terms;
    T reward_sum = T(0);
    for (const Episode<T>& ep : episodes) {
        if (ep.steps.empty()) throw ContractError("reinforce_loss: empty episode");
        reward_sum += ep.reward;
        const T adv = ep.reward - baseline.value;
        std::vector<Tensor<T>> lps;
        lps.reserve(ep.steps.size());
        for (const auto& s : ep.steps) lps.push_back(s.log_prob);
        terms.push_back(tape.scale(tape.add_n(std::span<const Tensor<T>>(lps)), -adv / n));
        if (entropy_weight != T(0)) {
            const T w = -entropy_weight / (n * static_cast<T>(ep.steps.size()));
            for (const auto& s : ep.steps) terms.push_back(tape.scale(s.entropy, w));
        }
    }
    baseline.update(reward_sum / n);
    return tape.add_n(std::span<const Tensor<T>>(terms));
}

/// Human-readable walk, e.g. "paris -capital_of-> france -__STOP__-> france [reward=1]".
template <class T>
std::string format_trajectory(const Episode<T>& ep, const Vocabulary& vocab) {
    std::string s = vocab.entity_label(ep.start_entity);
    for (const auto& step : ep.steps) {
        s += " -" + vocab.relation_label(step.action.relation) + "-> ";
        s += vocab.entity_label(step.action.target);
    }
    s += " [reward=" + std::to_string(static_cast<int>(ep.reward)) + "]";
    return s;
}

} // namespace metakgr
