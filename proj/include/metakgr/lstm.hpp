#pragma once

#include <string>
#include <string_view>

#include "metakgr/autodiff.hpp"
#include "metakgr/rng.hpp"

namespace metakgr {

/// Registers the eight parameters of one LSTM cell under `prefix`:
/// w_i/w_f/w_o/w_g of shape [hidden x (input + hidden)] acting on [x; h],
/// and matching biases b_i/b_f/b_o/b_g of shape [hidden].
template <class T>
void add_lstm_params(ParamStore<T>& store, const std::string& prefix, int input, int hidden, Rng& rng) {
    for (const char* gate : {"i", "f", "o", "g"}) {
        store.add_matrix(prefix + ".w_" + gate, hidden, input + hidden, rng);
        store.add_bias(prefix + ".b_" + gate, hidden);
    }
}

template <class T>
struct LstmState {
    Tensor<T> h;
    Tensor<T> c;
};

template <class T>
LstmState<T> lstm_zero_state(Tape<T>& tape, int hidden) {
    return {tape.zeros({hidden}), tape.zeros({hidden})};
}

/// One step of a standard LSTM cell:
///   i = sigmoid(W_i [x;h] + b_i)      f = sigmoid(W_f [x;h] + b_f)
///   o = sigmoid(W_o [x;h] + b_o)      g = tanh(W_g [x;h] + b_g)
///   c' = f * c + i * g                h' = o * tanh(c')
template <class T>
LstmState<T> lstm_step(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix,
                       const Tensor<T>& x, const LstmState<T>& state) {
    const Tensor<T> xh = tape.concat(x, state.h);
    auto gate = [&](const char* name, bool squash_tanh) {
        const Tensor<T> z = tape.affine(tape.param(store, prefix + ".w_" + name),
                                        tape.param(store, prefix + ".b_" + name), xh);
        return squash_tanh ? tape.tanh_act(z) : tape.sigmoid(z);
    };
    const Tensor<T> i = gate("i", false);
    const Tensor<T> f = gate("f", false);
    const Tensor<T> o = gate("o", false);
    const Tensor<T> g = gate("g", true);
    const Tensor<T> c = tape.add(tape.mul(f, state.c), tape.mul(i, g));
    const Tensor<T> h = tape.mul(o, tape.tanh_act(c));
    return {h, c};
}

} // namespace metakgr
