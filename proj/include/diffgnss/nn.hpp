#ifndef DIFFGNSS_NN_HPP
#define DIFFGNSS_NN_HPP

#include <cmath>
#include <string>

#include "diffgnss/rng.hpp"
#include "diffgnss/tape.hpp"

namespace diffgnss {

// Linear layer: slots into a ParamStore, PyTorch-style uniform init.
template <class S>
struct LinearT {
    int w = -1, b = -1;
    int in = 0, out = 0;

    static LinearT create(ParamStoreT<S>& ps, Rng& rng, const std::string& name, int in, int out) {
        LinearT l;
        l.in = in;
        l.out = out;
        double k = 1.0 / std::sqrt(static_cast<double>(in));
        ArrayT<S> w(Shape{in, out});
        for (auto& v : w.data) v = static_cast<S>(rng.uniform(-k, k));
        ArrayT<S> b(Shape{out});
        for (auto& v : b.data) v = static_cast<S>(rng.uniform(-k, k));
        l.w = ps.add(name + ".w", std::move(w));
        l.b = ps.add(name + ".b", std::move(b));
        return l;
    }

    VarT<S> apply(TapeT<S>& t, ParamStoreT<S>& ps, VarT<S> x) const {
        return t.add_rowvec(t.matmul(x, t.param(ps, w)), t.param(ps, b));
    }
};

template <class S>
struct GruCellT {
    LinearT<S> in_rz, in_n, hid_rz, hid_n;
    int hidden = 0;

    static GruCellT create(ParamStoreT<S>& ps, Rng& rng, const std::string& name, int input,
                           int hidden) {
        GruCellT g;
        g.hidden = hidden;
        g.in_rz = LinearT<S>::create(ps, rng, name + ".in_rz", input, 2 * hidden);
        g.in_n = LinearT<S>::create(ps, rng, name + ".in_n", input, hidden);
        g.hid_rz = LinearT<S>::create(ps, rng, name + ".hid_rz", hidden, 2 * hidden);
        g.hid_n = LinearT<S>::create(ps, rng, name + ".hid_n", hidden, hidden);
        return g;
    }

    VarT<S> step(TapeT<S>& t, ParamStoreT<S>& ps, VarT<S> h, VarT<S> x) const {
        VarT<S> rz = t.sigmoid(t.add(in_rz.apply(t, ps, x), hid_rz.apply(t, ps, h)));
        VarT<S> r = t.slice(rz, 1, 0, hidden);
        VarT<S> z = t.slice(rz, 1, hidden, hidden);
        VarT<S> n = t.tanh_(t.add(in_n.apply(t, ps, x), t.mul(r, hid_n.apply(t, ps, h))));
        // h' = (1-z)*n + z*h
        VarT<S> one_minus_z = t.add_scalar(t.scale(z, S(-1)), S(1));
        return t.add(t.mul(one_minus_z, n), t.mul(z, h));
    }
};

template <class S>
struct LstmCellT {
    LinearT<S> in_gates, hid_gates;
    int hidden = 0;

    static LstmCellT create(ParamStoreT<S>& ps, Rng& rng, const std::string& name, int input,
                            int hidden) {
        LstmCellT l;
        l.hidden = hidden;
        l.in_gates = LinearT<S>::create(ps, rng, name + ".in", input, 4 * hidden);
        l.hid_gates = LinearT<S>::create(ps, rng, name + ".hid", hidden, 4 * hidden);
        return l;
    }

    // Returns (h, c).
    std::pair<VarT<S>, VarT<S>> step(TapeT<S>& t, ParamStoreT<S>& ps, VarT<S> h, VarT<S> c,
                                     VarT<S> x) const {
        VarT<S> gates = t.add(in_gates.apply(t, ps, x), hid_gates.apply(t, ps, h));
        VarT<S> i = t.sigmoid(t.slice(gates, 1, 0, hidden));
        VarT<S> f = t.sigmoid(t.slice(gates, 1, hidden, hidden));
        VarT<S> g = t.tanh_(t.slice(gates, 1, 2 * hidden, hidden));
        VarT<S> o = t.sigmoid(t.slice(gates, 1, 3 * hidden, hidden));
        VarT<S> c2 = t.add(t.mul(f, c), t.mul(i, g));
        VarT<S> h2 = t.mul(o, t.tanh_(c2));
        return {h2, c2};
    }
};

// Sinusoidal embedding of an integer timestep, dimension must be even.
template <class S>
ArrayT<S> sinusoidal_embedding(int t, int dim) {
    ArrayT<S> out(Shape{1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out.data[static_cast<std::size_t>(i)] = static_cast<S>(std::sin(t * freq));
        out.data[static_cast<std::size_t>(half + i)] = static_cast<S>(std::cos(t * freq));
    }
    return out;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_NN_HPP
