#ifndef DIFFGNSS_DIFFUSION_HPP
#define DIFFGNSS_DIFFUSION_HPP

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffgnss/batch.hpp"
#include "diffgnss/nn.hpp"

namespace diffgnss {

struct DiffusionError : std::runtime_error {
    explicit DiffusionError(const std::string& what) : std::runtime_error(what) {}
};

// beta ramp and cumulative alpha-bar products over T noising steps, plus the
// timestep sub-sequence used at inference.
struct DiffusionSchedule {
    int t_steps = 0;
    std::vector<double> beta;       // beta[t-1] for t in 1..T
    std::vector<double> alpha_bar;  // alpha_bar[t-1] = prod_{k<=t} (1 - beta_k)
    std::vector<int> ddim_steps;    // strictly decreasing, last entry > 0

    double alpha_bar_at(int t) const {
        if (t < 0 || t > t_steps)
            throw DiffusionError("timestep " + std::to_string(t) + " outside [0," +
                                 std::to_string(t_steps) + "]");
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
};

// Evenly spaced descending timesteps for n denoiser evaluations, e.g. 2
// evaluations over T=1000 gives {1000, 500}; the final transition goes to 0.
inline std::vector<int> ddim_timesteps(int t_steps, int n_eval) {
    if (n_eval < 1 || n_eval > t_steps)
        throw DiffusionError("ddim evaluation count out of range");
    std::vector<int> out;
    for (int k = 0; k < n_eval; ++k) {
        int t = static_cast<int>(std::llround(static_cast<double>(t_steps) *
                                              (n_eval - k) / n_eval));
        if (!out.empty() && t >= out.back()) t = out.back() - 1;
        if (t < 1) t = 1;
        out.push_back(t);
    }
    return out;
}

// Alternative reading of a "sampling step size": stride through the full
// chain, {T, T-stride, ...}.
inline std::vector<int> ddim_timesteps_stride(int t_steps, int stride) {
    if (stride < 1) throw DiffusionError("ddim stride must be >= 1");
    std::vector<int> out;
    for (int t = t_steps; t >= 1; t -= stride) out.push_back(t);
    return out;
}

inline DiffusionSchedule build_schedule(int t_steps = 1000, double beta_min = 1e-4,
                                        double beta_max = 0.02, int ddim_evals = 2,
                                        bool stride_mode = false) {
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw DiffusionError("beta range must satisfy 0 < beta_min <= beta_max < 1");
    if (t_steps < 1) throw DiffusionError("t_steps must be >= 1");
    DiffusionSchedule s;
    s.t_steps = t_steps;
    s.beta.resize(static_cast<std::size_t>(t_steps));
    s.alpha_bar.resize(static_cast<std::size_t>(t_steps));
    double prod = 1.0;
    for (int t = 1; t <= t_steps; ++t) {
        double frac = t_steps == 1 ? 0.0 : static_cast<double>(t - 1) / (t_steps - 1);
        double b = beta_min + (beta_max - beta_min) * frac;
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        prod *= (1.0 - b);
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    s.ddim_steps = stride_mode ? ddim_timesteps_stride(t_steps, ddim_evals)
                               : ddim_timesteps(t_steps, ddim_evals);
    return s;
}

// eps_t = sqrt(alpha_bar_t) * eps_0 + sqrt(1 - alpha_bar_t) * z, elementwise.
// The same closed form serves the uncertainty channel.
template <class S>
std::vector<S> forward_diffuse(const std::vector<S>& x0, const std::vector<S>& z, int t,
                               const DiffusionSchedule& sched) {
    if (t < 1 || t > sched.t_steps)
        throw DiffusionError("forward_diffuse timestep " + std::to_string(t) + " outside [1," +
                             std::to_string(sched.t_steps) + "]");
    if (x0.size() != z.size()) throw DiffusionError("forward_diffuse: size mismatch");
    double ab = sched.alpha_bar_at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<S> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i)
        out[i] = static_cast<S>(a * x0[i] + b * z[i]);
    return out;
}

// Binary reliability target from absolute/relative coarse-error thresholds;
// zero ground truth falls back to the absolute criterion alone.
inline double make_uncertainty_label(double init_m, double gt_m, double e1, double e2) {
    double e_ab = std::abs(init_m - gt_m);
    if (gt_m == 0.0) return e_ab < e1 ? 0.0 : 1.0;
    double e_re = std::abs(e_ab / std::abs(gt_m));
    return (e_ab < e1 && e_re < e2) ? 0.0 : 1.0;
}

// Conditioning signal: temporal embeddings from an LSTM over the raw window
// features, a max-pooled scene context replicated per satellite, and an
// embedding of the coarse estimate.
template <class S>
struct ConditionNetT {
    int model_dim = 0;
    bool use_temporal = true, use_spatial = true, use_coarse = true;
    LstmCellT<S> lstm;
    LinearT<S> tc_mlp;
    LinearT<S> ic_mlp1, ic_mlp2;

    static ConditionNetT create(ParamStoreT<S>& ps, Rng& rng, int model_dim, bool use_temporal,
                                bool use_spatial, bool use_coarse) {
        ConditionNetT c;
        c.model_dim = model_dim;
        c.use_temporal = use_temporal;
        c.use_spatial = use_spatial;
        c.use_coarse = use_coarse;
        const std::string p = "cond";
        if (use_temporal || use_spatial) {
            c.lstm = LstmCellT<S>::create(ps, rng, p + ".lstm", kFeatureDim, model_dim);
            c.tc_mlp = LinearT<S>::create(ps, rng, p + ".tc_mlp", model_dim, model_dim);
        }
        if (use_coarse) {
            c.ic_mlp1 = LinearT<S>::create(ps, rng, p + ".ic_mlp1", 1, model_dim);
            c.ic_mlp2 = LinearT<S>::create(ps, rng, p + ".ic_mlp2", model_dim, model_dim);
        }
        return c;
    }

    int parts() const {
        return (use_coarse ? 1 : 0) + (use_temporal ? 1 : 0) + (use_spatial ? 1 : 0);
    }

    // Returns (BN, parts*H); every part is zero on masked satellite rows.
    VarT<S> build(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b,
                  VarT<S> coarse_norm) const {
        const int BN = b.B * b.N, H = model_dim;
        VarT<S> mask_bn = t.constant(b.mask_bn);

        VarT<S> f_tc;
        if (use_temporal || use_spatial) {
            VarT<S> h = t.constant(ArrayT<S>(Shape{BN, H}));
            VarT<S> c = t.constant(ArrayT<S>(Shape{BN, H}));
            VarT<S> feats = t.constant(b.feats);
            for (int step = 0; step < b.T; ++step) {
                VarT<S> x = t.reshape(
                    t.slice(t.reshape(feats, Shape{BN, b.T, kFeatureDim}), 1, step, 1),
                    Shape{BN, kFeatureDim});
                auto [h2, c2] = lstm.step(t, ps, h, c, x);
                ArrayT<S> mcol(Shape{BN});
                for (int r = 0; r < BN; ++r)
                    mcol.data[static_cast<std::size_t>(r)] =
                        b.mask_bnt.data[static_cast<std::size_t>(r) * b.T + step];
                VarT<S> m = t.constant(mcol);
                h = t.add(h, t.mul_colvec(t.sub(h2, h), m));
                c = t.add(c, t.mul_colvec(t.sub(c2, c), m));
            }
            f_tc = t.mul_colvec(tc_mlp.apply(t, ps, h), mask_bn);
        }

        std::vector<VarT<S>> chunks;
        if (use_coarse) {
            VarT<S> e = t.relu(ic_mlp1.apply(t, ps, coarse_norm));
            chunks.push_back(t.mul_colvec(ic_mlp2.apply(t, ps, e), mask_bn));
        }
        if (use_temporal) chunks.push_back(f_tc);
        if (use_spatial) {
            // max over valid satellites, replicated back per satellite
            ArrayT<S> neg(Shape{BN});
            for (int r = 0; r < BN; ++r)
                neg.data[static_cast<std::size_t>(r)] =
                    b.mask_bn.data[static_cast<std::size_t>(r)] > S(0) ? S(0) : S(-1e9);
            VarT<S> biased = t.add(f_tc, t.repeat_cols(t.constant(ArrayT<S>(Shape{BN, 1}, neg.data)), H));
            VarT<S> pooled = t.max_over_axis(t.reshape(biased, Shape{b.B, b.N, H}), 1);  // (B,H)
            VarT<S> f_sc = t.mul_colvec(t.repeat_rows(pooled, b.N), mask_bn);
            chunks.push_back(f_sc);
        }
        if (chunks.empty())
            throw DiffusionError("conditioning requires at least one enabled component");
        return chunks.size() == 1 ? chunks[0] : t.concat(chunks, 1);
    }
};

// GRU denoiser: the noisy state initializes the hidden vector, the
// conditioning signal drives the updates chunk by chunk, two heads emit the
// clean-sample prediction and a sigmoid-bounded uncertainty.
template <class S>
struct DenoiserNetT {
    int model_dim = 0, time_dim = 0;
    bool use_uncertainty = true;
    LinearT<S> state_enc;
    LinearT<S> time_proj;
    GruCellT<S> gru;
    LinearT<S> eps_head, u_head;

    static DenoiserNetT create(ParamStoreT<S>& ps, Rng& rng, int model_dim, int time_dim,
                               bool use_uncertainty) {
        DenoiserNetT d;
        d.model_dim = model_dim;
        d.time_dim = time_dim;
        d.use_uncertainty = use_uncertainty;
        const std::string p = "denoiser";
        d.state_enc = LinearT<S>::create(ps, rng, p + ".state_enc", use_uncertainty ? 2 : 1,
                                         model_dim);
        d.time_proj = LinearT<S>::create(ps, rng, p + ".time_proj", time_dim, model_dim);
        d.gru = GruCellT<S>::create(ps, rng, p + ".gru", model_dim, model_dim);
        d.eps_head = LinearT<S>::create(ps, rng, p + ".eps_head", model_dim, 1);
        if (use_uncertainty) d.u_head = LinearT<S>::create(ps, rng, p + ".u_head", model_dim, 1);
        return d;
    }

    struct Out {
        VarT<S> eps0;  // (BN, 1), masked rows zero
        VarT<S> u0;    // (BN, 1) in (0,1) on valid rows, zero on masked rows
    };

    // eps_t/u_t: (BN, 1) noisy state; t_per_window: timestep per window;
    // cond: (BN, parts*H).
    Out forward(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b, VarT<S> eps_t, VarT<S> u_t,
                const std::vector<int>& t_per_window, VarT<S> cond) const {
        const int BN = b.B * b.N, H = model_dim;
        VarT<S> mask_bn = t.constant(b.mask_bn);

        VarT<S> state = use_uncertainty ? t.concat({eps_t, u_t}, 1) : eps_t;
        VarT<S> enc = state_enc.apply(t, ps, state);

        ArrayT<S> emb(Shape{b.B, time_dim});
        for (int wi = 0; wi < b.B; ++wi) {
            ArrayT<S> row = sinusoidal_embedding<S>(t_per_window[static_cast<std::size_t>(wi)],
                                                    time_dim);
            for (int j = 0; j < time_dim; ++j)
                emb.data[static_cast<std::size_t>(wi) * time_dim + j] =
                    row.data[static_cast<std::size_t>(j)];
        }
        VarT<S> temb = t.repeat_rows(time_proj.apply(t, ps, t.constant(emb)), b.N);
        VarT<S> h = t.mul_colvec(t.relu(t.add(enc, temb)), mask_bn);

        int parts = cond.value().cols() / H;
        for (int k = 0; k < parts; ++k) {
            VarT<S> chunk = t.slice(cond, 1, k * H, H);
            h = gru.step(t, ps, h, chunk);
        }
        h = t.mul_colvec(h, mask_bn);

        Out out;
        out.eps0 = t.mul_colvec(eps_head.apply(t, ps, h), mask_bn);
        if (use_uncertainty)
            out.u0 = t.mul_colvec(t.sigmoid(u_head.apply(t, ps, h)), mask_bn);
        else
            out.u0 = t.constant(ArrayT<S>(Shape{BN, 1}));
        (void)BN;
        return out;
    }
};

// One deterministic (sigma = 0) DDIM update from t to t_next:
//   x_{t'} = sqrt(ab_{t'}) * pred + sqrt(1 - ab_{t'}) * (x_t - sqrt(ab_t) * pred)
//            / sqrt(1 - ab_t)
template <class S>
std::vector<S> ddim_update(const std::vector<S>& x_t, const std::vector<S>& pred0, int t, int t_next,
                           const DiffusionSchedule& sched) {
    double ab_t = sched.alpha_bar_at(t);
    double ab_n = sched.alpha_bar_at(t_next);
    double dir = std::sqrt(1.0 - ab_n) / std::sqrt(1.0 - ab_t);
    double a = std::sqrt(ab_n);
    double b = std::sqrt(ab_t);
    std::vector<S> out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out[i] = static_cast<S>(a * pred0[i] + dir * (x_t[i] - b * pred0[i]));
    return out;
}

// Coarse estimate plus scaled generated residual, in meters.
inline double refine(double init_m, double eps0_norm, double error_scale) {
    return init_m + error_scale * eps0_norm;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_DIFFUSION_HPP
