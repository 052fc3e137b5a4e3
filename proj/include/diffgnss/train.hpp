#ifndef DIFFGNSS_TRAIN_HPP
#define DIFFGNSS_TRAIN_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffgnss/pipeline.hpp"

namespace diffgnss {

struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
    double lr0 = 2e-5;
    double lr_decay = 0.9;
    int lr_decay_every = 5;
    int epochs = 200;
    int batch = 8;
    double lambda_pri = 0.5;
    double lambda_res = 0.5;
    double lambda_un = 0.3;
    double lambda_prr = 1.0;
    std::uint64_t seed = 42;
    double grad_clip = 5.0;
    int pretrain_coarse_epochs = 0;  // optional coarse-only warm start
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr0", c.lr0},
            {"lr_decay", c.lr_decay},
            {"lr_decay_every", c.lr_decay_every},
            {"epochs", c.epochs},
            {"batch", c.batch},
            {"lambda_pri", c.lambda_pri},
            {"lambda_res", c.lambda_res},
            {"lambda_un", c.lambda_un},
            {"lambda_prr", c.lambda_prr},
            {"seed", c.seed},
            {"grad_clip", c.grad_clip},
            {"pretrain_coarse_epochs", c.pretrain_coarse_epochs}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.lambda_pri = j.value("lambda_pri", c.lambda_pri);
    c.lambda_res = j.value("lambda_res", c.lambda_res);
    c.lambda_un = j.value("lambda_un", c.lambda_un);
    c.lambda_prr = j.value("lambda_prr", c.lambda_prr);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.pretrain_coarse_epochs = j.value("pretrain_coarse_epochs", c.pretrain_coarse_epochs);
    return c;
}

// Stepped exponential decay: lr0 * decay^floor(epoch / every).
inline double lr_at(int epoch, double lr0 = 2e-5, double decay = 0.9, int every = 5) {
    if (epoch < 0) throw TrainError("lr_at: negative epoch");
    return lr0 * std::pow(decay, static_cast<double>(epoch / every));
}

// ---- Adam ----

template <class S>
struct AdamStateT {
    std::vector<ArrayT<S>> m, v;
    long step = 0;

    static AdamStateT create(const ParamStoreT<S>& ps) {
        AdamStateT st;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            st.m.push_back(ArrayT<S>(ps[static_cast<int>(i)].shape, S(0)));
            st.v.push_back(ArrayT<S>(ps[static_cast<int>(i)].shape, S(0)));
        }
        return st;
    }
};

// Standard bias-corrected Adam over a gradient map keyed by parameter name.
// Returns false (and leaves all state untouched) when any gradient is
// non-finite.
template <class S>
bool adam_step(ParamStoreT<S>& ps, const std::map<std::string, ArrayT<S>>& grads,
               AdamStateT<S>& st, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8, double clip_norm = 0.0) {
    for (const auto& [name, g] : grads)
        if (g.has_nonfinite()) return false;

    double gscale = 1.0;
    if (clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grads)
            for (S v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
        double norm = std::sqrt(sq);
        if (norm > clip_norm) gscale = clip_norm / norm;
    }

    st.step += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (std::size_t slot = 0; slot < ps.size(); ++slot) {
        const ArrayT<S>& g = grads.at(ps.names[slot]);
        ArrayT<S>& p = ps[static_cast<int>(slot)];
        ArrayT<S>& m = st.m[slot];
        ArrayT<S>& v = st.v[slot];
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            double gi = static_cast<double>(g.data[i]) * gscale;
            double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
            double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
            m.data[i] = static_cast<S>(mi);
            v.data[i] = static_cast<S>(vi);
            double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p.data[i] = static_cast<S>(p.data[i] - update);
        }
    }
    return true;
}

// ---- four-term loss ----

template <class S>
struct LossTermsT {
    VarT<S> total, pri, res, un, prr;
};

// Masked MSE over labeled satellites: (sum over labeled rows of (a-b)^2) / count.
template <class S>
VarT<S> masked_mse(TapeT<S>& t, VarT<S> pred, VarT<S> target, VarT<S> label_mask,
                   int label_count) {
    int rows = pred.value().rows();
    VarT<S> d = t.sub(pred, target);
    VarT<S> sq = t.mul_colvec(t.mul(d, d), label_mask);
    VarT<S> mean = t.mean_over_axis(t.reshape(sq, Shape{rows}), 0);
    return t.scale(mean, static_cast<S>(static_cast<double>(rows) / label_count));
}

// L = l_pri*MSE(init, gt) + l_res*MSE(eps0_hat, eps_gt) + l_un*MSE(u0_hat, u_gt)
//     + l_prr*MSE(init + eps0_hat, gt), all in normalized error units over
//     labeled satellites.
template <class S>
LossTermsT<S> compute_loss(TapeT<S>& t, const BatchT<S>& b, VarT<S> coarse_norm, VarT<S> eps0_hat,
                           VarT<S> u0_hat, const ArrayT<S>& eps_gt, const ArrayT<S>& u_gt,
                           const TrainConfig& tc, bool use_diffusion, bool use_uncertainty) {
    if (b.label_count == 0) throw TrainError("batch has no labeled satellites");
    const int BN = b.B * b.N;
    VarT<S> label_mask = t.constant(b.label_mask);
    VarT<S> gt = t.constant(ArrayT<S>(Shape{BN, 1}, b.gt_norm.data));

    LossTermsT<S> out;
    out.pri = masked_mse(t, coarse_norm, gt, label_mask, b.label_count);
    if (use_diffusion) {
        VarT<S> eps_target = t.constant(ArrayT<S>(Shape{BN, 1}, eps_gt.data));
        out.res = masked_mse(t, eps0_hat, eps_target, label_mask, b.label_count);
        out.prr = masked_mse(t, t.add(coarse_norm, eps0_hat), gt, label_mask, b.label_count);
        if (use_uncertainty) {
            VarT<S> u_target = t.constant(ArrayT<S>(Shape{BN, 1}, u_gt.data));
            out.un = masked_mse(t, u0_hat, u_target, label_mask, b.label_count);
        } else {
            out.un = t.constant_scalar(S(0));
        }
    } else {
        out.res = t.constant_scalar(S(0));
        out.un = t.constant_scalar(S(0));
        out.prr = t.constant_scalar(S(0));
    }
    out.total = t.add(t.add(t.scale(out.pri, static_cast<S>(tc.lambda_pri)),
                            t.scale(out.res, static_cast<S>(tc.lambda_res))),
                      t.add(t.scale(out.un, static_cast<S>(tc.lambda_un)),
                            t.scale(out.prr, static_cast<S>(tc.lambda_prr))));
    return out;
}

// ---- training loop ----

struct EpochMetrics {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double valid_mae = 0;
};

struct TrainResult {
    int best_epoch = -1;
    double best_valid_mae = std::numeric_limits<double>::infinity();
    std::vector<EpochMetrics> history;
    int skipped_steps = 0;
    bool diverged = false;
};

inline nlohmann::json history_to_json(const std::vector<EpochMetrics>& hist) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& h : hist)
        out.push_back({{"epoch", h.epoch},
                       {"lr", h.lr},
                       {"train_loss", h.train_loss},
                       {"valid_mae", h.valid_mae}});
    return out;
}

template <class S>
double refined_mae(const std::vector<PredictionRecord>& preds) {
    double acc = 0;
    std::size_t n = 0;
    for (const auto& r : preds) {
        if (is_missing(r.gt_m)) continue;
        acc += std::abs(r.fine_m - r.gt_m);
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

// Joint optimization of the coarse stage and the refiner: per step the batch
// runs coarse forward, one diffusion timestep is drawn per window, the
// ground-truth residual/uncertainty are noised, the denoiser predicts the
// clean samples, and the four-term loss backpropagates through everything.
// The residual target uses the current coarse value, detached.
template <class S>
TrainResult train(ModelT<S>& model, const std::vector<FeatureWindow>& train_ws,
                  const std::vector<FeatureWindow>& valid_ws, const TrainConfig& tc,
                  bool verbose = false) {
    if (train_ws.empty() || valid_ws.empty())
        throw TrainError("train/valid window sets must be non-empty");

    TrainResult result;
    Rng rng(mix_seed(tc.seed, 0x7141));
    AdamStateT<S> adam = AdamStateT<S>::create(model.params);
    const double s = model.cfg.error_scale;
    const int T_steps = model.schedule.t_steps;

    std::vector<std::size_t> order(train_ws.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<ArrayT<S>> best_params;
    auto snapshot = [&]() {
        best_params = model.params.values;
    };
    auto restore = [&]() {
        if (!best_params.empty()) model.params.values = best_params;
    };
    snapshot();

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        double lr = lr_at(epoch, tc.lr0, tc.lr_decay, tc.lr_decay_every);
        bool warm = epoch < tc.pretrain_coarse_epochs;
        rng.shuffle(order);

        double loss_sum = 0;
        int steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch)) {
            std::vector<const FeatureWindow*> ptrs;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(tc.batch)); ++i)
                ptrs.push_back(&train_ws[order[i]]);
            BatchT<S> b = make_batch<S>(ptrs, s);
            if (b.label_count == 0) continue;
            const int BN = b.B * b.N;

            TapeT<S> tape;
            auto coarse = model.coarse.forward(tape, model.params, b);

            VarT<S> eps0_hat, u0_hat;
            ArrayT<S> eps_gt(Shape{BN, 1}), u_gt(Shape{BN, 1});
            std::vector<int> t_per_window(static_cast<std::size_t>(b.B), 1);
            bool run_diffusion = model.cfg.use_diffusion && !warm;
            if (run_diffusion) {
                // detached residual target from the current coarse estimate
                // (copied: the tape may reallocate as later ops are pushed)
                ArrayT<S> init_vals = coarse.coarse_norm.value();
                for (int row = 0; row < BN; ++row) {
                    if (b.label_mask.data[static_cast<std::size_t>(row)] > S(0)) {
                        double init_n = init_vals.data[static_cast<std::size_t>(row)];
                        double gt_n = b.gt_norm.data[static_cast<std::size_t>(row)];
                        eps_gt.data[static_cast<std::size_t>(row)] = static_cast<S>(gt_n - init_n);
                        u_gt.data[static_cast<std::size_t>(row)] = static_cast<S>(
                            make_uncertainty_label(s * init_n, s * gt_n, model.cfg.e1,
                                                   model.cfg.e2));
                    }
                }
                std::vector<S> z_eps(static_cast<std::size_t>(BN), S(0));
                std::vector<S> z_u(static_cast<std::size_t>(BN), S(0));
                for (int wi = 0; wi < b.B; ++wi) {
                    t_per_window[static_cast<std::size_t>(wi)] = rng.uniform_int(1, T_steps);
                    const FeatureWindow& w = *b.windows[static_cast<std::size_t>(wi)];
                    for (int n = 0; n < w.n_sats; ++n) {
                        z_eps[static_cast<std::size_t>(wi * b.N + n)] = static_cast<S>(rng.gaussian());
                        z_u[static_cast<std::size_t>(wi * b.N + n)] = static_cast<S>(rng.gaussian());
                    }
                }
                ArrayT<S> eps_t(Shape{BN, 1}), u_t(Shape{BN, 1});
                for (int wi = 0; wi < b.B; ++wi) {
                    int tt = t_per_window[static_cast<std::size_t>(wi)];
                    double ab = model.schedule.alpha_bar_at(tt);
                    double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
                    for (int n = 0; n < b.N; ++n) {
                        std::size_t row = static_cast<std::size_t>(wi * b.N + n);
                        eps_t.data[row] = static_cast<S>(ca * eps_gt.data[row] + cb * z_eps[row]);
                        u_t.data[row] = static_cast<S>(ca * u_gt.data[row] + cb * z_u[row]);
                    }
                }
                VarT<S> cond = model.condition.build(tape, model.params, b, coarse.coarse_norm);
                auto den = model.denoiser.forward(tape, model.params, b,
                                                  tape.constant(std::move(eps_t)),
                                                  tape.constant(std::move(u_t)), t_per_window,
                                                  cond);
                eps0_hat = den.eps0;
                u0_hat = den.u0;
            }

            LossTermsT<S> loss = compute_loss(tape, b, coarse.coarse_norm, eps0_hat, u0_hat,
                                              eps_gt, u_gt, tc, run_diffusion,
                                              model.cfg.use_uncertainty);
            tape.backward(loss.total);
            auto grads = tape.collect_gradients(model.params);
            if (!adam_step(model.params, grads, adam, lr, 0.9, 0.999, 1e-8, tc.grad_clip))
                ++result.skipped_steps;
            loss_sum += static_cast<double>(loss.total.value().data[0]);
            ++steps;
        }

        auto preds = run_inference(model, valid_ws, mix_seed(tc.seed, 0xa11d + static_cast<std::uint64_t>(epoch)));
        double vmae = refined_mae<S>(preds);

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        em.train_loss = steps ? loss_sum / steps : 0.0;
        em.valid_mae = vmae;
        result.history.push_back(em);
        if (verbose)
            std::fprintf(stderr, "epoch %3d  lr %.3g  train_loss %.5f  valid_mae %.4f m\n",
                         epoch, lr, em.train_loss, vmae);

        if (!std::isfinite(vmae) || !std::isfinite(em.train_loss)) {
            result.diverged = true;
            restore();
            break;
        }
        if (vmae < result.best_valid_mae) {
            result.best_valid_mae = vmae;
            result.best_epoch = epoch;
            snapshot();
        }
    }
    restore();  // leave the model at its best validation checkpoint
    return result;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_TRAIN_HPP
