#ifndef DIFFGNSS_MODEL_HPP
#define DIFFGNSS_MODEL_HPP

#include <cstdint>
#include <string>

#include <json.hpp>

#include "diffgnss/coarse.hpp"
#include "diffgnss/diffusion.hpp"

namespace diffgnss {

// Architecture and diffusion hyperparameters. Ablation switches remove whole
// branches (and their parameters), so checkpoints stay honest about what was
// trained.
struct ModelConfig {
    int model_dim = 64;   // H
    int state_dim = 16;
    int expand = 2;
    int conv_width = 4;
    int window_len = 3;
    int n_max = 32;
    double error_scale = 10.0;  // s, meters per normalized error unit

    int diffusion_steps = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    int ddim_evals = 2;
    bool ddim_stride_mode = false;
    double e1 = 1.0;  // absolute deviation threshold, meters
    double e2 = 0.1;  // relative deviation threshold
    int time_embed_dim = 64;

    bool use_diffusion = true;
    bool cond_temporal = true;
    bool cond_spatial = true;
    bool cond_coarse = true;
    bool use_uncertainty = true;
    CoarseBackbone backbone = CoarseBackbone::mamba;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {
        {"model_dim", c.model_dim},       {"state_dim", c.state_dim},
        {"expand", c.expand},             {"conv_width", c.conv_width},
        {"window_len", c.window_len},     {"n_max", c.n_max},
        {"error_scale", c.error_scale},   {"diffusion_steps", c.diffusion_steps},
        {"beta_min", c.beta_min},         {"beta_max", c.beta_max},
        {"ddim_evals", c.ddim_evals},     {"ddim_stride_mode", c.ddim_stride_mode},
        {"e1", c.e1},                     {"e2", c.e2},
        {"time_embed_dim", c.time_embed_dim},
        {"use_diffusion", c.use_diffusion},
        {"cond_temporal", c.cond_temporal},
        {"cond_spatial", c.cond_spatial},
        {"cond_coarse", c.cond_coarse},
        {"use_uncertainty", c.use_uncertainty},
        {"backbone", backbone_name(c.backbone)},
    };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.model_dim = j.value("model_dim", c.model_dim);
    c.state_dim = j.value("state_dim", c.state_dim);
    c.expand = j.value("expand", c.expand);
    c.conv_width = j.value("conv_width", c.conv_width);
    c.window_len = j.value("window_len", c.window_len);
    c.n_max = j.value("n_max", c.n_max);
    c.error_scale = j.value("error_scale", c.error_scale);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.beta_min = j.value("beta_min", c.beta_min);
    c.beta_max = j.value("beta_max", c.beta_max);
    c.ddim_evals = j.value("ddim_evals", c.ddim_evals);
    c.ddim_stride_mode = j.value("ddim_stride_mode", c.ddim_stride_mode);
    c.e1 = j.value("e1", c.e1);
    c.e2 = j.value("e2", c.e2);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.use_diffusion = j.value("use_diffusion", c.use_diffusion);
    c.cond_temporal = j.value("cond_temporal", c.cond_temporal);
    c.cond_spatial = j.value("cond_spatial", c.cond_spatial);
    c.cond_coarse = j.value("cond_coarse", c.cond_coarse);
    c.use_uncertainty = j.value("use_uncertainty", c.use_uncertainty);
    c.backbone = backbone_from_name(j.value("backbone", std::string("mamba")));
    return c;
}

inline nlohmann::json norm_stats_to_json(const NormStats& n) {
    return {{"mean", n.mean}, {"stddev", n.stddev}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats n;
    for (int f = 0; f < kFeatureDim; ++f) {
        n.mean[static_cast<std::size_t>(f)] = j.at("mean").at(static_cast<std::size_t>(f));
        n.stddev[static_cast<std::size_t>(f)] = j.at("stddev").at(static_cast<std::size_t>(f));
    }
    return n;
}

// The whole estimator: coarse stage plus (unless ablated) the conditioned
// diffusion refiner, sharing one parameter store.
template <class S>
struct ModelT {
    ModelConfig cfg;
    ParamStoreT<S> params;
    CoarseNetT<S> coarse;
    ConditionNetT<S> condition;
    DenoiserNetT<S> denoiser;
    DiffusionSchedule schedule;
    NormStats norm;
    bool has_norm = false;

    static ModelT create(const ModelConfig& cfg, std::uint64_t init_seed) {
        ModelT m;
        m.cfg = cfg;
        Rng rng(mix_seed(init_seed, 0xd1ff));
        m.coarse = CoarseNetT<S>::create(m.params, rng, cfg.model_dim, cfg.state_dim, cfg.expand,
                                         cfg.conv_width, cfg.window_len, cfg.backbone);
        if (cfg.use_diffusion) {
            m.condition = ConditionNetT<S>::create(m.params, rng, cfg.model_dim,
                                                   cfg.cond_temporal, cfg.cond_spatial,
                                                   cfg.cond_coarse);
            m.denoiser = DenoiserNetT<S>::create(m.params, rng, cfg.model_dim,
                                                 cfg.time_embed_dim, cfg.use_uncertainty);
        }
        m.schedule = build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max,
                                    cfg.ddim_evals, cfg.ddim_stride_mode);
        return m;
    }
};

using Model = ModelT<float>;

}  // namespace diffgnss

#endif  // DIFFGNSS_MODEL_HPP
