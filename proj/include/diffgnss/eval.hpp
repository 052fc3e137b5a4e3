#ifndef DIFFGNSS_EVAL_HPP
#define DIFFGNSS_EVAL_HPP

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffgnss/checkpoint.hpp"
#include "diffgnss/pipeline.hpp"
#include "diffgnss/synth.hpp"

namespace diffgnss {

struct EvalError : std::runtime_error {
    explicit EvalError(const std::string& what) : std::runtime_error(what) {}
};

struct Metrics {
    double mae = 0;
    double rmse = 0;
    std::size_t count = 0;
};

// MAE/RMSE over the masked-in entries.
inline Metrics metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                       const std::vector<bool>& mask) {
    Metrics m;
    double abs_sum = 0, sq_sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        double e = pred[i] - gt[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
        ++m.count;
    }
    if (m.count == 0) throw EvalError("metrics over an empty mask");
    m.mae = abs_sum / static_cast<double>(m.count);
    m.rmse = std::sqrt(sq_sum / static_cast<double>(m.count));
    return m;
}

inline Metrics metrics_of(const std::vector<PredictionRecord>& preds, bool refined) {
    std::vector<double> p, g;
    std::vector<bool> mask;
    for (const auto& r : preds) {
        if (is_missing(r.gt_m)) continue;
        p.push_back(refined ? r.fine_m : r.init_m);
        g.push_back(r.gt_m);
        mask.push_back(true);
    }
    return metrics(p, g, mask);
}

struct PositioningBlock {
    double raw_mean_horizontal_m = 0;
    double corr_mean_horizontal_m = 0;
    double raw_rmse_e = 0, raw_rmse_n = 0, raw_rmse_u = 0;
    double corr_rmse_e = 0, corr_rmse_n = 0, corr_rmse_u = 0;
    std::vector<double> raw_cdf;   // sorted 2D errors
    std::vector<double> corr_cdf;
    std::size_t epochs_used = 0;
    std::size_t epochs_failed = 0;
};

struct EvalReport {
    Metrics coarse;   // coarse estimates vs ground truth
    Metrics refined;  // refined estimates vs ground truth
    std::map<std::string, Metrics> per_scene;       // refined, by scene label
    double mean_u0 = 0;
    bool has_uncertainty_split = false;
    Metrics confident;   // refined MAE over u0 < 0.5
    Metrics uncertain;   // refined MAE over u0 >= 0.5
    std::vector<PredictionRecord> records;
    PositioningBlock positioning;
    bool has_positioning = false;
};

// Scene-wise and uncertainty-partitioned metrics from prediction records.
inline EvalReport evaluate_predictions(std::vector<PredictionRecord> preds) {
    EvalReport rep;
    rep.coarse = metrics_of(preds, false);
    rep.refined = metrics_of(preds, true);

    std::map<std::string, std::vector<PredictionRecord>> groups;
    for (const auto& r : preds)
        if (!is_missing(r.gt_m)) groups[scene_name(r.scene)].push_back(r);
    for (const auto& [scene, rs] : groups) rep.per_scene[scene] = metrics_of(rs, true);

    double usum = 0;
    std::size_t un = 0;
    std::vector<PredictionRecord> conf, unc;
    for (const auto& r : preds) {
        if (is_missing(r.gt_m)) continue;
        usum += r.u0;
        ++un;
        (r.u0 < 0.5 ? conf : unc).push_back(r);
    }
    rep.mean_u0 = un ? usum / static_cast<double>(un) : 0.0;
    if (!conf.empty() && !unc.empty()) {
        rep.has_uncertainty_split = true;
        rep.confident = metrics_of(conf, true);
        rep.uncertain = metrics_of(unc, true);
    }
    rep.records = std::move(preds);
    return rep;
}

// ---- uncertainty vs iteration study ----

struct StudyRow {
    int iterations = 0;
    double mae = 0;
    double mean_u0 = 0;
};

template <class S>
std::vector<StudyRow> uncertainty_study(ModelT<S>& model,
                                        const std::vector<FeatureWindow>& test_windows,
                                        const std::vector<int>& iteration_counts,
                                        std::uint64_t seed) {
    std::vector<StudyRow> rows;
    for (int iters : iteration_counts) {
        auto preds = run_inference(model, test_windows, seed, 32, iters);
        StudyRow row;
        row.iterations = iters;
        row.mae = metrics_of(preds, true).mae;
        double usum = 0;
        std::size_t n = 0;
        for (const auto& r : preds) {
            usum += r.u0;
            ++n;
        }
        row.mean_u0 = n ? usum / static_cast<double>(n) : 0.0;
        rows.push_back(row);
    }
    return rows;
}

// ---- positioning comparison ----

struct PositionCompareOptions {
    bool exclude_uncertain = false;  // drop u0 >= 0.5 satellites from the corrected solve
    double uncertainty_threshold = 0.5;
};

// Raw vs corrected epoch-wise SPP against ground-truth receiver positions.
// Corrections subtract the predicted per-satellite error from the
// pseudorange. Epochs without any prediction or where SPP fails are skipped
// and counted.
inline PositioningBlock position_compare(const std::vector<Sequence>& sequences,
                                         const std::vector<PredictionRecord>& preds,
                                         const PositionCompareOptions& opt = {}) {
    struct Key {
        std::string seq;
        double t;
        std::string sat;
        bool operator<(const Key& o) const {
            if (seq != o.seq) return seq < o.seq;
            if (t != o.t) return t < o.t;
            return sat < o.sat;
        }
    };
    std::map<Key, const PredictionRecord*> by_sat;
    for (const auto& r : preds) by_sat[{r.seq_id, r.epoch_time, r.sat_id}] = &r;

    PositioningBlock out;
    double raw_h = 0, corr_h = 0;
    double raw_e2 = 0, raw_n2 = 0, raw_u2 = 0, corr_e2 = 0, corr_n2 = 0, corr_u2 = 0;

    for (const auto& seq : sequences) {
        std::optional<Vec3> prev_raw, prev_corr;
        for (const auto& ep : seq.epochs) {
            if (!ep.has_gt_rx) continue;
            // collect this epoch's predictions
            bool any = false;
            for (const auto& s : ep.sats)
                if (by_sat.count({seq.seq_id, ep.epoch_time_s, s.sat_id})) any = true;
            if (!any) continue;

            EpochObservation corrected = ep;
            std::vector<SatObs> kept;
            for (auto& s : corrected.sats) {
                auto it = by_sat.find({seq.seq_id, ep.epoch_time_s, s.sat_id});
                if (it == by_sat.end()) {
                    kept.push_back(s);
                    continue;
                }
                if (opt.exclude_uncertain && it->second->u0 >= opt.uncertainty_threshold)
                    continue;
                SatObs c = s;
                c.pr_corr_m -= it->second->fine_m;
                kept.push_back(c);
            }
            if (kept.size() < 4) kept = corrected.sats;  // never drop below solvability
            corrected.sats = std::move(kept);

            try {
                SppOptions ro;
                ro.initial_position = prev_raw;
                ReceiverSolution raw = solve_spp(ep, ro);
                SppOptions co;
                co.initial_position = prev_corr;
                ReceiverSolution corr = solve_spp(corrected, co);
                prev_raw = raw.position;
                prev_corr = corr.position;

                Vec3 raw_enu = ecef_to_enu(raw.position, ep.gt_rx_pos);
                Vec3 corr_enu = ecef_to_enu(corr.position, ep.gt_rx_pos);
                double rh = std::sqrt(raw_enu.x * raw_enu.x + raw_enu.y * raw_enu.y);
                double ch = std::sqrt(corr_enu.x * corr_enu.x + corr_enu.y * corr_enu.y);
                raw_h += rh;
                corr_h += ch;
                raw_e2 += raw_enu.x * raw_enu.x;
                raw_n2 += raw_enu.y * raw_enu.y;
                raw_u2 += raw_enu.z * raw_enu.z;
                corr_e2 += corr_enu.x * corr_enu.x;
                corr_n2 += corr_enu.y * corr_enu.y;
                corr_u2 += corr_enu.z * corr_enu.z;
                out.raw_cdf.push_back(rh);
                out.corr_cdf.push_back(ch);
                ++out.epochs_used;
            } catch (const SppError&) {
                ++out.epochs_failed;
            }
        }
    }
    if (out.epochs_used == 0) throw EvalError("position_compare: no usable epochs");
    double n = static_cast<double>(out.epochs_used);
    out.raw_mean_horizontal_m = raw_h / n;
    out.corr_mean_horizontal_m = corr_h / n;
    out.raw_rmse_e = std::sqrt(raw_e2 / n);
    out.raw_rmse_n = std::sqrt(raw_n2 / n);
    out.raw_rmse_u = std::sqrt(raw_u2 / n);
    out.corr_rmse_e = std::sqrt(corr_e2 / n);
    out.corr_rmse_n = std::sqrt(corr_n2 / n);
    out.corr_rmse_u = std::sqrt(corr_u2 / n);
    std::sort(out.raw_cdf.begin(), out.raw_cdf.end());
    std::sort(out.corr_cdf.begin(), out.corr_cdf.end());
    return out;
}

// ---- plug-and-play harness ----

struct PlugAndPlayResult {
    EvalReport without_refiner;
    EvalReport with_refiner;
};

// Train a given coarse backbone standalone and with the diffusion refiner
// attached (identical data, seed, and schedule), then evaluate both on the
// test windows. The PolyU-style LSTM branch consumes single-epoch windows.
template <class S>
PlugAndPlayResult plug_and_play(CoarseBackbone backbone, const ModelConfig& base_cfg,
                                const TrainConfig& tc, const std::vector<FeatureWindow>& train_ws,
                                const std::vector<FeatureWindow>& valid_ws,
                                const std::vector<FeatureWindow>& test_ws) {
    PlugAndPlayResult out;
    for (bool with_refiner : {false, true}) {
        ModelConfig cfg = base_cfg;
        cfg.backbone = backbone;
        cfg.use_diffusion = with_refiner;
        auto model = ModelT<S>::create(cfg, tc.seed);
        train(model, train_ws, valid_ws, tc);
        auto preds = run_inference(model, test_ws, mix_seed(tc.seed, 0x9e7a));
        auto rep = evaluate_predictions(std::move(preds));
        (with_refiner ? out.with_refiner : out.without_refiner) = std::move(rep);
    }
    return out;
}

// ---- report export ----

namespace detail {

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << content;
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

// Deterministic file set: metrics.csv, per_scene.csv, cdf.csv, traces.csv,
// summary.json.
inline void export_report(const EvalReport& rep, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    using detail::format_double;

    {
        std::string s = "name,mae_m,rmse_m,count\n";
        s += "coarse," + format_double(rep.coarse.mae) + ',' + format_double(rep.coarse.rmse) +
             ',' + std::to_string(rep.coarse.count) + "\n";
        s += "refined," + format_double(rep.refined.mae) + ',' + format_double(rep.refined.rmse) +
             ',' + std::to_string(rep.refined.count) + "\n";
        detail::write_file(dir + "/metrics.csv", s);
    }
    {
        std::string s = "scene,mae_m,rmse_m,count\n";
        for (const auto& [scene, m] : rep.per_scene)
            s += scene + ',' + format_double(m.mae) + ',' + format_double(m.rmse) + ',' +
                 std::to_string(m.count) + "\n";
        detail::write_file(dir + "/per_scene.csv", s);
    }
    {
        std::string s = "kind,error_2d_m,fraction\n";
        auto emit = [&](const char* kind, const std::vector<double>& cdf) {
            for (std::size_t i = 0; i < cdf.size(); ++i)
                s += std::string(kind) + ',' + format_double(cdf[i]) + ',' +
                     format_double(static_cast<double>(i + 1) / static_cast<double>(cdf.size())) +
                     "\n";
        };
        if (rep.has_positioning) {
            emit("raw", rep.positioning.raw_cdf);
            emit("corrected", rep.positioning.corr_cdf);
        }
        detail::write_file(dir + "/cdf.csv", s);
    }
    {
        std::string s = "seq_id,epoch_time_s,sat_id,scene,gt_err_m,dr_init_m,dr_fine_m,u_hat\n";
        for (const auto& r : rep.records)
            s += r.seq_id + ',' + format_double(r.epoch_time) + ',' + r.sat_id + ',' +
                 scene_name(r.scene) + ',' + format_double(r.gt_m) + ',' +
                 format_double(r.init_m) + ',' + format_double(r.fine_m) + ',' +
                 format_double(r.u0) + "\n";
        detail::write_file(dir + "/traces.csv", s);
    }
    {
        nlohmann::json j;
        j["coarse"] = {{"mae_m", rep.coarse.mae}, {"rmse_m", rep.coarse.rmse},
                       {"count", rep.coarse.count}};
        j["refined"] = {{"mae_m", rep.refined.mae}, {"rmse_m", rep.refined.rmse},
                        {"count", rep.refined.count}};
        nlohmann::json scenes;
        for (const auto& [scene, m] : rep.per_scene)
            scenes[scene] = {{"mae_m", m.mae}, {"rmse_m", m.rmse}, {"count", m.count}};
        j["per_scene"] = scenes;
        j["mean_u0"] = rep.mean_u0;
        if (rep.has_uncertainty_split) {
            j["uncertainty_split"] = {
                {"confident_mae_m", rep.confident.mae},
                {"confident_count", rep.confident.count},
                {"uncertain_mae_m", rep.uncertain.mae},
                {"uncertain_count", rep.uncertain.count},
            };
        }
        if (rep.has_positioning) {
            const auto& p = rep.positioning;
            j["positioning"] = {
                {"raw_mean_horizontal_m", p.raw_mean_horizontal_m},
                {"corr_mean_horizontal_m", p.corr_mean_horizontal_m},
                {"raw_rmse_enu_m", {p.raw_rmse_e, p.raw_rmse_n, p.raw_rmse_u}},
                {"corr_rmse_enu_m", {p.corr_rmse_e, p.corr_rmse_n, p.corr_rmse_u}},
                {"epochs_used", p.epochs_used},
                {"epochs_failed", p.epochs_failed},
            };
        }
        detail::write_file(dir + "/summary.json", j.dump(2) + "\n");
    }
}

}  // namespace diffgnss

#endif  // DIFFGNSS_EVAL_HPP
