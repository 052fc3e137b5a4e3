#ifndef DIFFGNSS_PIPELINE_HPP
#define DIFFGNSS_PIPELINE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffgnss/model.hpp"

namespace diffgnss {

// Per-satellite estimate at a window's last epoch.
struct PredictionRecord {
    std::string seq_id;
    std::string sat_id;
    double epoch_time = 0;
    Scene scene = Scene::open_sky;
    double init_m = 0;   // coarse estimate, meters
    double eps0 = 0;     // generated residual, normalized units
    double fine_m = 0;   // refined estimate, meters
    double u0 = 0;       // uncertainty in (0,1); 0 when the refiner is ablated
    double gt_m = kMissing;
};

// Deterministic DDIM inference over a batch. Start noise is drawn from a
// per-window seed so results do not depend on how windows are batched.
template <class S>
void infer_batch(ModelT<S>& model, const BatchT<S>& b,
                 const std::vector<std::uint64_t>& window_seeds, int ddim_evals,
                 std::vector<PredictionRecord>& out) {
    TapeT<S> tape;
    tape.set_recording(false);
    const int BN = b.B * b.N;
    const double s = model.cfg.error_scale;

    auto coarse = model.coarse.forward(tape, model.params, b);
    // copy: later ops may grow the tape and relocate node storage
    ArrayT<S> init_norm = coarse.coarse_norm.value();  // (BN,1)

    std::vector<S> eps0_final(static_cast<std::size_t>(BN), S(0));
    std::vector<S> u0_final(static_cast<std::size_t>(BN), S(0));

    if (model.cfg.use_diffusion) {
        VarT<S> cond = model.condition.build(tape, model.params, b, coarse.coarse_norm);

        std::vector<int> steps = model.cfg.ddim_stride_mode
                                     ? model.schedule.ddim_steps
                                     : ddim_timesteps(model.schedule.t_steps, ddim_evals);

        std::vector<S> eps_t(static_cast<std::size_t>(BN), S(0));
        std::vector<S> u_t(static_cast<std::size_t>(BN), S(0));
        for (int wi = 0; wi < b.B; ++wi) {
            Rng rng(window_seeds[static_cast<std::size_t>(wi)]);
            const FeatureWindow& w = *b.windows[static_cast<std::size_t>(wi)];
            for (int n = 0; n < w.n_sats; ++n) {
                eps_t[static_cast<std::size_t>(wi * b.N + n)] = static_cast<S>(rng.gaussian());
                u_t[static_cast<std::size_t>(wi * b.N + n)] = static_cast<S>(rng.gaussian());
            }
        }

        for (std::size_t k = 0; k < steps.size(); ++k) {
            int t_k = steps[k];
            VarT<S> eps_var = tape.constant(ArrayT<S>(Shape{BN, 1}, eps_t));
            VarT<S> u_var = tape.constant(ArrayT<S>(Shape{BN, 1}, u_t));
            std::vector<int> t_per_window(static_cast<std::size_t>(b.B), t_k);
            auto pred = model.denoiser.forward(tape, model.params, b, eps_var, u_var,
                                               t_per_window, cond);
            eps0_final = pred.eps0.value().data;
            u0_final = pred.u0.value().data;
            if (k + 1 < steps.size()) {
                eps_t = ddim_update(eps_t, eps0_final, t_k, steps[k + 1], model.schedule);
                u_t = ddim_update(u_t, u0_final, t_k, steps[k + 1], model.schedule);
            }
        }
    }

    for (int wi = 0; wi < b.B; ++wi) {
        const FeatureWindow& w = *b.windows[static_cast<std::size_t>(wi)];
        for (int n = 0; n < w.n_sats; ++n) {
            if (!w.observed(n, w.window_len - 1)) continue;
            int row = wi * b.N + n;
            PredictionRecord r;
            r.seq_id = w.seq_id;
            r.sat_id = w.sat_ids[static_cast<std::size_t>(n)];
            r.epoch_time = w.epoch_times.back();
            r.scene = w.scene;
            r.init_m = s * static_cast<double>(init_norm.data[static_cast<std::size_t>(row)]);
            r.eps0 = static_cast<double>(eps0_final[static_cast<std::size_t>(row)]);
            r.fine_m = model.cfg.use_diffusion ? refine(r.init_m, r.eps0, s) : r.init_m;
            r.u0 = static_cast<double>(u0_final[static_cast<std::size_t>(row)]);
            float gt = w.gt_errors[static_cast<std::size_t>(n)];
            r.gt_m = std::isfinite(gt) ? static_cast<double>(gt) : kMissing;
            out.push_back(std::move(r));
        }
    }
}

// Inference over a window list; windows must already be normalized with the
// model's stats.
template <class S>
std::vector<PredictionRecord> run_inference(ModelT<S>& model,
                                            const std::vector<FeatureWindow>& windows,
                                            std::uint64_t seed, int batch_size = 32,
                                            int ddim_evals_override = -1) {
    int evals = ddim_evals_override > 0 ? ddim_evals_override : model.cfg.ddim_evals;
    std::vector<PredictionRecord> out;
    for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<const FeatureWindow*> ptrs;
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = start;
             i < std::min(windows.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
            ptrs.push_back(&windows[i]);
            seeds.push_back(mix_seed(seed, i));
        }
        if (ptrs.empty()) break;
        BatchT<S> b = make_batch<S>(ptrs, model.cfg.error_scale);
        infer_batch(model, b, seeds, evals, out);
    }
    return out;
}

inline void save_predictions_csv(const std::vector<PredictionRecord>& preds,
                                 const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "seq_id,epoch_time_s,sat_id,scene,dr_init_m,dr_fine_m,u_hat,gt_err_m\n";
    using detail::format_double;
    for (const auto& r : preds) {
        f << r.seq_id << ',' << format_double(r.epoch_time) << ',' << r.sat_id << ','
          << scene_name(r.scene) << ',' << format_double(r.init_m) << ','
          << format_double(r.fine_m) << ',' << format_double(r.u0) << ','
          << format_double(r.gt_m) << "\n";
    }
}

// ---- prepared-window serialization ----

inline void save_windows(const std::vector<FeatureWindow>& windows, const std::string& path) {
    nlohmann::json meta;
    meta["count"] = windows.size();
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& w : windows) {
        entries.push_back({{"seq_id", w.seq_id},
                           {"scene", scene_name(w.scene)},
                           {"sat_ids", w.sat_ids},
                           {"epoch_times", w.epoch_times},
                           {"n_sats", w.n_sats},
                           {"window_len", w.window_len}});
    }
    meta["windows"] = std::move(entries);
    std::string header = meta.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write("DGNW", 4);
    std::uint32_t version = 1;
    std::uint32_t hlen = static_cast<std::uint32_t>(header.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& w : windows) {
        f.write(reinterpret_cast<const char*>(w.features.data()),
                static_cast<std::streamsize>(w.features.size() * sizeof(float)));
        f.write(reinterpret_cast<const char*>(w.mask.data()),
                static_cast<std::streamsize>(w.mask.size()));
        f.write(reinterpret_cast<const char*>(w.gt_errors.data()),
                static_cast<std::streamsize>(w.gt_errors.size() * sizeof(float)));
    }
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<FeatureWindow> load_windows(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DGNW", 4) != 0)
        throw IoError(path + ": not a windows file (bad magic)");
    std::uint32_t version = 0, hlen = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&hlen), 4);
    if (!f || version != 1) throw IoError(path + ": unsupported windows file version");
    std::string header(hlen, '\0');
    f.read(header.data(), hlen);
    if (!f) throw IoError(path + ": truncated header");
    nlohmann::json meta = nlohmann::json::parse(header);

    std::vector<FeatureWindow> out;
    for (const auto& e : meta.at("windows")) {
        FeatureWindow w;
        w.seq_id = e.at("seq_id").get<std::string>();
        w.scene = scene_from_name(e.at("scene").get<std::string>());
        w.sat_ids = e.at("sat_ids").get<std::vector<std::string>>();
        w.epoch_times = e.at("epoch_times").get<std::vector<double>>();
        w.n_sats = e.at("n_sats").get<int>();
        w.window_len = e.at("window_len").get<int>();
        std::size_t nf = static_cast<std::size_t>(w.n_sats) * w.window_len * kFeatureDim;
        std::size_t nm = static_cast<std::size_t>(w.n_sats) * w.window_len;
        w.features.resize(nf);
        w.mask.resize(nm);
        w.gt_errors.resize(static_cast<std::size_t>(w.n_sats));
        f.read(reinterpret_cast<char*>(w.features.data()),
               static_cast<std::streamsize>(nf * sizeof(float)));
        f.read(reinterpret_cast<char*>(w.mask.data()), static_cast<std::streamsize>(nm));
        f.read(reinterpret_cast<char*>(w.gt_errors.data()),
               static_cast<std::streamsize>(w.n_sats * sizeof(float)));
        if (!f) throw IoError(path + ": truncated payload");
        out.push_back(std::move(w));
    }
    return out;
}

// ---- dataset preparation ----

struct PreparedData {
    std::vector<FeatureWindow> train, valid, test;
    NormStats stats;
};

// Windows + stats from pre-split observation files. Augmentation (train and
// valid only) enumerates in-clip sub-sequences on top of the sliding windows.
inline PreparedData prepare_datasets(const std::vector<Sequence>& train_seqs,
                                     const std::vector<Sequence>& valid_seqs,
                                     const std::vector<Sequence>& test_seqs, bool augment_train,
                                     int window_len = kDefaultWindowLen,
                                     int n_max = kDefaultMaxSats) {
    PreparedData out;
    auto build = [&](const std::vector<Sequence>& seqs, bool aug) {
        std::vector<FeatureWindow> ws;
        for (const auto& s : seqs) {
            SequenceFeatures sf = compute_sequence_features(s);
            if (sf.epochs.size() < static_cast<std::size_t>(window_len)) continue;
            auto more = aug ? augment(sf, 5.0, window_len, n_max)
                            : build_windows(sf, window_len, n_max);
            ws.insert(ws.end(), more.begin(), more.end());
        }
        return ws;
    };
    out.train = build(train_seqs, augment_train);
    out.valid = build(valid_seqs, augment_train);
    out.test = build(test_seqs, false);
    out.stats = compute_norm_stats(out.train);
    normalize_features(out.train, out.stats);
    normalize_features(out.valid, out.stats);
    normalize_features(out.test, out.stats);
    return out;
}

// Single-file variant: windows are built per segment and split 7:1:2 in time.
inline PreparedData prepare_single(const std::vector<Sequence>& seqs, bool augment_train,
                                   int window_len = kDefaultWindowLen,
                                   int n_max = kDefaultMaxSats) {
    std::vector<FeatureWindow> all;
    for (const auto& s : seqs) {
        SequenceFeatures sf = compute_sequence_features(s);
        if (sf.epochs.size() < static_cast<std::size_t>(window_len)) continue;
        auto ws = build_windows(sf, window_len, n_max);
        all.insert(all.end(), ws.begin(), ws.end());
    }
    DatasetSplit split = split_dataset(all);
    PreparedData out;
    out.train = std::move(split.train);
    out.valid = std::move(split.valid);
    out.test = std::move(split.test);
    (void)augment_train;  // augmentation needs raw epochs; single-file path keeps base windows
    out.stats = compute_norm_stats(out.train);
    normalize_features(out.train, out.stats);
    normalize_features(out.valid, out.stats);
    normalize_features(out.test, out.stats);
    return out;
}

// Normalize test/inference windows with checkpoint stats.
inline std::vector<FeatureWindow> windows_for_inference(const std::vector<Sequence>& seqs,
                                                        const NormStats& stats,
                                                        int window_len = kDefaultWindowLen,
                                                        int n_max = kDefaultMaxSats) {
    std::vector<FeatureWindow> ws;
    for (const auto& s : seqs) {
        SequenceFeatures sf = compute_sequence_features(s);
        if (sf.epochs.size() < static_cast<std::size_t>(window_len)) continue;
        auto more = build_windows(sf, window_len, n_max);
        ws.insert(ws.end(), more.begin(), more.end());
    }
    normalize_features(ws, stats);
    return ws;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_PIPELINE_HPP
