#ifndef DIFFGNSS_FEATURES_HPP
#define DIFFGNSS_FEATURES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "diffgnss/spp.hpp"

namespace diffgnss {

struct FeatureError : std::runtime_error {
    explicit FeatureError(const std::string& what) : std::runtime_error(what) {}
};
struct WindowTooShort : FeatureError {
    WindowTooShort(std::size_t len, int T)
        : FeatureError("sequence of " + std::to_string(len) + " epochs is shorter than window " +
                       std::to_string(T)) {}
};
struct WindowTooLarge : FeatureError {
    WindowTooLarge(std::size_t n, int n_max)
        : FeatureError("window holds " + std::to_string(n) + " satellites, exceeding N_max " +
                       std::to_string(n_max)) {}
};
struct SegmentTooSmall : FeatureError {
    SegmentTooSmall(const std::string& id, std::size_t n)
        : FeatureError("segment " + id + " has only " + std::to_string(n) +
                       " windows (need >= 10 to split)") {}
};

constexpr int kFeatureDim = 5;  // [ls_error, rss, cn0, elevation, azimuth]
constexpr int kDefaultWindowLen = 3;
constexpr int kDefaultMaxSats = 32;

// Per-epoch derived features for every satellite, plus what the positioning
// evaluation needs later.
struct EpochFeatures {
    double time = 0;
    std::vector<std::string> sat_ids;
    std::vector<std::array<double, kFeatureDim>> feats;
    std::vector<double> gt_err;  // NaN where unlabeled
    Vec3 gt_rx_pos;
    bool has_gt_rx = false;
};

struct SequenceFeatures {
    std::string seq_id;
    Scene scene = Scene::open_sky;
    std::vector<EpochFeatures> epochs;
    std::size_t skipped_epochs = 0;  // epochs dropped because SPP failed
};

// Network input: satellites x window epochs x 5 features, satellite rows in
// canonical (constellation, PRN) order. Rows are compact; padding to N_max
// happens at batch assembly.
struct FeatureWindow {
    std::string seq_id;
    Scene scene = Scene::open_sky;
    std::vector<std::string> sat_ids;            // n entries
    std::vector<double> epoch_times;             // T entries
    std::vector<float> features;                 // n*T*5, masked entries exactly zero
    std::vector<std::uint8_t> mask;              // n*T
    std::vector<float> gt_errors;                // n, NaN where undefined
    int n_sats = 0;
    int window_len = 0;

    float feat(int sat, int t, int f) const {
        return features[(static_cast<std::size_t>(sat) * window_len + t) * kFeatureDim + f];
    }
    bool observed(int sat, int t) const {
        return mask[static_cast<std::size_t>(sat) * window_len + t] != 0;
    }
    bool labeled(int sat) const {
        return observed(sat, window_len - 1) && std::isfinite(gt_errors[static_cast<std::size_t>(sat)]);
    }
};

// Canonical order: constellation letter, then PRN number, then raw id.
inline bool sat_id_less(const std::string& a, const std::string& b) {
    char ca = a.empty() ? '?' : a[0];
    char cb = b.empty() ? '?' : b[0];
    if (ca != cb) return ca < cb;
    int pa = 0, pb = 0;
    try { pa = std::stoi(a.substr(1)); } catch (...) { pa = 0; }
    try { pb = std::stoi(b.substr(1)); } catch (...) { pb = 0; }
    if (pa != pb) return pa < pb;
    return a < b;
}

// SPP + feature assembly across one sequence. Epochs where SPP fails are
// skipped and counted. The previous epoch's solution seeds the next solve.
inline SequenceFeatures compute_sequence_features(const Sequence& seq,
                                                  const SppOptions& base_opt = {}) {
    SequenceFeatures out;
    out.seq_id = seq.seq_id;
    out.scene = seq.scene;
    std::optional<Vec3> prev;
    for (const auto& ep : seq.epochs) {
        SppOptions opt = base_opt;
        if (prev) opt.initial_position = prev;
        ReceiverSolution sol;
        try {
            sol = solve_spp(ep, opt);
        } catch (const SppError&) {
            ++out.skipped_epochs;
            continue;
        }
        prev = sol.position;
        std::vector<double> ls = compute_ls_error(ep, sol);
        double rss = compute_rss(ls);
        EpochFeatures ef;
        ef.time = ep.epoch_time_s;
        ef.has_gt_rx = ep.has_gt_rx;
        ef.gt_rx_pos = ep.gt_rx_pos;
        ef.sat_ids.reserve(ep.sats.size());
        for (std::size_t k = 0; k < ep.sats.size(); ++k) {
            const SatObs& s = ep.sats[k];
            ef.sat_ids.push_back(s.sat_id);
            ef.feats.push_back({ls[k], rss, s.cn0_dbhz, s.elev_deg, s.az_deg});
            ef.gt_err.push_back(s.gt_err_m);
        }
        out.epochs.push_back(std::move(ef));
    }
    return out;
}

namespace detail {

inline FeatureWindow window_from_epochs(const SequenceFeatures& seq,
                                        const std::vector<std::size_t>& idx, int n_max) {
    const int T = static_cast<int>(idx.size());
    std::set<std::string, bool (*)(const std::string&, const std::string&)> ids(sat_id_less);
    for (std::size_t e : idx)
        for (const auto& id : seq.epochs[e].sat_ids) ids.insert(id);
    if (static_cast<int>(ids.size()) > n_max) throw WindowTooLarge(ids.size(), n_max);

    FeatureWindow w;
    w.seq_id = seq.seq_id;
    w.scene = seq.scene;
    w.sat_ids.assign(ids.begin(), ids.end());
    w.n_sats = static_cast<int>(w.sat_ids.size());
    w.window_len = T;
    for (std::size_t e : idx) w.epoch_times.push_back(seq.epochs[e].time);
    w.features.assign(static_cast<std::size_t>(w.n_sats) * T * kFeatureDim, 0.0f);
    w.mask.assign(static_cast<std::size_t>(w.n_sats) * T, 0);
    w.gt_errors.assign(static_cast<std::size_t>(w.n_sats),
                       std::numeric_limits<float>::quiet_NaN());

    for (int t = 0; t < T; ++t) {
        const EpochFeatures& ef = seq.epochs[idx[static_cast<std::size_t>(t)]];
        for (std::size_t k = 0; k < ef.sat_ids.size(); ++k) {
            auto it = std::lower_bound(w.sat_ids.begin(), w.sat_ids.end(), ef.sat_ids[k],
                                       sat_id_less);
            int row = static_cast<int>(it - w.sat_ids.begin());
            w.mask[static_cast<std::size_t>(row) * T + t] = 1;
            for (int f = 0; f < kFeatureDim; ++f)
                w.features[(static_cast<std::size_t>(row) * T + t) * kFeatureDim + f] =
                    static_cast<float>(ef.feats[k][static_cast<std::size_t>(f)]);
            if (t == T - 1 && std::isfinite(ef.gt_err[k]))
                w.gt_errors[static_cast<std::size_t>(row)] = static_cast<float>(ef.gt_err[k]);
        }
    }
    return w;
}

using EpochTripleKey = std::vector<double>;

}  // namespace detail

// Contiguous sliding windows of length T over one sequence.
inline std::vector<FeatureWindow> build_windows(const SequenceFeatures& seq,
                                                int T = kDefaultWindowLen,
                                                int n_max = kDefaultMaxSats) {
    if (seq.epochs.size() < static_cast<std::size_t>(T))
        throw WindowTooShort(seq.epochs.size(), T);
    std::vector<FeatureWindow> out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(T) <= seq.epochs.size(); ++i) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) idx[static_cast<std::size_t>(t)] = i + static_cast<std::size_t>(t);
        out.push_back(detail::window_from_epochs(seq, idx, n_max));
    }
    return out;
}

// Augmentation: 5-second clips, every chronological sub-sequence of length
// `subseq_len` inside each clip (not only contiguous), deduplicated by epoch
// time triple and unioned with the contiguous windows.
inline std::vector<FeatureWindow> augment(const SequenceFeatures& seq, double clip_len_s = 5.0,
                                          int subseq_len = kDefaultWindowLen,
                                          int n_max = kDefaultMaxSats) {
    std::vector<FeatureWindow> out;
    std::set<detail::EpochTripleKey> seen;

    auto add_window = [&](const std::vector<std::size_t>& idx) {
        detail::EpochTripleKey key;
        for (std::size_t e : idx) key.push_back(seq.epochs[e].time);
        if (!seen.insert(key).second) return;
        out.push_back(detail::window_from_epochs(seq, idx, n_max));
    };

    // Base contiguous windows first so augmentation is a superset of them.
    if (seq.epochs.size() >= static_cast<std::size_t>(subseq_len)) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(subseq_len) <= seq.epochs.size(); ++i) {
            std::vector<std::size_t> idx;
            for (int t = 0; t < subseq_len; ++t) idx.push_back(i + static_cast<std::size_t>(t));
            add_window(idx);
        }
    }
    if (seq.epochs.empty()) return out;

    double t0 = seq.epochs.front().time;
    std::map<long long, std::vector<std::size_t>> clips;
    for (std::size_t e = 0; e < seq.epochs.size(); ++e) {
        long long c = static_cast<long long>(std::floor((seq.epochs[e].time - t0) / clip_len_s));
        clips[c].push_back(e);
    }
    for (const auto& [c, members] : clips) {
        const std::size_t n = members.size();
        if (n < static_cast<std::size_t>(subseq_len)) continue;
        // Enumerate ascending index combinations of size subseq_len.
        std::vector<std::size_t> comb(static_cast<std::size_t>(subseq_len));
        for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = i;
        while (true) {
            std::vector<std::size_t> idx;
            for (std::size_t i : comb) idx.push_back(members[i]);
            add_window(idx);
            int k = subseq_len - 1;
            while (k >= 0 && comb[static_cast<std::size_t>(k)] ==
                                 n - static_cast<std::size_t>(subseq_len - k))
                --k;
            if (k < 0) break;
            ++comb[static_cast<std::size_t>(k)];
            for (int j = k + 1; j < subseq_len; ++j)
                comb[static_cast<std::size_t>(j)] = comb[static_cast<std::size_t>(j - 1)] + 1;
        }
    }
    return out;
}

struct DatasetSplit {
    std::vector<FeatureWindow> train, valid, test;
};

// 7:1:2 split by contiguous time blocks within each scene segment: earliest
// windows train, then valid, then test.
inline DatasetSplit split_dataset(const std::vector<FeatureWindow>& windows,
                                  std::uint64_t /*seed*/ = 0) {
    // Group by segment, preserving first-seen segment order.
    std::vector<std::string> order;
    std::map<std::string, std::vector<FeatureWindow>> by_seq;
    for (const auto& w : windows) {
        if (!by_seq.count(w.seq_id)) order.push_back(w.seq_id);
        by_seq[w.seq_id].push_back(w);
    }
    DatasetSplit out;
    for (const auto& id : order) {
        auto& ws = by_seq[id];
        std::stable_sort(ws.begin(), ws.end(), [](const FeatureWindow& a, const FeatureWindow& b) {
            return a.epoch_times.back() < b.epoch_times.back();
        });
        const std::size_t n = ws.size();
        if (n < 10) throw SegmentTooSmall(id, n);
        std::size_t n_train = n * 7 / 10;
        std::size_t n_valid = n / 10;
        for (std::size_t i = 0; i < n; ++i) {
            if (i < n_train) out.train.push_back(ws[i]);
            else if (i < n_train + n_valid) out.valid.push_back(ws[i]);
            else out.test.push_back(ws[i]);
        }
    }
    return out;
}

// Per-channel z-score statistics from the train split's unmasked entries.
struct NormStats {
    std::array<double, kFeatureDim> mean{};
    std::array<double, kFeatureDim> stddev{};
};

inline NormStats compute_norm_stats(const std::vector<FeatureWindow>& train_windows) {
    NormStats st;
    std::array<double, kFeatureDim> sum{}, sumsq{};
    std::size_t count = 0;
    for (const auto& w : train_windows)
        for (int s = 0; s < w.n_sats; ++s)
            for (int t = 0; t < w.window_len; ++t) {
                if (!w.observed(s, t)) continue;
                ++count;
                for (int f = 0; f < kFeatureDim; ++f) {
                    double v = w.feat(s, t, f);
                    sum[static_cast<std::size_t>(f)] += v;
                    sumsq[static_cast<std::size_t>(f)] += v * v;
                }
            }
    if (count == 0) throw FeatureError("no unmasked entries to compute normalization stats");
    for (int f = 0; f < kFeatureDim; ++f) {
        double m = sum[static_cast<std::size_t>(f)] / static_cast<double>(count);
        double var = sumsq[static_cast<std::size_t>(f)] / static_cast<double>(count) - m * m;
        st.mean[static_cast<std::size_t>(f)] = m;
        st.stddev[static_cast<std::size_t>(f)] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return st;
}

// Z-score unmasked entries in place; masked entries stay exactly zero.
inline void normalize_features(std::vector<FeatureWindow>& windows, const NormStats& st) {
    for (auto& w : windows)
        for (int s = 0; s < w.n_sats; ++s)
            for (int t = 0; t < w.window_len; ++t) {
                if (!w.observed(s, t)) continue;
                for (int f = 0; f < kFeatureDim; ++f) {
                    auto& v = w.features[(static_cast<std::size_t>(s) * w.window_len + t) *
                                             kFeatureDim + f];
                    v = static_cast<float>((v - st.mean[static_cast<std::size_t>(f)]) /
                                           st.stddev[static_cast<std::size_t>(f)]);
                }
            }
}

}  // namespace diffgnss

#endif  // DIFFGNSS_FEATURES_HPP
