#ifndef DIFFGNSS_BATCH_HPP
#define DIFFGNSS_BATCH_HPP

#include <cmath>
#include <vector>

#include "diffgnss/features.hpp"
#include "diffgnss/tape.hpp"

namespace diffgnss {

// A padded batch of feature windows. Row layouts: per-satellite tensors use
// row index b*N + n, per-element tensors ((b*N + n)*T + t). Padded rows and
// epochs are zero and carry zero masks.
template <class S>
struct BatchT {
    int B = 0, N = 0, T = 0;
    ArrayT<S> feats;        // (B*N*T, 5), masked entries zero
    ArrayT<S> mask_bnt;     // (B*N*T)
    ArrayT<S> mask_bn;      // (B*N) satellite observed at any epoch
    ArrayT<S> t_mean_scale; // (B*N) T/valid_epochs, 0 for padded rows
    ArrayT<S> sat_mean_scale;  // (B) N/valid_satellites
    ArrayT<S> gt_norm;      // (B*N) ground-truth error / s, 0 where unlabeled
    ArrayT<S> label_mask;   // (B*N) labeled satellites
    int label_count = 0;
    std::vector<const FeatureWindow*> windows;
};

template <class S>
BatchT<S> make_batch(const std::vector<const FeatureWindow*>& ws, double error_scale) {
    BatchT<S> b;
    b.B = static_cast<int>(ws.size());
    b.T = ws.empty() ? 0 : ws[0]->window_len;
    for (const auto* w : ws) b.N = std::max(b.N, w->n_sats);
    const int BN = b.B * b.N;
    b.feats = ArrayT<S>(Shape{BN * b.T, kFeatureDim});
    b.mask_bnt = ArrayT<S>(Shape{BN * b.T});
    b.mask_bn = ArrayT<S>(Shape{BN});
    b.t_mean_scale = ArrayT<S>(Shape{BN});
    b.sat_mean_scale = ArrayT<S>(Shape{b.B});
    b.gt_norm = ArrayT<S>(Shape{BN});
    b.label_mask = ArrayT<S>(Shape{BN});
    b.windows = ws;

    for (int wi = 0; wi < b.B; ++wi) {
        const FeatureWindow& w = *ws[static_cast<std::size_t>(wi)];
        if (w.window_len != b.T)
            throw FeatureError("batch mixes window lengths");
        int valid_sats = 0;
        for (int n = 0; n < w.n_sats; ++n) {
            int row = wi * b.N + n;
            int epochs_seen = 0;
            for (int t = 0; t < b.T; ++t) {
                if (!w.observed(n, t)) continue;
                ++epochs_seen;
                b.mask_bnt.data[static_cast<std::size_t>(row) * b.T + t] = S(1);
                for (int f = 0; f < kFeatureDim; ++f)
                    b.feats.data[(static_cast<std::size_t>(row) * b.T + t) * kFeatureDim + f] =
                        static_cast<S>(w.feat(n, t, f));
            }
            if (epochs_seen > 0) {
                ++valid_sats;
                b.mask_bn.data[static_cast<std::size_t>(row)] = S(1);
                b.t_mean_scale.data[static_cast<std::size_t>(row)] =
                    static_cast<S>(static_cast<double>(b.T) / epochs_seen);
            }
            if (w.labeled(n)) {
                b.label_mask.data[static_cast<std::size_t>(row)] = S(1);
                b.gt_norm.data[static_cast<std::size_t>(row)] =
                    static_cast<S>(w.gt_errors[static_cast<std::size_t>(n)] / error_scale);
                ++b.label_count;
            }
        }
        b.sat_mean_scale.data[static_cast<std::size_t>(wi)] =
            valid_sats > 0 ? static_cast<S>(static_cast<double>(b.N) / valid_sats) : S(0);
    }
    return b;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_BATCH_HPP
