#ifndef DIFFGNSS_COARSE_HPP
#define DIFFGNSS_COARSE_HPP

#include <string>
#include <vector>

#include "diffgnss/batch.hpp"
#include "diffgnss/mamba.hpp"
#include "diffgnss/nn.hpp"

namespace diffgnss {

enum class CoarseBackbone { mamba, uni_mamba, lstm, transformer };

inline const char* backbone_name(CoarseBackbone b) {
    switch (b) {
        case CoarseBackbone::mamba: return "mamba";
        case CoarseBackbone::uni_mamba: return "uni_mamba";
        case CoarseBackbone::lstm: return "lstm";
        case CoarseBackbone::transformer: return "transformer";
    }
    return "?";
}

inline CoarseBackbone backbone_from_name(const std::string& s) {
    if (s == "mamba") return CoarseBackbone::mamba;
    if (s == "uni_mamba") return CoarseBackbone::uni_mamba;
    if (s == "lstm") return CoarseBackbone::lstm;
    if (s == "transformer") return CoarseBackbone::transformer;
    throw std::invalid_argument("unknown coarse backbone: " + s);
}

// Per-window coarse stage outputs; everything still lives on the tape.
template <class S>
struct CoarseOutputsT {
    VarT<S> encoded;      // (B*N, T, H)
    VarT<S> temporal;     // (B*N, H)   per-satellite representation
    VarT<S> spatial;      // (B, H)     one global vector per window
    VarT<S> coarse_norm;  // (B*N, 1)   initial error in normalized units
};

// Coarse pseudorange-error initialization: lightweight encoder, a temporal
// state-space block pooled over valid epochs, a bidirectional spatial block
// pooled over valid satellites, and a regression head.
template <class S>
struct CoarseNetT {
    int model_dim = 0;
    int window_len = 0;
    CoarseBackbone backbone = CoarseBackbone::mamba;

    LinearT<S> feat_mlp;   // 5 -> H per (satellite, epoch)
    LinearT<S> time_mlp;   // T -> T mixing across the window
    int enc_conv_k = -1, enc_conv_b = -1;

    MambaBlockT<S> temporal_block;
    MambaBlockT<S> spatial_fwd, spatial_bwd;
    LinearT<S> spatial_mlp;

    LstmCellT<S> lstm;            // lstm / transformer backbones
    LinearT<S> attn_q, attn_k, attn_v, attn_ffn;  // transformer backbone

    LinearT<S> head1, head2;  // concat(F_T, F_S) -> H -> 1

    static CoarseNetT create(ParamStoreT<S>& ps, Rng& rng, int model_dim, int state_dim,
                             int expand, int conv_width, int window_len,
                             CoarseBackbone backbone) {
        CoarseNetT c;
        c.model_dim = model_dim;
        c.window_len = window_len;
        c.backbone = backbone;
        const std::string p = "coarse";
        c.feat_mlp = LinearT<S>::create(ps, rng, p + ".enc.feat", kFeatureDim, model_dim);
        c.time_mlp = LinearT<S>::create(ps, rng, p + ".enc.time", window_len, window_len);
        {
            const int W = 3;
            ArrayT<S> k(Shape{model_dim, W});
            double kc = 1.0 / std::sqrt(static_cast<double>(W));
            for (auto& v : k.data) v = static_cast<S>(rng.uniform(-kc, kc));
            c.enc_conv_k = ps.add(p + ".enc.conv.k", std::move(k));
            ArrayT<S> bb(Shape{model_dim});
            for (auto& v : bb.data) v = static_cast<S>(rng.uniform(-kc, kc));
            c.enc_conv_b = ps.add(p + ".enc.conv.b", std::move(bb));
        }
        switch (backbone) {
            case CoarseBackbone::mamba:
                c.temporal_block = MambaBlockT<S>::create(ps, rng, p + ".mamba_t", model_dim,
                                                          state_dim, expand, conv_width);
                c.spatial_fwd = MambaBlockT<S>::create(ps, rng, p + ".mamba_sf", model_dim,
                                                       state_dim, expand, conv_width);
                c.spatial_bwd = MambaBlockT<S>::create(ps, rng, p + ".mamba_sb", model_dim,
                                                       state_dim, expand, conv_width);
                c.spatial_mlp = LinearT<S>::create(ps, rng, p + ".spatial_mlp", 2 * model_dim,
                                                   model_dim);
                break;
            case CoarseBackbone::uni_mamba:
                c.temporal_block = MambaBlockT<S>::create(ps, rng, p + ".mamba_t", model_dim,
                                                          state_dim, expand, conv_width);
                c.spatial_fwd = MambaBlockT<S>::create(ps, rng, p + ".mamba_sf", model_dim,
                                                       state_dim, expand, conv_width);
                c.spatial_mlp = LinearT<S>::create(ps, rng, p + ".spatial_mlp", model_dim,
                                                   model_dim);
                break;
            case CoarseBackbone::lstm:
                c.lstm = LstmCellT<S>::create(ps, rng, p + ".lstm", model_dim, model_dim);
                c.spatial_mlp = LinearT<S>::create(ps, rng, p + ".spatial_mlp", model_dim,
                                                   model_dim);
                break;
            case CoarseBackbone::transformer:
                c.lstm = LstmCellT<S>::create(ps, rng, p + ".lstm", model_dim, model_dim);
                c.attn_q = LinearT<S>::create(ps, rng, p + ".attn.q", model_dim, model_dim);
                c.attn_k = LinearT<S>::create(ps, rng, p + ".attn.k", model_dim, model_dim);
                c.attn_v = LinearT<S>::create(ps, rng, p + ".attn.v", model_dim, model_dim);
                c.attn_ffn = LinearT<S>::create(ps, rng, p + ".attn.ffn", model_dim, model_dim);
                c.spatial_mlp = LinearT<S>::create(ps, rng, p + ".spatial_mlp", model_dim,
                                                   model_dim);
                break;
        }
        c.head1 = LinearT<S>::create(ps, rng, p + ".head.l1", 2 * model_dim, model_dim);
        c.head2 = LinearT<S>::create(ps, rng, p + ".head.l2", model_dim, 1);
        return c;
    }

    // Encoder: feature MLP, temporal-mixing MLP, temporal conv; masked
    // positions are zeroed after every stage so padding cannot leak.
    VarT<S> encode(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b, VarT<S> mask_bnt) const {
        const int BN = b.B * b.N, T = b.T, H = model_dim;
        VarT<S> x = t.relu(feat_mlp.apply(t, ps, t.constant(b.feats)));  // (BN*T, H)
        x = t.mul_colvec(x, mask_bnt);

        VarT<S> xt = t.transpose_last2(t.reshape(x, Shape{BN, T, H}));  // (BN, H, T)
        xt = t.relu(time_mlp.apply(t, ps, t.reshape(xt, Shape{BN * H, T})));
        x = t.transpose_last2(t.reshape(xt, Shape{BN, H, T}));  // (BN, T, H)
        x = t.mul_colvec(t.reshape(x, Shape{BN * T, H}), mask_bnt);

        VarT<S> xc = t.conv1d_depthwise(t.reshape(x, Shape{BN, T, H}), t.param(ps, enc_conv_k),
                                        /*pad=*/0);
        xc = t.add_rowvec(t.reshape(xc, Shape{BN * T, H}), t.param(ps, enc_conv_b));
        xc = t.relu(xc);
        xc = t.mul_colvec(xc, mask_bnt);
        return t.reshape(xc, Shape{BN, T, H});
    }

    // Mean over valid epochs only; padded rows come out zero.
    VarT<S> masked_time_mean(TapeT<S>& t, const BatchT<S>& b, VarT<S> seq, VarT<S> mask_bnt,
                             VarT<S> t_scale) const {
        const int BN = b.B * b.N, T = b.T, H = model_dim;
        VarT<S> m = t.mul_colvec(t.reshape(seq, Shape{BN * T, H}), mask_bnt);
        VarT<S> mean = t.mean_over_axis(t.reshape(m, Shape{BN, T, H}), 1);  // (BN, H)
        return t.mul_colvec(mean, t_scale);
    }

    VarT<S> masked_sat_mean(TapeT<S>& t, const BatchT<S>& b, VarT<S> per_sat, VarT<S> mask_bn,
                            VarT<S> sat_scale) const {
        const int H = model_dim;
        VarT<S> m = t.mul_colvec(per_sat, mask_bn);
        VarT<S> mean = t.mean_over_axis(t.reshape(m, Shape{b.B, b.N, H}), 1);  // (B, H)
        return t.mul_colvec(mean, sat_scale);
    }

    CoarseOutputsT<S> forward(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b) const {
        const int BN = b.B * b.N, T = b.T, H = model_dim;
        VarT<S> mask_bnt = t.constant(b.mask_bnt);
        VarT<S> mask_bn = t.constant(b.mask_bn);
        VarT<S> t_scale = t.constant(b.t_mean_scale);
        VarT<S> sat_scale = t.constant(b.sat_mean_scale);

        CoarseOutputsT<S> out;
        out.encoded = encode(t, ps, b, mask_bnt);

        switch (backbone) {
            case CoarseBackbone::mamba:
            case CoarseBackbone::uni_mamba: {
                VarT<S> yt = temporal_block.apply(t, ps, out.encoded, mask_bnt, false);
                out.temporal = masked_time_mean(t, b, yt, mask_bnt, t_scale);

                VarT<S> ft3 = t.reshape(out.temporal, Shape{b.B, b.N, H});
                VarT<S> fwd = spatial_fwd.apply(t, ps, ft3, mask_bn, false);
                VarT<S> cat;
                if (backbone == CoarseBackbone::mamba) {
                    VarT<S> bwd = spatial_bwd.apply(t, ps, ft3, mask_bn, true);
                    cat = t.concat({fwd, bwd}, 2);  // (B, N, 2H)
                } else {
                    cat = fwd;
                }
                int cd = cat.value().shape[2];
                VarT<S> sp = t.relu(spatial_mlp.apply(t, ps, t.reshape(cat, Shape{BN, cd})));
                out.spatial = masked_sat_mean(t, b, sp, mask_bn, sat_scale);
                break;
            }
            case CoarseBackbone::lstm: {
                VarT<S> hs = lstm_over_time(t, ps, b, out.encoded, mask_bnt);
                out.temporal = t.mul_colvec(hs, mask_bn);
                VarT<S> sp = t.relu(spatial_mlp.apply(t, ps, out.temporal));
                out.spatial = masked_sat_mean(t, b, sp, mask_bn, sat_scale);
                break;
            }
            case CoarseBackbone::transformer: {
                VarT<S> hs = lstm_over_time(t, ps, b, out.encoded, mask_bnt);
                hs = t.mul_colvec(hs, mask_bn);
                out.temporal = attention_over_sats(t, ps, b, hs, mask_bn);
                VarT<S> sp = t.relu(spatial_mlp.apply(t, ps, out.temporal));
                out.spatial = masked_sat_mean(t, b, sp, mask_bn, sat_scale);
                break;
            }
        }

        VarT<S> fs_exp = t.repeat_rows(out.spatial, b.N);  // (BN, H)
        VarT<S> cat = t.concat({out.temporal, fs_exp}, 1);
        VarT<S> h = t.relu(head1.apply(t, ps, cat));
        VarT<S> raw = head2.apply(t, ps, h);  // (BN, 1)
        out.coarse_norm = t.mul_colvec(raw, mask_bn);
        (void)T;
        return out;
    }

private:
    // LSTM along the window; missing epochs hold the previous state.
    VarT<S> lstm_over_time(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b, VarT<S> encoded,
                           VarT<S> mask_bnt) const {
        const int BN = b.B * b.N, H = model_dim;
        VarT<S> h = t.constant(ArrayT<S>(Shape{BN, H}));
        VarT<S> c = t.constant(ArrayT<S>(Shape{BN, H}));
        for (int step = 0; step < b.T; ++step) {
            VarT<S> x = t.reshape(t.slice(encoded, 1, step, 1), Shape{BN, H});
            auto [h2, c2] = lstm.step(t, ps, h, c, x);
            // column mask for this epoch
            ArrayT<S> mcol(Shape{BN});
            for (int r = 0; r < BN; ++r)
                mcol.data[static_cast<std::size_t>(r)] =
                    b.mask_bnt.data[static_cast<std::size_t>(r) * b.T + step];
            VarT<S> m = t.constant(mcol);
            h = t.add(h, t.mul_colvec(t.sub(h2, h), m));
            c = t.add(c, t.mul_colvec(t.sub(c2, c), m));
        }
        (void)mask_bnt;
        return h;
    }

    // Single-head self-attention across a window's satellites.
    VarT<S> attention_over_sats(TapeT<S>& t, ParamStoreT<S>& ps, const BatchT<S>& b,
                                VarT<S> tokens, VarT<S> mask_bn) const {
        const int H = model_dim;
        VarT<S> q = attn_q.apply(t, ps, tokens);
        VarT<S> k = attn_k.apply(t, ps, tokens);
        VarT<S> v = attn_v.apply(t, ps, tokens);
        std::vector<VarT<S>> outs;
        for (int wi = 0; wi < b.B; ++wi) {
            VarT<S> qb = t.slice(q, 0, wi * b.N, b.N);
            VarT<S> kb = t.slice(k, 0, wi * b.N, b.N);
            VarT<S> vb = t.slice(v, 0, wi * b.N, b.N);
            VarT<S> scores = t.scale(t.matmul(qb, kb, true),
                                     static_cast<S>(1.0 / std::sqrt(static_cast<double>(H))));
            // bias padded keys to -inf-ish before softmax
            ArrayT<S> bias(Shape{b.N, b.N});
            for (int r = 0; r < b.N; ++r)
                for (int cI = 0; cI < b.N; ++cI)
                    bias.data[static_cast<std::size_t>(r) * b.N + cI] =
                        b.mask_bn.data[static_cast<std::size_t>(wi * b.N + cI)] > S(0) ? S(0)
                                                                                       : S(-1e9);
            VarT<S> att = t.softmax_lastdim(t.add(scores, t.constant(bias)));
            outs.push_back(t.matmul(att, vb));
        }
        VarT<S> attn = t.concat(outs, 0);
        VarT<S> mixed = t.add(tokens, attn);  // residual
        VarT<S> ff = t.relu(attn_ffn.apply(t, ps, mixed));
        return t.mul_colvec(t.add(mixed, ff), mask_bn);
    }
};

}  // namespace diffgnss

#endif  // DIFFGNSS_COARSE_HPP
