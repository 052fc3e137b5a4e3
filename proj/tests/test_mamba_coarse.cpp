#include <catch2/catch_amalgamated.hpp>

#include "diffgnss/coarse.hpp"
#include "diffgnss/mamba.hpp"
#include "diffgnss/model.hpp"
#include "diffgnss/train.hpp"
#include "testutil.hpp"

using namespace diffgnss;

namespace {

// Independent step-by-step recurrence, scalar loops only.
std::vector<double> naive_scan(const std::vector<double>& u, const std::vector<double>& dt,
                               const std::vector<double>& A, const std::vector<double>& B,
                               const std::vector<double>& C, int L, int inner, int state) {
    std::vector<double> h(static_cast<std::size_t>(inner) * state, 0.0);
    std::vector<double> y(static_cast<std::size_t>(L) * inner, 0.0);
    for (int l = 0; l < L; ++l)
        for (int i = 0; i < inner; ++i) {
            double acc = 0;
            for (int s = 0; s < state; ++s) {
                double& hv = h[static_cast<std::size_t>(i) * state + s];
                double a = A[static_cast<std::size_t>(i) * state + s];
                double d = dt[static_cast<std::size_t>(l) * inner + i];
                hv = std::exp(d * a) * hv +
                     d * B[static_cast<std::size_t>(l) * state + s] *
                         u[static_cast<std::size_t>(l) * inner + i];
                acc += C[static_cast<std::size_t>(l) * state + s] * hv;
            }
            y[static_cast<std::size_t>(l) * inner + i] = acc;
        }
    return y;
}

template <class S>
VarT<S> run_scan(TapeT<S>& t, const std::vector<double>& u, const std::vector<double>& dt,
                 const std::vector<double>& A, const std::vector<double>& B,
                 const std::vector<double>& C, int L, int inner, int state) {
    auto arr = [&](const std::vector<double>& v, Shape sh) {
        ArrayT<S> a(std::move(sh));
        for (std::size_t i = 0; i < v.size(); ++i) a.data[i] = static_cast<S>(v[i]);
        return t.constant(std::move(a));
    };
    return selective_scan(t, arr(u, {1, L, inner}), arr(dt, {1, L, inner}),
                          arr(A, {inner * state}), arr(B, {1, L, state}), arr(C, {1, L, state}),
                          state);
}

FeatureWindow toy_window(int n_sats, unsigned seed = 5) {
    Rng rng(seed);
    FeatureWindow w;
    w.seq_id = "seg0";
    w.scene = Scene::high_rise;
    w.window_len = 3;
    w.n_sats = n_sats;
    for (int n = 0; n < n_sats; ++n)
        w.sat_ids.push_back("G" + std::string(n + 1 < 10 ? "0" : "") + std::to_string(n + 1));
    w.epoch_times = {0, 1, 2};
    w.features.assign(static_cast<std::size_t>(n_sats) * 3 * kFeatureDim, 0.0f);
    w.mask.assign(static_cast<std::size_t>(n_sats) * 3, 1);
    w.gt_errors.assign(static_cast<std::size_t>(n_sats), 0.0f);
    for (int n = 0; n < n_sats; ++n) {
        for (int t = 0; t < 3; ++t)
            for (int f = 0; f < kFeatureDim; ++f)
                w.features[(static_cast<std::size_t>(n) * 3 + t) * kFeatureDim + f] =
                    static_cast<float>(rng.gaussian());
        w.gt_errors[static_cast<std::size_t>(n)] = static_cast<float>(rng.gaussian() * 2.0);
    }
    return w;
}

}  // namespace

TEST_CASE("selective scan reduces to an accumulator when A is zero") {
    Tape t;
    int L = 3, inner = 1, state = 1;
    std::vector<double> u{1, 1, 1}, dt{1, 1, 1}, A{0}, B{1, 1, 1}, C{1, 1, 1};
    Var y = run_scan(t, u, dt, A, B, C, L, inner, state);
    REQUIRE(y.value().shape == Shape{1, 3, 1});
    REQUIRE(y.value().data[0] == Catch::Approx(1.0));
    REQUIRE(y.value().data[1] == Catch::Approx(2.0));
    REQUIRE(y.value().data[2] == Catch::Approx(3.0));
}

TEST_CASE("single-step scan is C * (dt B u)") {
    Tape t;
    std::vector<double> u{0.7}, dt{0.3}, A{-1.2}, B{2.0}, C{-0.5};
    Var y = run_scan(t, u, dt, A, B, C, 1, 1, 1);
    REQUIRE(y.value().data[0] == Catch::Approx(-0.5 * 0.3 * 2.0 * 0.7));
}

TEST_CASE("selective scan matches the naive recurrence oracle on 100 seeded cases") {
    for (unsigned seed = 0; seed < 100; ++seed) {
        Rng rng(seed + 1);
        int L = 1 + static_cast<int>(rng.uniform() * 6);
        int inner = 1 + static_cast<int>(rng.uniform() * 8);
        int state = 1 + static_cast<int>(rng.uniform() * 4);
        auto draw = [&](std::size_t n, double lo, double hi) {
            std::vector<double> v(n);
            for (auto& x : v) x = rng.uniform(lo, hi);
            return v;
        };
        auto u = draw(static_cast<std::size_t>(L) * inner, -2, 2);
        auto dt = draw(static_cast<std::size_t>(L) * inner, 1e-3, 1.0);
        auto A = draw(static_cast<std::size_t>(inner) * state, -3.0, -0.05);
        auto B = draw(static_cast<std::size_t>(L) * state, -1.5, 1.5);
        auto C = draw(static_cast<std::size_t>(L) * state, -1.5, 1.5);

        TapeT<double> t;
        auto y = run_scan(t, u, dt, A, B, C, L, inner, state);
        auto ref = naive_scan(u, dt, A, B, C, L, inner, state);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            double got = y.value().data[i];
            double rel = std::abs(got - ref[i]) / std::max({1e-9, std::abs(got), std::abs(ref[i])});
            REQUIRE(rel < 1e-5);
        }
    }
}

TEST_CASE("negative-diagonal parameterization keeps the transition contractive") {
    Rng rng(33);
    ParamStore ps;
    auto block = MambaBlockT<float>::create(ps, rng, "blk", 8, 4, 2, 4);
    const auto& a_log = ps[block.a_log];
    for (int trial = 0; trial < 200; ++trial) {
        double dt = std::exp(rng.uniform(std::log(1e-4), std::log(10.0)));
        std::size_t idx = static_cast<std::size_t>(rng.uniform() * a_log.data.size());
        double a = -std::exp(static_cast<double>(a_log.data[idx]));
        REQUIRE(a < 0.0);
        REQUIRE(std::abs(std::exp(dt * a)) < 1.0);
    }
}

TEST_CASE("encoder output shape follows (N, T, H)") {
    Rng rng(1);
    ParamStoreT<float> ps;
    auto net = CoarseNetT<float>::create(ps, rng, 64, 16, 2, 4, 3, CoarseBackbone::mamba);
    auto w = toy_window(32);
    BatchT<float> b = make_batch<float>({&w}, 10.0);
    Tape t;
    auto out = net.forward(t, ps, b);
    REQUIRE(out.encoded.value().shape == Shape{32, 3, 64});
    REQUIRE(out.temporal.value().shape == Shape{32, 64});
    REQUIRE(out.spatial.value().shape == Shape{1, 64});
    REQUIRE(out.coarse_norm.value().shape == Shape{32, 1});
}

TEST_CASE("masked rows produce zero everywhere and perturbing them changes nothing") {
    Rng rng(2);
    ParamStoreT<float> ps;
    auto net = CoarseNetT<float>::create(ps, rng, 16, 4, 2, 4, 3, CoarseBackbone::mamba);
    auto w = toy_window(5);
    // Knock satellite 2 out of epoch 1, and satellite 4 out of all epochs.
    w.mask[2 * 3 + 1] = 0;
    for (int t = 0; t < 3; ++t) w.mask[4 * 3 + t] = 0;
    for (int t = 0; t < 3; ++t)
        for (int f = 0; f < kFeatureDim; ++f) {
            w.features[(2 * 3 + 1) * kFeatureDim + f] = 0.0f;
            w.features[(static_cast<std::size_t>(4) * 3 + t) * kFeatureDim + f] = 0.0f;
        }

    BatchT<float> base = make_batch<float>({&w}, 10.0);
    Tape t1;
    auto out1 = net.forward(t1, ps, base);

    // Perturb masked feature entries directly in the batch tensors.
    BatchT<float> pert = base;
    for (int f = 0; f < kFeatureDim; ++f) {
        pert.feats.data[(2 * 3 + 1) * kFeatureDim + f] = 99.0f;
        pert.feats.data[(static_cast<std::size_t>(4) * 3 + 2) * kFeatureDim + f] = -55.0f;
    }
    Tape t2;
    auto out2 = net.forward(t2, ps, pert);

    REQUIRE(out1.coarse_norm.value().data == out2.coarse_norm.value().data);
    REQUIRE(out1.temporal.value().data == out2.temporal.value().data);
    REQUIRE(out1.spatial.value().data == out2.spatial.value().data);

    // The never-observed satellite emits exactly zero.
    for (int c = 0; c < 16; ++c) REQUIRE(out1.temporal.value().at(4, c) == 0.0f);
    REQUIRE(out1.coarse_norm.value().data[4] == 0.0f);
}

TEST_CASE("coarse outputs are deterministic and finite at random init") {
    auto w = toy_window(7);
    auto run = [&]() {
        Rng rng(9);
        ParamStoreT<float> ps;
        auto net = CoarseNetT<float>::create(ps, rng, 32, 8, 2, 4, 3, CoarseBackbone::mamba);
        BatchT<float> b = make_batch<float>({&w}, 10.0);
        Tape t;
        return net.forward(t, ps, b).coarse_norm.value().data;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a == b);
    for (float v : a) {
        REQUIRE(std::isfinite(v));
        REQUIRE(std::abs(v) * 10.0 < 1e3);  // |coarse| < 1000 m at init
    }
}

TEST_CASE("masked temporal mean uses only valid epochs") {
    // With one valid epoch the pooled value equals that epoch's block output.
    Rng rng(4);
    ParamStoreT<float> ps;
    auto net = CoarseNetT<float>::create(ps, rng, 16, 4, 2, 4, 3, CoarseBackbone::mamba);
    auto w = toy_window(3);
    // satellite 1: only epoch 0 valid
    for (int t = 1; t < 3; ++t) {
        w.mask[1 * 3 + t] = 0;
        for (int f = 0; f < kFeatureDim; ++f)
            w.features[(1 * 3 + t) * kFeatureDim + f] = 0.0f;
    }
    BatchT<float> b = make_batch<float>({&w}, 10.0);
    REQUIRE(b.t_mean_scale.data[1] == 3.0f);

    Tape t;
    VarT<float> mask_bnt = t.constant(b.mask_bnt);
    auto enc = net.encode(t, ps, b, mask_bnt);
    auto yt = net.temporal_block.apply(t, ps, enc, mask_bnt, false);
    auto ft = net.masked_time_mean(t, b, yt, mask_bnt, t.constant(b.t_mean_scale));
    for (int c = 0; c < 16; ++c)
        REQUIRE(ft.value().at(1, c) ==
                Catch::Approx(yt.value().data[(1 * 3 + 0) * 16 + c]).margin(1e-6));
}

TEST_CASE("backbone variants share the output contract") {
    auto w = toy_window(6);
    for (auto bb : {CoarseBackbone::uni_mamba, CoarseBackbone::lstm, CoarseBackbone::transformer}) {
        Rng rng(11);
        ParamStoreT<float> ps;
        auto net = CoarseNetT<float>::create(ps, rng, 16, 4, 2, 4, 3, bb);
        BatchT<float> b = make_batch<float>({&w}, 10.0);
        Tape t;
        auto out = net.forward(t, ps, b);
        REQUIRE(out.coarse_norm.value().shape == Shape{6, 1});
        for (float v : out.coarse_norm.value().data) REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("coarse loss gradients match finite differences on a 4-satellite window") {
    Rng rng(21);
    ParamStoreT<double> ps;
    auto net = CoarseNetT<double>::create(ps, rng, 8, 4, 2, 4, 3, CoarseBackbone::mamba);
    auto w = toy_window(4);
    BatchT<double> b = make_batch<double>({&w}, 10.0);

    double err = grad_check<double>(
        [&](TapeT<double>& t) {
            auto out = net.forward(t, ps, b);
            VarT<double> gt = t.constant(ArrayT<double>(Shape{4, 1}, b.gt_norm.data));
            VarT<double> label = t.constant(b.label_mask);
            return masked_mse(t, out.coarse_norm, gt, label, b.label_count);
        },
        ps, 1e-3);
    REQUIRE(err < 1e-3);
}
