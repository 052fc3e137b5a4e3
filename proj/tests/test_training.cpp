#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "diffgnss/checkpoint.hpp"
#include "diffgnss/eval.hpp"
#include "diffgnss/synth.hpp"
#include "diffgnss/train.hpp"
#include "testutil.hpp"

using namespace diffgnss;

namespace {

FeatureWindow labeled_window(int n_sats, unsigned seed, float gt_scale = 2.0f) {
    Rng rng(seed);
    FeatureWindow w;
    w.seq_id = "seg";
    w.scene = Scene::wooded;
    w.window_len = 3;
    w.n_sats = n_sats;
    for (int n = 0; n < n_sats; ++n) w.sat_ids.push_back("G" + std::to_string(n + 1));
    w.epoch_times = {0, 1, 2};
    w.features.assign(static_cast<std::size_t>(n_sats) * 3 * kFeatureDim, 0.0f);
    w.mask.assign(static_cast<std::size_t>(n_sats) * 3, 1);
    w.gt_errors.assign(static_cast<std::size_t>(n_sats), 0.0f);
    for (auto& v : w.features) v = static_cast<float>(rng.gaussian());
    for (auto& g : w.gt_errors) g = static_cast<float>(rng.gaussian()) * gt_scale;
    return w;
}

}  // namespace

TEST_CASE("learning rate follows the stepped decay") {
    REQUIRE(lr_at(0) == Catch::Approx(2e-5));
    REQUIRE(lr_at(4) == Catch::Approx(2e-5));
    REQUIRE(lr_at(5) == Catch::Approx(1.8e-5));
    REQUIRE(lr_at(10) == Catch::Approx(1.62e-5));
    REQUIRE_THROWS_AS(lr_at(-1), TrainError);
}

TEST_CASE("perfect predictions zero the loss and weights isolate terms") {
    auto w = labeled_window(3, 7);
    BatchT<float> b = make_batch<float>({&w}, 10.0);
    const int BN = 3;

    Tape t;
    VarT<float> init = t.constant(ArrayT<float>(Shape{BN, 1}, b.gt_norm.data));  // exact coarse
    ArrayT<float> eps_gt(Shape{BN, 1}, 0.0f), u_gt(Shape{BN, 1}, 0.0f);
    VarT<float> eps0 = t.constant(ArrayT<float>(Shape{BN, 1}, 0.0f));
    VarT<float> u0 = t.constant(ArrayT<float>(Shape{BN, 1}, 0.0f));
    TrainConfig tc;
    auto loss = compute_loss(t, b, init, eps0, u0, eps_gt, u_gt, tc, true, true);
    REQUIRE(loss.total.value().data[0] == 0.0f);

    // only lambda_prr active: total reduces to the refined-error MSE
    TrainConfig iso;
    iso.lambda_pri = 0;
    iso.lambda_res = 0;
    iso.lambda_un = 0;
    iso.lambda_prr = 1.0;
    Tape t2;
    ArrayT<float> wrong(Shape{BN, 1});
    for (int i = 0; i < BN; ++i)
        wrong.data[static_cast<std::size_t>(i)] = b.gt_norm.data[static_cast<std::size_t>(i)] + 0.5f;
    VarT<float> init2 = t2.constant(wrong);
    VarT<float> zero = t2.constant(ArrayT<float>(Shape{BN, 1}, 0.0f));
    auto loss2 = compute_loss(t2, b, init2, zero, zero, eps_gt, u_gt, iso, true, true);
    REQUIRE(loss2.total.value().data[0] == Catch::Approx(0.25).margin(1e-6));
    REQUIRE(loss2.total.value().data[0] == Catch::Approx(loss2.prr.value().data[0]).margin(1e-7));
}

TEST_CASE("two-satellite loss matches scalar arithmetic") {
    // hand case: gt_norm = {1.0, -0.5}, init = {0.8, 0.1}, eps_hat = {0.3, -0.2},
    // u_hat = {0.2, 0.9}, eps_gt = gt - init = {0.2, -0.6}, u_gt = {0, 1}
    FeatureWindow w = labeled_window(2, 8);
    w.gt_errors[0] = 10.0f;   // /s=10 -> 1.0
    w.gt_errors[1] = -5.0f;   // -> -0.5
    BatchT<float> b = make_batch<float>({&w}, 10.0);

    Tape t;
    VarT<float> init = t.constant(ArrayT<float>(Shape{2, 1}, std::vector<float>{0.8f, 0.1f}));
    VarT<float> eps0 = t.constant(ArrayT<float>(Shape{2, 1}, std::vector<float>{0.3f, -0.2f}));
    VarT<float> u0 = t.constant(ArrayT<float>(Shape{2, 1}, std::vector<float>{0.2f, 0.9f}));
    ArrayT<float> eps_gt(Shape{2, 1}, std::vector<float>{0.2f, -0.6f});
    ArrayT<float> u_gt(Shape{2, 1}, std::vector<float>{0.0f, 1.0f});
    TrainConfig tc;  // 0.5/0.5/0.3/1.0
    auto loss = compute_loss(t, b, init, eps0, u0, eps_gt, u_gt, tc, true, true);

    double pri = ((1.0 - 0.8) * (1.0 - 0.8) + (-0.5 - 0.1) * (-0.5 - 0.1)) / 2.0;
    double res = ((0.3 - 0.2) * (0.3 - 0.2) + (-0.2 + 0.6) * (-0.2 + 0.6)) / 2.0;
    double un = ((0.2 - 0.0) * (0.2 - 0.0) + (0.9 - 1.0) * (0.9 - 1.0)) / 2.0;
    double fine0 = 0.8 + 0.3, fine1 = 0.1 - 0.2;
    double prr = ((fine0 - 1.0) * (fine0 - 1.0) + (fine1 + 0.5) * (fine1 + 0.5)) / 2.0;
    double total = 0.5 * pri + 0.5 * res + 0.3 * un + 1.0 * prr;

    REQUIRE(loss.pri.value().data[0] == Catch::Approx(pri).margin(1e-6));
    REQUIRE(loss.res.value().data[0] == Catch::Approx(res).margin(1e-6));
    REQUIRE(loss.un.value().data[0] == Catch::Approx(un).margin(1e-6));
    REQUIRE(loss.prr.value().data[0] == Catch::Approx(prr).margin(1e-6));
    REQUIRE(loss.total.value().data[0] == Catch::Approx(total).margin(1e-6));

    // decomposition: total equals the weighted sum of the parts
    double recomputed = 0.5 * loss.pri.value().data[0] + 0.5 * loss.res.value().data[0] +
                        0.3 * loss.un.value().data[0] + 1.0 * loss.prr.value().data[0];
    REQUIRE(loss.total.value().data[0] == Catch::Approx(recomputed).margin(1e-6));
}

TEST_CASE("unlabeled satellites cannot move any loss term") {
    auto w = labeled_window(4, 9);
    w.gt_errors[2] = std::numeric_limits<float>::quiet_NaN();  // unlabeled
    BatchT<float> b = make_batch<float>({&w}, 10.0);
    REQUIRE(b.label_count == 3);

    auto eval_total = [&](float injected) {
        Tape t;
        ArrayT<float> init_a(Shape{4, 1}, std::vector<float>{0.1f, 0.2f, injected, 0.4f});
        ArrayT<float> eps_a(Shape{4, 1}, std::vector<float>{0.0f, 0.1f, injected, -0.1f});
        ArrayT<float> u_a(Shape{4, 1}, std::vector<float>{0.5f, 0.5f, injected, 0.5f});
        ArrayT<float> eps_gt(Shape{4, 1}, 0.0f), u_gt(Shape{4, 1}, 0.0f);
        TrainConfig tc;
        auto loss = compute_loss(t, b, t.constant(init_a), t.constant(eps_a), t.constant(u_a),
                                 eps_gt, u_gt, tc, true, true);
        return loss.total.value().data[0];
    };
    REQUIRE(eval_total(0.0f) == eval_total(123.0f));
}

TEST_CASE("a batch with no labels is an error") {
    auto w = labeled_window(2, 10);
    w.gt_errors[0] = std::numeric_limits<float>::quiet_NaN();
    w.gt_errors[1] = std::numeric_limits<float>::quiet_NaN();
    BatchT<float> b = make_batch<float>({&w}, 10.0);
    Tape t;
    VarT<float> z = t.constant(ArrayT<float>(Shape{2, 1}, 0.0f));
    ArrayT<float> zz(Shape{2, 1}, 0.0f);
    TrainConfig tc;
    REQUIRE_THROWS_AS(compute_loss(t, b, z, z, z, zz, zz, tc, true, true), TrainError);
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
    ParamStore ps;
    ps.add("w", Array(Shape{3}, std::vector<float>{1, 2, 3}));
    auto st = AdamStateT<float>::create(ps);
    std::map<std::string, Array> grads{{"w", Array(Shape{3}, 0.0f)}};
    REQUIRE(adam_step(ps, grads, st, 0.1));
    REQUIRE(ps[0].data == std::vector<float>{1, 2, 3});
}

TEST_CASE("adam first step is minus lr after bias correction") {
    ParamStore ps;
    ps.add("w", Array(Shape{1}, 0.0f));
    auto st = AdamStateT<float>::create(ps);
    std::map<std::string, Array> grads{{"w", Array(Shape{1}, 1.0f)}};
    REQUIRE(adam_step(ps, grads, st, 0.01));
    REQUIRE(ps[0].data[0] == Catch::Approx(-0.01).epsilon(1e-3));
}

TEST_CASE("adam matches a hand-rolled two-step trace") {
    // scalar, g1 = 0.5, g2 = -0.25, lr 0.1
    double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1;
    double m = 0, v = 0, x = 1.0;
    for (int step = 1; step <= 2; ++step) {
        double g = step == 1 ? 0.5 : -0.25;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mh = m / (1 - std::pow(b1, step));
        double vh = v / (1 - std::pow(b2, step));
        x -= lr * mh / (std::sqrt(vh) + eps);
    }

    ParamStore ps;
    ps.add("w", Array(Shape{1}, 1.0f));
    auto st = AdamStateT<float>::create(ps);
    std::map<std::string, Array> g1{{"w", Array(Shape{1}, 0.5f)}};
    std::map<std::string, Array> g2{{"w", Array(Shape{1}, -0.25f)}};
    adam_step(ps, g1, st, lr);
    adam_step(ps, g2, st, lr);
    REQUIRE(ps[0].data[0] == Catch::Approx(x).margin(1e-5));
}

TEST_CASE("non-finite gradients skip the step") {
    ParamStore ps;
    ps.add("w", Array(Shape{1}, 1.0f));
    auto st = AdamStateT<float>::create(ps);
    std::map<std::string, Array> grads{
        {"w", Array(Shape{1}, std::numeric_limits<float>::quiet_NaN())}};
    REQUIRE_FALSE(adam_step(ps, grads, st, 0.1));
    REQUIRE(ps[0].data[0] == 1.0f);
    REQUIRE(st.step == 0);
}

TEST_CASE("four-term loss gradients match central differences on a tiny model") {
    ModelConfig cfg;
    cfg.model_dim = 4;
    cfg.state_dim = 2;
    cfg.time_embed_dim = 4;
    auto model = ModelT<double>::create(cfg, 31);
    auto w = labeled_window(3, 32);
    BatchT<double> b = make_batch<double>({&w}, cfg.error_scale);
    const int BN = 3;

    // Freeze the diffusion inputs: targets, timestep, and noise are constants
    // of the check (matching the detached-target semantics of a train step).
    ArrayT<double> eps_gt(Shape{BN, 1}), u_gt(Shape{BN, 1});
    {
        TapeT<double> t0;
        t0.set_recording(false);
        auto coarse = model.coarse.forward(t0, model.params, b);
        ArrayT<double> init = coarse.coarse_norm.value();
        for (int i = 0; i < BN; ++i) {
            double gt_n = b.gt_norm.data[static_cast<std::size_t>(i)];
            double in_n = init.data[static_cast<std::size_t>(i)];
            eps_gt.data[static_cast<std::size_t>(i)] = gt_n - in_n;
            u_gt.data[static_cast<std::size_t>(i)] = make_uncertainty_label(
                cfg.error_scale * in_n, cfg.error_scale * gt_n, cfg.e1, cfg.e2);
        }
    }
    Rng noise(77);
    const int t_draw = 400;
    ArrayT<double> eps_t(Shape{BN, 1}), u_t(Shape{BN, 1});
    double ab = model.schedule.alpha_bar_at(t_draw);
    for (int i = 0; i < BN; ++i) {
        eps_t.data[static_cast<std::size_t>(i)] =
            std::sqrt(ab) * eps_gt.data[static_cast<std::size_t>(i)] +
            std::sqrt(1 - ab) * noise.gaussian();
        u_t.data[static_cast<std::size_t>(i)] =
            std::sqrt(ab) * u_gt.data[static_cast<std::size_t>(i)] +
            std::sqrt(1 - ab) * noise.gaussian();
    }
    TrainConfig tc;

    double err = grad_check<double>(
        [&](TapeT<double>& t) {
            auto coarse = model.coarse.forward(t, model.params, b);
            auto cond = model.condition.build(t, model.params, b, coarse.coarse_norm);
            auto den = model.denoiser.forward(t, model.params, b, t.constant(eps_t),
                                              t.constant(u_t), {t_draw}, cond);
            auto loss = compute_loss(t, b, coarse.coarse_norm, den.eps0, den.u0, eps_gt, u_gt,
                                     tc, true, true);
            return loss.total;
        },
        model.params, 1e-4);  // 1e-3 steps occasionally straddle a relu kink
    REQUIRE(err < 1e-3);
}

namespace {

// Small labeled dataset from the scene generator.
PreparedData smoke_data() {
    SceneConfig open = default_scene_config(Scene::open_sky, 5);
    open.duration_s = 60;
    SceneConfig hi = default_scene_config(Scene::high_rise, 6);
    hi.duration_s = 60;
    std::vector<Sequence> train{generate_scene(open, "open_0"), generate_scene(hi, "hi_0", 1000)};
    SceneConfig openv = open, hiv = hi;
    openv.seed = 15;
    hiv.seed = 16;
    std::vector<Sequence> valid{generate_scene(openv, "open_v", 2000),
                                generate_scene(hiv, "hi_v", 3000)};
    return prepare_datasets(train, valid, valid, false);
}

}  // namespace

TEST_CASE("training improves validation MAE on a smoke dataset") {
    auto data = smoke_data();
    ModelConfig cfg;
    cfg.model_dim = 16;
    cfg.state_dim = 4;
    cfg.time_embed_dim = 8;
    auto model = ModelT<float>::create(cfg, 77);
    TrainConfig tc;
    tc.epochs = 20;
    tc.batch = 16;
    tc.lr0 = 2e-3;
    tc.seed = 5;
    auto result = train(model, data.train, data.valid, tc);
    REQUIRE(result.history.size() == 20);
    REQUIRE(result.best_valid_mae < result.history.front().valid_mae);
    REQUIRE_FALSE(result.diverged);
}

TEST_CASE("training runs are deterministic for a fixed seed") {
    auto data = smoke_data();
    auto run = [&]() {
        ModelConfig cfg;
        cfg.model_dim = 8;
        cfg.state_dim = 2;
        cfg.time_embed_dim = 4;
        auto model = ModelT<float>::create(cfg, 3);
        TrainConfig tc;
        tc.epochs = 3;
        tc.batch = 16;
        tc.lr0 = 1e-3;
        tc.seed = 11;
        auto r = train(model, data.train, data.valid, tc);
        std::vector<double> hist;
        for (const auto& h : r.history) {
            hist.push_back(h.train_loss);
            hist.push_back(h.valid_mae);
        }
        return hist;
    };
    REQUIRE(run() == run());
}

TEST_CASE("checkpoints round trip bitwise and reject mismatched architectures") {
    namespace fs = std::filesystem;
    ModelConfig cfg;
    cfg.model_dim = 8;
    cfg.state_dim = 2;
    cfg.time_embed_dim = 4;
    auto model = Model::create(cfg, 21);
    model.has_norm = true;
    model.norm.mean = {1, 2, 3, 4, 5};
    model.norm.stddev = {1, 1, 2, 2, 3};
    TrainConfig tc;
    std::vector<EpochMetrics> hist{{0, 2e-5, 1.25, 0.75}, {1, 2e-5, 1.1, 0.7}};

    std::string p1 = (fs::temp_directory_path() / "dgns_ck1.bin").string();
    std::string p2 = (fs::temp_directory_path() / "dgns_ck2.bin").string();
    save_checkpoint(model, tc, hist, 1, p1);
    auto loaded = load_checkpoint(p1);
    REQUIRE(loaded.model.params.names == model.params.names);
    for (std::size_t i = 0; i < model.params.size(); ++i)
        REQUIRE(loaded.model.params[static_cast<int>(i)].data ==
                model.params[static_cast<int>(i)].data);
    REQUIRE(loaded.model.has_norm);
    REQUIRE(loaded.model.norm.mean == model.norm.mean);
    save_checkpoint(loaded.model, loaded.train_config, hist, 1, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);

    // truncated payload
    std::string trunc = (fs::temp_directory_path() / "dgns_ck_trunc.bin").string();
    {
        std::ofstream out(trunc, std::ios::binary);
        out << b1.substr(0, b1.size() - 64);
    }
    REQUIRE_THROWS_WITH(load_checkpoint(trunc), Catch::Matchers::ContainsSubstring("truncated"));

    // a no-refiner checkpoint reconstructs the smaller architecture
    ModelConfig ab = cfg;
    ab.use_diffusion = false;
    auto ablated = Model::create(ab, 21);
    std::string p3 = (fs::temp_directory_path() / "dgns_ck3.bin").string();
    save_checkpoint(ablated, tc, {}, 0, p3);
    auto reloaded = load_checkpoint(p3);
    REQUIRE(reloaded.model.params.size() < model.params.size());
    for (const auto& name : reloaded.model.params.names)
        REQUIRE(name.rfind("denoiser", 0) == std::string::npos);

    // corrupt header length field
    std::string bad = (fs::temp_directory_path() / "dgns_ck_bad.bin").string();
    {
        std::string copy = b1;
        copy[6] = char(0x7f);  // blow up the header length
        std::ofstream out(bad, std::ios::binary);
        out << copy;
    }
    REQUIRE_THROWS_AS(load_checkpoint(bad), CheckpointError);

    std::remove(p1.c_str());
    std::remove(p2.c_str());
    std::remove(p3.c_str());
    std::remove(trunc.c_str());
    std::remove(bad.c_str());
}

TEST_CASE("no-diffusion ablation trains without refiner parameters") {
    auto data = smoke_data();
    ModelConfig cfg;
    cfg.model_dim = 8;
    cfg.state_dim = 2;
    cfg.time_embed_dim = 4;
    cfg.use_diffusion = false;
    auto model = ModelT<float>::create(cfg, 9);
    for (const auto& name : model.params.names) {
        REQUIRE(name.rfind("denoiser", 0) == std::string::npos);
        REQUIRE(name.rfind("cond", 0) == std::string::npos);
    }
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 16;
    tc.lr0 = 1e-3;
    auto r = train(model, data.train, data.valid, tc);
    REQUIRE(r.history.size() == 2);
    auto preds = run_inference(model, data.test, 1);
    for (const auto& p : preds) REQUIRE(p.fine_m == p.init_m);
}
