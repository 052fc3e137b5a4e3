#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffgnss/rng.hpp"
#include "diffgnss/tape.hpp"

using namespace diffgnss;

namespace {

template <class S>
ArrayT<S> random_array(Shape shape, Rng& rng, double scale = 1.0) {
    ArrayT<S> a(std::move(shape));
    for (auto& v : a.data) v = static_cast<S>(rng.gaussian() * scale);
    return a;
}

}  // namespace

TEST_CASE("matmul identity returns operand") {
    Tape t;
    Array eye(Shape{3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
    Rng rng(7);
    Array a = random_array<float>({3, 5}, rng);
    Var out = t.matmul(t.constant(eye), t.constant(a));
    REQUIRE(out.value().shape == Shape{3, 5});
    for (std::size_t i = 0; i < a.data.size(); ++i)
        REQUIRE(out.value().data[i] == Catch::Approx(a.data[i]).margin(1e-6));
}

TEST_CASE("mean over axis of [[1,3],[5,7]] along columns") {
    Tape t;
    Array x(Shape{2, 2}, std::vector<float>{1, 3, 5, 7});
    Var m = t.mean_over_axis(t.constant(x), 1);
    REQUIRE(m.value().shape == Shape{2});
    REQUIRE(m.value().data[0] == 2.0f);
    REQUIRE(m.value().data[1] == 6.0f);
}

TEST_CASE("depthwise conv with delta kernel is identity") {
    Tape t;
    Rng rng(3);
    Array x = random_array<float>({2, 4, 3}, rng);
    Array k(Shape{3, 3});
    for (int c = 0; c < 3; ++c) k.at(c, 1) = 1.0f;
    Var out = t.conv1d_depthwise(t.constant(x), t.constant(k), 0);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        REQUIRE(out.value().data[i] == x.data[i]);
}

TEST_CASE("backward of sum of squares") {
    ParamStore ps;
    ps.add("x", Array(Shape{2}, std::vector<float>{1, 2}));
    Tape t;
    Var x = t.param(ps, 0);
    Var sq = t.mul(x, x);
    Var loss = t.scale(t.mean_over_axis(sq, 0), 2.0f);  // mean*2 == sum for length 2
    t.backward(loss);
    auto g = t.collect_gradients(ps);
    REQUIRE(g.at("x").data[0] == Catch::Approx(2.0));
    REQUIRE(g.at("x").data[1] == Catch::Approx(4.0));
}

TEST_CASE("constant loss gives zero gradients and flags disconnected") {
    ParamStore ps;
    ps.add("w", Array(Shape{3}, 1.0f));
    Tape t;
    (void)t.param(ps, 0);
    Var loss = t.constant_scalar(5.0f);
    // loss does not depend on w: backward fails on requires_grad? No: loss is
    // constant, backward still runs and w's gradient is zero.
    t.backward(loss);
    std::vector<std::string> disconnected;
    auto g = t.collect_gradients(ps, &disconnected);
    for (float v : g.at("w").data) REQUIRE(v == 0.0f);
    REQUIRE(disconnected == std::vector<std::string>{"w"});
}

TEST_CASE("sigmoid gradient at zero is one quarter") {
    ParamStore ps;
    ps.add("w", Array(Shape{1}, 0.0f));
    Tape t;
    Var w = t.param(ps, 0);
    Var loss = t.sigmoid(w);  // x = 1 folded into w
    t.backward(loss);
    auto g = t.collect_gradients(ps);
    REQUIRE(g.at("w").data[0] == Catch::Approx(0.25));
}

TEST_CASE("double backward without reset is an error") {
    ParamStore ps;
    ps.add("x", Array(Shape{1}, 2.0f));
    Tape t;
    Var x = t.param(ps, 0);
    Var loss = t.mul(x, x);
    t.backward(loss);
    REQUIRE_THROWS_AS(t.backward(loss), std::logic_error);
    t.reset();
    Var x2 = t.param(ps, 0);
    t.backward(t.mul(x2, x2));
    auto g = t.collect_gradients(ps);
    REQUIRE(g.at("x").data[0] == Catch::Approx(4.0));
}

TEST_CASE("tape reset leaves no stale gradients") {
    ParamStore ps;
    ps.add("x", Array(Shape{2}, std::vector<float>{3, -1}));
    Tape t;
    Var x = t.param(ps, 0);
    t.backward(t.scale(t.mean_over_axis(t.mul(x, x), 0), 2.0f));
    t.reset();
    Var x2 = t.param(ps, 0);
    Var untouched = t.mean_over_axis(x2, 0);
    (void)untouched;
    Var loss = t.constant_scalar(1.0f);
    t.backward(loss);
    auto g = t.collect_gradients(ps);
    REQUIRE(g.at("x").data[0] == 0.0f);
    REQUIRE(g.at("x").data[1] == 0.0f);
}

TEST_CASE("shape mismatch errors name the operation") {
    Tape t;
    Var a = t.constant(Array(Shape{2, 3}, 1.0f));
    Var b = t.constant(Array(Shape{2, 2}, 1.0f));
    REQUIRE_THROWS_WITH(t.add(a, b), Catch::Matchers::ContainsSubstring("add"));
    REQUIRE_THROWS_WITH(t.matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("non-finite outputs are detected") {
    Tape t;
    Var big = t.constant(Array(Shape{1}, 200.0f));
    REQUIRE_THROWS_AS(t.exp_(t.exp_(big)), NonFiniteError);
}

TEST_CASE("quadratic form gradient check") {
    Rng rng(11);
    ParamStoreT<double> ps;
    ps.add("x", random_array<double>({4}, rng));
    ArrayT<double> q = random_array<double>({4, 4}, rng);
    double err = grad_check<double>(
        [&](TapeT<double>& t) {
            VarT<double> x = t.param(ps, 0);
            VarT<double> xr = t.reshape(x, {1, 4});
            VarT<double> qx = t.matmul(xr, t.constant(q));
            VarT<double> prod = t.mul(qx, xr);
            return t.scale(t.mean_over_axis(t.reshape(prod, {4}), 0), 4.0);
        },
        ps, 1e-3);
    REQUIRE(err < 1e-4);
}

TEST_CASE("linear function gradient check is exact to machine scale") {
    Rng rng(13);
    ParamStoreT<double> ps;
    ps.add("x", random_array<double>({6}, rng));
    ArrayT<double> c = random_array<double>({6}, rng);
    double err = grad_check<double>(
        [&](TapeT<double>& t) {
            VarT<double> x = t.param(ps, 0);
            return t.scale(t.mean_over_axis(t.mul(x, t.constant(c)), 0), 6.0);
        },
        ps, 1e-3);
    REQUIRE(err < 1e-9);
}

TEST_CASE("every op kind passes a finite-difference check on random shapes") {
    Rng rng(17);
    auto check = [&](auto build, std::vector<std::pair<std::string, Shape>> param_shapes,
                     const char* label) {
        ParamStoreT<double> ps;
        for (auto& [name, shape] : param_shapes)
            ps.add(name, random_array<double>(shape, rng, 0.5));
        double err = grad_check<double>(
            [&](TapeT<double>& t) { return build(t, ps); }, ps, 1e-4);
        INFO(label);
        REQUIRE(err < 1e-3);
    };

    auto reduce = [](TapeT<double>& t, VarT<double> v) {
        Shape flat{static_cast<int>(v.value().numel())};
        return t.mean_over_axis(t.reshape(v, flat), 0);
    };

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.matmul(t.param(ps, 0), t.param(ps, 1)));
    }, {{"a", {3, 4}}, {"b", {4, 2}}}, "matmul");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.matmul(t.param(ps, 0), t.param(ps, 1), true));
    }, {{"a", {3, 4}}, {"b", {2, 4}}}, "matmul transpose_b");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul(t.add(t.param(ps, 0), t.param(ps, 1)), t.param(ps, 0)));
    }, {{"a", {2, 3}}, {"b", {2, 3}}}, "add/mul");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul_rowvec(t.add_rowvec(t.param(ps, 0), t.param(ps, 1)), t.param(ps, 1)));
    }, {{"x", {3, 4}}, {"v", {4}}}, "add_rowvec/mul_rowvec");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul_colvec(t.param(ps, 0), t.param(ps, 1)));
    }, {{"x", {3, 4}}, {"v", {3}}}, "mul_colvec");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.concat({t.param(ps, 0), t.param(ps, 1)}, 1));
    }, {{"a", {2, 2}}, {"b", {2, 3}}}, "concat axis1");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.slice(t.param(ps, 0), 1, 1, 2));
    }, {{"x", {2, 4, 2}}}, "slice axis1");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.transpose_last2(t.param(ps, 0)));
    }, {{"x", {2, 3, 4}}}, "transpose_last2");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.max_over_axis(t.param(ps, 0), 1));
    }, {{"x", {3, 5, 2}}}, "max_over_axis");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.conv1d_depthwise(t.param(ps, 0), t.param(ps, 1), 0));
    }, {{"x", {2, 5, 3}}, {"k", {3, 3}}}, "conv same");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.conv1d_depthwise(t.param(ps, 0), t.param(ps, 1), 1));
    }, {{"x", {2, 5, 3}}, {"k", {3, 4}}}, "conv causal");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.sigmoid(t.param(ps, 0)));
    }, {{"x", {4, 3}}}, "sigmoid");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.tanh_(t.param(ps, 0)));
    }, {{"x", {4, 3}}}, "tanh");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.softplus(t.param(ps, 0)));
    }, {{"x", {4, 3}}}, "softplus");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.exp_(t.param(ps, 0)));
    }, {{"x", {4, 3}}}, "exp");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.softmax_lastdim(t.param(ps, 0)));
    }, {{"x", {3, 5}}}, "softmax");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul(t.repeat_cols(t.param(ps, 0), 3), t.param(ps, 1)));
    }, {{"x", {2, 2}}, {"y", {2, 6}}}, "repeat_cols");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul(t.tile_cols(t.param(ps, 0), 3), t.param(ps, 1)));
    }, {{"x", {2, 2}}, {"y", {2, 6}}}, "tile_cols");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.group_sum_cols(t.mul(t.param(ps, 0), t.param(ps, 0)), 2));
    }, {{"x", {2, 6}}}, "group_sum_cols");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.mul(t.repeat_rows(t.param(ps, 0), 2), t.param(ps, 1)));
    }, {{"x", {2, 3}}, {"y", {4, 3}}}, "repeat_rows");

    check([&](TapeT<double>& t, ParamStoreT<double>& ps) {
        return reduce(t, t.relu(t.add_scalar(t.param(ps, 0), 0.05)));
    }, {{"x", {4, 3}}}, "relu/add_scalar");
}

TEST_CASE("forward replay is bitwise deterministic") {
    Rng rng(23);
    Array a = random_array<float>({8, 8}, rng);
    Array b = random_array<float>({8, 8}, rng);
    auto run = [&]() {
        Tape t;
        Var out = t.tanh_(t.matmul(t.constant(a), t.constant(b)));
        return out.value().data;
    };
    REQUIRE(run() == run());
}
