#ifndef DIFFGNSS_TAPE_HPP
#define DIFFGNSS_TAPE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "diffgnss/array.hpp"

namespace diffgnss {

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    MatMul,
    Add,
    Mul,
    AddRowVec,
    MulRowVec,
    MulColVec,
    Scale,
    AddScalar,
    Concat,
    Slice,
    Reshape,
    TransposeLast2,
    MeanAxis,
    MaxAxis,
    Conv1dDepthwise,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Softmax,
    RepeatCols,
    TileCols,
    GroupSumCols,
    RepeatRows,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::AddRowVec: return "add_rowvec";
        case Op::MulRowVec: return "mul_rowvec";
        case Op::MulColVec: return "mul_colvec";
        case Op::Scale: return "elementwise_scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Reshape: return "reshape";
        case Op::TransposeLast2: return "transpose_last2";
        case Op::MeanAxis: return "mean_over_axis";
        case Op::MaxAxis: return "max_over_axis";
        case Op::Conv1dDepthwise: return "conv1d_depthwise";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Softplus: return "softplus";
        case Op::Exp: return "exp";
        case Op::Softmax: return "softmax";
        case Op::RepeatCols: return "repeat_cols";
        case Op::TileCols: return "tile_cols";
        case Op::GroupSumCols: return "group_sum_cols";
        case Op::RepeatRows: return "repeat_rows";
    }
    return "?";
}

// Named parameter collection; registration order is the canonical order used
// for checkpoints and optimizer state.
template <class S>
struct ParamStoreT {
    std::vector<std::string> names;
    std::vector<ArrayT<S>> values;
    std::unordered_map<std::string, int> index;

    int add(const std::string& name, ArrayT<S> value) {
        if (index.count(name))
            throw std::invalid_argument("duplicate parameter name: " + name);
        int slot = static_cast<int>(values.size());
        index.emplace(name, slot);
        names.push_back(name);
        values.push_back(std::move(value));
        return slot;
    }
    int find(const std::string& name) const {
        auto it = index.find(name);
        return it == index.end() ? -1 : it->second;
    }
    ArrayT<S>& operator[](int slot) { return values[static_cast<std::size_t>(slot)]; }
    const ArrayT<S>& operator[](int slot) const { return values[static_cast<std::size_t>(slot)]; }
    std::size_t size() const { return values.size(); }
    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }
};

template <class S>
struct NodeT {
    Op op = Op::Constant;
    std::vector<int> inputs;
    int a0 = 0, a1 = 0, a2 = 0;  // axis / start / len / mode, op-dependent
    S s0 = S(0);                 // scalar attr
    ArrayT<S> value;
    ArrayT<S> grad;              // empty until touched by backward
    std::vector<int> iaux;       // argmax indices and the like
    bool requires_grad = false;
    int param_slot = -1;
};

template <class S>
class TapeT;

template <class S>
struct VarT {
    TapeT<S>* tape = nullptr;
    int id = -1;

    const ArrayT<S>& value() const;
    const Shape& shape() const { return value().shape; }
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Single-threaded by construction; build one tape per
// forward pass (or reset between passes).
template <class S>
class TapeT {
public:
    bool check_nonfinite = true;

    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    void reset() {
        nodes_.clear();
        param_nodes_.clear();
        backward_done_ = false;
    }

    std::size_t size() const { return nodes_.size(); }
    NodeT<S>& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const NodeT<S>& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    VarT<S> constant(ArrayT<S> value) {
        return push(Op::Constant, {}, std::move(value), false);
    }

    VarT<S> constant_scalar(S v) { return constant(scalar_array<S>(v)); }

    // Leaf bound to a parameter store slot; repeated use of the same slot on
    // one tape returns the same node so gradients accumulate in one place.
    VarT<S> param(ParamStoreT<S>& store, int slot) {
        auto key = std::make_pair(static_cast<const void*>(&store), slot);
        auto it = param_nodes_.find(key);
        if (it != param_nodes_.end()) return VarT<S>{this, it->second};
        VarT<S> v = push(Op::Leaf, {}, store[slot], recording_);
        node(v.id).param_slot = slot;
        param_nodes_.emplace(key, v.id);
        return v;
    }

    // ---- backward ----

    void backward(VarT<S> loss) {
        if (backward_done_)
            throw std::logic_error("backward called twice without tape reset");
        if (!recording_)
            throw std::logic_error("backward on a non-recording tape");
        if (loss.value().numel() != 1)
            throw ShapeError("backward requires a scalar loss, got shape " +
                             shape_str(loss.value().shape));
        NodeT<S>& ln = node(loss.id);
        ln.grad = ArrayT<S>(ln.value.shape, S(1));
        for (int i = loss.id; i >= 0; --i) {
            NodeT<S>& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || n.grad.data.empty()) continue;
            backward_node(n);
        }
        backward_done_ = true;
    }

    // Gradient for every parameter in the store, keyed by name. Parameters
    // that never joined the graph come back all-zero and are listed in
    // `disconnected` when the caller asks for them.
    std::map<std::string, ArrayT<S>> collect_gradients(
        const ParamStoreT<S>& store, std::vector<std::string>* disconnected = nullptr) const {
        std::map<std::string, ArrayT<S>> out;
        for (std::size_t slot = 0; slot < store.size(); ++slot) {
            auto key = std::make_pair(static_cast<const void*>(&store), static_cast<int>(slot));
            auto it = param_nodes_.find(key);
            const std::string& name = store.names[slot];
            if (it != param_nodes_.end() && !nodes_[static_cast<std::size_t>(it->second)].grad.data.empty()) {
                out.emplace(name, nodes_[static_cast<std::size_t>(it->second)].grad);
            } else {
                out.emplace(name, ArrayT<S>(store[static_cast<int>(slot)].shape, S(0)));
                if (disconnected) disconnected->push_back(name);
            }
        }
        return out;
    }

    // ---- forward ops ----

    VarT<S> matmul(VarT<S> a, VarT<S> b, bool transpose_b = false) {
        const ArrayT<S>& A = a.value();
        const ArrayT<S>& B = b.value();
        if (B.ndim() != 2)
            throw ShapeError(std::string("matmul: rhs must be 2-D, got ") + shape_str(B.shape));
        int M = A.rows(), K = A.cols();
        int Bk = transpose_b ? B.dim(1) : B.dim(0);
        int N = transpose_b ? B.dim(0) : B.dim(1);
        if (K != Bk)
            throw ShapeError(std::string("matmul: inner dims differ, lhs ") + shape_str(A.shape) +
                             " rhs " + shape_str(B.shape) +
                             (transpose_b ? " (transposed)" : ""));
        Shape os(A.shape.begin(), A.shape.end());
        if (os.empty()) os.push_back(1);
        os.back() = N;
        ArrayT<S> out(os);
        const S* pa = A.data.data();
        const S* pb = B.data.data();
        S* po = out.data.data();
        if (!transpose_b) {
            for (int i = 0; i < M; ++i) {
                const S* arow = pa + static_cast<std::size_t>(i) * K;
                S* orow = po + static_cast<std::size_t>(i) * N;
                for (int k = 0; k < K; ++k) {
                    S av = arow[k];
                    if (av == S(0)) continue;
                    const S* brow = pb + static_cast<std::size_t>(k) * N;
                    for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
                }
            }
        } else {
            for (int i = 0; i < M; ++i) {
                const S* arow = pa + static_cast<std::size_t>(i) * K;
                S* orow = po + static_cast<std::size_t>(i) * N;
                for (int j = 0; j < N; ++j) {
                    const S* brow = pb + static_cast<std::size_t>(j) * K;
                    S acc = S(0);
                    for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
                    orow[j] = acc;
                }
            }
        }
        return push(Op::MatMul, {a.id, b.id}, std::move(out), needs(a, b), transpose_b ? 1 : 0);
    }

    VarT<S> add(VarT<S> a, VarT<S> b) {
        require_same_shape("add", a, b);
        ArrayT<S> out = a.value();
        const auto& bd = b.value().data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
        return push(Op::Add, {a.id, b.id}, std::move(out), needs(a, b));
    }

    VarT<S> mul(VarT<S> a, VarT<S> b) {
        require_same_shape("mul", a, b);
        ArrayT<S> out = a.value();
        const auto& bd = b.value().data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
        return push(Op::Mul, {a.id, b.id}, std::move(out), needs(a, b));
    }

    VarT<S> add_rowvec(VarT<S> x, VarT<S> v) {
        int C = x.value().cols();
        if (static_cast<int>(v.value().numel()) != C)
            throw ShapeError(std::string("add_rowvec: vector length ") +
                             std::to_string(v.value().numel()) + " vs columns " + std::to_string(C));
        ArrayT<S> out = x.value();
        int M = out.rows();
        const S* pv = v.value().data.data();
        for (int m = 0; m < M; ++m) {
            S* row = out.data.data() + static_cast<std::size_t>(m) * C;
            for (int c = 0; c < C; ++c) row[c] += pv[c];
        }
        return push(Op::AddRowVec, {x.id, v.id}, std::move(out), needs(x, v));
    }

    VarT<S> mul_rowvec(VarT<S> x, VarT<S> v) {
        int C = x.value().cols();
        if (static_cast<int>(v.value().numel()) != C)
            throw ShapeError(std::string("mul_rowvec: vector length ") +
                             std::to_string(v.value().numel()) + " vs columns " + std::to_string(C));
        ArrayT<S> out = x.value();
        int M = out.rows();
        const S* pv = v.value().data.data();
        for (int m = 0; m < M; ++m) {
            S* row = out.data.data() + static_cast<std::size_t>(m) * C;
            for (int c = 0; c < C; ++c) row[c] *= pv[c];
        }
        return push(Op::MulRowVec, {x.id, v.id}, std::move(out), needs(x, v));
    }

    VarT<S> mul_colvec(VarT<S> x, VarT<S> v) {
        int M = x.value().rows(), C = x.value().cols();
        if (static_cast<int>(v.value().numel()) != M)
            throw ShapeError(std::string("mul_colvec: vector length ") +
                             std::to_string(v.value().numel()) + " vs rows " + std::to_string(M));
        ArrayT<S> out = x.value();
        const S* pv = v.value().data.data();
        for (int m = 0; m < M; ++m) {
            S* row = out.data.data() + static_cast<std::size_t>(m) * C;
            for (int c = 0; c < C; ++c) row[c] *= pv[m];
        }
        return push(Op::MulColVec, {x.id, v.id}, std::move(out), needs(x, v));
    }

    VarT<S> scale(VarT<S> x, S s) {
        ArrayT<S> out = x.value();
        for (S& v : out.data) v *= s;
        VarT<S> r = push(Op::Scale, {x.id}, std::move(out), needs(x));
        node(r.id).s0 = s;
        return r;
    }

    VarT<S> add_scalar(VarT<S> x, S s) {
        ArrayT<S> out = x.value();
        for (S& v : out.data) v += s;
        VarT<S> r = push(Op::AddScalar, {x.id}, std::move(out), needs(x));
        node(r.id).s0 = s;
        return r;
    }

    VarT<S> sub(VarT<S> a, VarT<S> b) { return add(a, scale(b, S(-1))); }

    VarT<S> concat(const std::vector<VarT<S>>& xs, int axis) {
        if (xs.empty()) throw ShapeError("concat: no inputs");
        const Shape& s0 = xs[0].value().shape;
        int nd = static_cast<int>(s0.size());
        if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);
        for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);
        int total_n = 0;
        for (const auto& x : xs) {
            const Shape& s = x.value().shape;
            if (static_cast<int>(s.size()) != nd)
                throw ShapeError("concat: rank mismatch");
            for (int i = 0; i < nd; ++i)
                if (i != axis && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
                    throw ShapeError(std::string("concat: shape mismatch at input, ") +
                                     shape_str(s) + " vs " + shape_str(s0));
            total_n += s[static_cast<std::size_t>(axis)];
        }
        Shape os = s0;
        os[static_cast<std::size_t>(axis)] = total_n;
        ArrayT<S> out(os);
        std::size_t off = 0;
        for (const auto& x : xs) {
            const ArrayT<S>& xv = x.value();
            std::size_t n_i = static_cast<std::size_t>(xv.shape[static_cast<std::size_t>(axis)]) * inner;
            for (std::size_t o = 0; o < outer; ++o) {
                const S* src = xv.data.data() + o * n_i;
                S* dst = out.data.data() + o * static_cast<std::size_t>(total_n) * inner + off;
                std::copy(src, src + n_i, dst);
            }
            off += n_i;
        }
        std::vector<int> ids;
        for (const auto& x : xs) ids.push_back(x.id);
        bool rg = false;
        for (const auto& x : xs) rg = rg || needs(x);
        VarT<S> r = push(Op::Concat, ids, std::move(out), rg, axis);
        return r;
    }

    VarT<S> concat2(VarT<S> a, VarT<S> b, int axis) { return concat({a, b}, axis); }

    VarT<S> slice(VarT<S> x, int axis, int start, int len) {
        const Shape& s = x.value().shape;
        int nd = static_cast<int>(s.size());
        if (axis < 0 || axis >= nd) throw ShapeError("slice: axis out of range");
        int n = s[static_cast<std::size_t>(axis)];
        if (start < 0 || len <= 0 || start + len > n)
            throw ShapeError("slice: window [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") outside axis of length " +
                             std::to_string(n));
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
        for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
        Shape os = s;
        os[static_cast<std::size_t>(axis)] = len;
        ArrayT<S> out(os);
        for (std::size_t o = 0; o < outer; ++o) {
            const S* src = x.value().data.data() + (o * static_cast<std::size_t>(n) + static_cast<std::size_t>(start)) * inner;
            S* dst = out.data.data() + o * static_cast<std::size_t>(len) * inner;
            std::copy(src, src + static_cast<std::size_t>(len) * inner, dst);
        }
        return push(Op::Slice, {x.id}, std::move(out), needs(x), axis, start, len);
    }

    VarT<S> reshape(VarT<S> x, Shape new_shape) {
        if (shape_numel(new_shape) != x.value().numel())
            throw ShapeError(std::string("reshape: ") + shape_str(x.value().shape) + " to " +
                             shape_str(new_shape) + " changes element count");
        ArrayT<S> out(std::move(new_shape), x.value().data);
        return push(Op::Reshape, {x.id}, std::move(out), needs(x));
    }

    VarT<S> transpose_last2(VarT<S> x) {
        const Shape& s = x.value().shape;
        if (s.size() < 2) throw ShapeError("transpose_last2: needs >= 2 dims");
        int A = s[s.size() - 2], B = s[s.size() - 1];
        std::size_t M = x.value().numel() / (static_cast<std::size_t>(A) * B);
        Shape os = s;
        std::swap(os[os.size() - 2], os[os.size() - 1]);
        ArrayT<S> out(os);
        for (std::size_t m = 0; m < M; ++m) {
            const S* src = x.value().data.data() + m * static_cast<std::size_t>(A) * B;
            S* dst = out.data.data() + m * static_cast<std::size_t>(A) * B;
            for (int i = 0; i < A; ++i)
                for (int j = 0; j < B; ++j)
                    dst[static_cast<std::size_t>(j) * A + i] = src[static_cast<std::size_t>(i) * B + j];
        }
        return push(Op::TransposeLast2, {x.id}, std::move(out), needs(x));
    }

    VarT<S> mean_over_axis(VarT<S> x, int axis) {
        auto [outer, n, inner, os] = reduce_dims("mean_over_axis", x, axis);
        ArrayT<S> out(os);
        const S* px = x.value().data.data();
        S invn = S(1) / static_cast<S>(n);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                S acc = S(0);
                for (std::size_t k = 0; k < static_cast<std::size_t>(n); ++k)
                    acc += px[(o * n + k) * inner + i];
                out.data[o * inner + i] = acc * invn;
            }
        return push(Op::MeanAxis, {x.id}, std::move(out), needs(x), axis, n);
    }

    VarT<S> max_over_axis(VarT<S> x, int axis) {
        auto [outer, n, inner, os] = reduce_dims("max_over_axis", x, axis);
        ArrayT<S> out(os);
        std::vector<int> arg(out.numel());
        const S* px = x.value().data.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                S best = px[o * n * inner + i];
                int bi = 0;
                for (std::size_t k = 1; k < static_cast<std::size_t>(n); ++k) {
                    S v = px[(o * n + k) * inner + i];
                    if (v > best) { best = v; bi = static_cast<int>(k); }
                }
                out.data[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        VarT<S> r = push(Op::MaxAxis, {x.id}, std::move(out), needs(x), axis, n);
        node(r.id).iaux = std::move(arg);
        return r;
    }

    // Depthwise temporal convolution on (M, T, C) with per-channel kernels
    // (C, W). pad 0 = centered zero pad, pad 1 = causal (left) pad.
    VarT<S> conv1d_depthwise(VarT<S> x, VarT<S> kernel, int pad_mode = 0) {
        const Shape& s = x.value().shape;
        if (s.size() != 3) throw ShapeError("conv1d_depthwise: input must be (M,T,C)");
        int M = s[0], T = s[1], C = s[2];
        const Shape& ks = kernel.value().shape;
        if (ks.size() != 2 || ks[0] != C)
            throw ShapeError(std::string("conv1d_depthwise: kernel must be (C,W) with C=") +
                             std::to_string(C) + ", got " + shape_str(ks));
        int W = ks[1];
        int off = pad_mode == 1 ? W - 1 : (W - 1) / 2;
        ArrayT<S> out(s);
        const S* px = x.value().data.data();
        const S* pk = kernel.value().data.data();
        for (int m = 0; m < M; ++m)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (int w = 0; w < W; ++w) {
                        int tin = t + w - off;
                        if (tin < 0 || tin >= T) continue;
                        acc += pk[static_cast<std::size_t>(c) * W + w] *
                               px[(static_cast<std::size_t>(m) * T + tin) * C + c];
                    }
                    out.data[(static_cast<std::size_t>(m) * T + t) * C + c] = acc;
                }
        return push(Op::Conv1dDepthwise, {x.id, kernel.id}, std::move(out), needs(x, kernel),
                    pad_mode, W);
    }

    VarT<S> sigmoid(VarT<S> x) { return unary(Op::Sigmoid, x, [](S v) {
        return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v)); }); }
    VarT<S> tanh_(VarT<S> x) { return unary(Op::Tanh, x, [](S v) { return std::tanh(v); }); }
    VarT<S> relu(VarT<S> x) { return unary(Op::Relu, x, [](S v) { return v > S(0) ? v : S(0); }); }
    VarT<S> softplus(VarT<S> x) { return unary(Op::Softplus, x, [](S v) {
        if (v > S(20)) return v;
        if (v < S(-20)) return std::exp(v);
        return std::log1p(std::exp(v)); }); }
    VarT<S> exp_(VarT<S> x) { return unary(Op::Exp, x, [](S v) { return std::exp(v); }); }

    VarT<S> silu(VarT<S> x) { return mul(x, sigmoid(x)); }

    VarT<S> softmax_lastdim(VarT<S> x) {
        int C = x.value().cols(), M = x.value().rows();
        ArrayT<S> out = x.value();
        for (int m = 0; m < M; ++m) {
            S* row = out.data.data() + static_cast<std::size_t>(m) * C;
            S mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            S sum = S(0);
            for (int c = 0; c < C; ++c) { row[c] = std::exp(row[c] - mx); sum += row[c]; }
            S inv = S(1) / sum;
            for (int c = 0; c < C; ++c) row[c] *= inv;
        }
        return push(Op::Softmax, {x.id}, std::move(out), needs(x));
    }

    // (M,K) -> (M,K*r), each column value repeated r times in place.
    VarT<S> repeat_cols(VarT<S> x, int r) {
        int M = x.value().rows(), K = x.value().cols();
        ArrayT<S> out(Shape{M, K * r});
        for (int m = 0; m < M; ++m) {
            const S* src = x.value().data.data() + static_cast<std::size_t>(m) * K;
            S* dst = out.data.data() + static_cast<std::size_t>(m) * K * r;
            for (int k = 0; k < K; ++k)
                for (int j = 0; j < r; ++j) dst[k * r + j] = src[k];
        }
        return push(Op::RepeatCols, {x.id}, std::move(out), needs(x), r);
    }

    // (M,K) -> (M,r*K), whole row block tiled r times.
    VarT<S> tile_cols(VarT<S> x, int r) {
        int M = x.value().rows(), K = x.value().cols();
        ArrayT<S> out(Shape{M, r * K});
        for (int m = 0; m < M; ++m) {
            const S* src = x.value().data.data() + static_cast<std::size_t>(m) * K;
            S* dst = out.data.data() + static_cast<std::size_t>(m) * K * r;
            for (int j = 0; j < r; ++j)
                std::copy(src, src + K, dst + static_cast<std::size_t>(j) * K);
        }
        return push(Op::TileCols, {x.id}, std::move(out), needs(x), r);
    }

    // (M,K*r) -> (M,K), summing each consecutive group of r columns.
    VarT<S> group_sum_cols(VarT<S> x, int r) {
        int M = x.value().rows(), Cr = x.value().cols();
        if (Cr % r != 0)
            throw ShapeError("group_sum_cols: columns " + std::to_string(Cr) +
                             " not divisible by group " + std::to_string(r));
        int K = Cr / r;
        ArrayT<S> out(Shape{M, K});
        for (int m = 0; m < M; ++m) {
            const S* src = x.value().data.data() + static_cast<std::size_t>(m) * Cr;
            S* dst = out.data.data() + static_cast<std::size_t>(m) * K;
            for (int k = 0; k < K; ++k) {
                S acc = S(0);
                for (int j = 0; j < r; ++j) acc += src[k * r + j];
                dst[k] = acc;
            }
        }
        return push(Op::GroupSumCols, {x.id}, std::move(out), needs(x), r);
    }

    // (M,C) -> (M*r,C), row m repeated r consecutive times.
    VarT<S> repeat_rows(VarT<S> x, int r) {
        int M = x.value().rows(), C = x.value().cols();
        ArrayT<S> out(Shape{M * r, C});
        for (int m = 0; m < M; ++m) {
            const S* src = x.value().data.data() + static_cast<std::size_t>(m) * C;
            for (int j = 0; j < r; ++j)
                std::copy(src, src + C,
                          out.data.data() + (static_cast<std::size_t>(m) * r + j) * C);
        }
        return push(Op::RepeatRows, {x.id}, std::move(out), needs(x), r);
    }

private:
    std::vector<NodeT<S>> nodes_;
    std::map<std::pair<const void*, int>, int> param_nodes_;
    bool recording_ = true;
    bool backward_done_ = false;

    bool needs(VarT<S> a) const { return recording_ && node(a.id).requires_grad; }
    bool needs(VarT<S> a, VarT<S> b) const { return needs(a) || needs(b); }

    void require_same_shape(const char* op, VarT<S> a, VarT<S> b) const {
        if (!same_shape(a.value(), b.value()))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value().shape) +
                             " vs " + shape_str(b.value().shape));
    }

    std::tuple<std::size_t, int, std::size_t, Shape> reduce_dims(const char* op, VarT<S> x,
                                                                 int axis) const {
        const Shape& s = x.value().shape;
        int nd = static_cast<int>(s.size());
        if (axis < 0 || axis >= nd) throw ShapeError(std::string(op) + ": axis out of range");
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
        for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
        Shape os;
        for (int i = 0; i < nd; ++i)
            if (i != axis) os.push_back(s[static_cast<std::size_t>(i)]);
        if (os.empty()) os.push_back(1);
        return {outer, s[static_cast<std::size_t>(axis)], inner, os};
    }

    template <class F>
    VarT<S> unary(Op op, VarT<S> x, F&& f) {
        ArrayT<S> out = x.value();
        for (S& v : out.data) v = f(v);
        return push(op, {x.id}, std::move(out), needs(x));
    }

    VarT<S> push(Op op, std::vector<int> inputs, ArrayT<S> value, bool requires_grad,
                 int a0 = 0, int a1 = 0, int a2 = 0) {
        if (check_nonfinite && op != Op::Constant && op != Op::Leaf && value.has_nonfinite())
            throw NonFiniteError(std::string(op_name(op)) + " produced a non-finite value");
        NodeT<S> n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.a0 = a0; n.a1 = a1; n.a2 = a2;
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        return VarT<S>{this, id};
    }

    ArrayT<S>& grad_of(int id) {
        NodeT<S>& n = node(id);
        if (n.grad.data.empty()) n.grad = ArrayT<S>(n.value.shape, S(0));
        return n.grad;
    }
    bool wants(int id) const { return node(id).requires_grad; }

    void backward_node(NodeT<S>& n) {
        const ArrayT<S>& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Constant:
                break;
            case Op::MatMul: {
                int aid = n.inputs[0], bid = n.inputs[1];
                const ArrayT<S>& A = node(aid).value;
                const ArrayT<S>& B = node(bid).value;
                bool tb = n.a0 != 0;
                int M = A.rows(), K = A.cols(), N = n.value.cols();
                if (wants(aid)) {
                    ArrayT<S>& ga = grad_of(aid);
                    if (!tb) {
                        for (int i = 0; i < M; ++i)
                            for (int k = 0; k < K; ++k) {
                                S acc = S(0);
                                const S* grow = g.data.data() + static_cast<std::size_t>(i) * N;
                                const S* brow = B.data.data() + static_cast<std::size_t>(k) * N;
                                for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                                ga.data[static_cast<std::size_t>(i) * K + k] += acc;
                            }
                    } else {
                        for (int i = 0; i < M; ++i) {
                            const S* grow = g.data.data() + static_cast<std::size_t>(i) * N;
                            S* garow = ga.data.data() + static_cast<std::size_t>(i) * K;
                            for (int j = 0; j < N; ++j) {
                                S gv = grow[j];
                                if (gv == S(0)) continue;
                                const S* brow = B.data.data() + static_cast<std::size_t>(j) * K;
                                for (int k = 0; k < K; ++k) garow[k] += gv * brow[k];
                            }
                        }
                    }
                }
                if (wants(bid)) {
                    ArrayT<S>& gb = grad_of(bid);
                    if (!tb) {
                        for (int i = 0; i < M; ++i) {
                            const S* arow = A.data.data() + static_cast<std::size_t>(i) * K;
                            const S* grow = g.data.data() + static_cast<std::size_t>(i) * N;
                            for (int k = 0; k < K; ++k) {
                                S av = arow[k];
                                if (av == S(0)) continue;
                                S* gbrow = gb.data.data() + static_cast<std::size_t>(k) * N;
                                for (int j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                            }
                        }
                    } else {
                        for (int i = 0; i < M; ++i) {
                            const S* arow = A.data.data() + static_cast<std::size_t>(i) * K;
                            const S* grow = g.data.data() + static_cast<std::size_t>(i) * N;
                            for (int j = 0; j < N; ++j) {
                                S gv = grow[j];
                                if (gv == S(0)) continue;
                                S* gbrow = gb.data.data() + static_cast<std::size_t>(j) * K;
                                for (int k = 0; k < K; ++k) gbrow[k] += gv * arow[k];
                            }
                        }
                    }
                }
                break;
            }
            case Op::Add: {
                for (int side = 0; side < 2; ++side) {
                    int id = n.inputs[static_cast<std::size_t>(side)];
                    if (!wants(id)) continue;
                    ArrayT<S>& gi = grad_of(id);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gi.data[i] += g.data[i];
                }
                break;
            }
            case Op::Mul: {
                int aid = n.inputs[0], bid = n.inputs[1];
                if (wants(aid)) {
                    ArrayT<S>& ga = grad_of(aid);
                    const auto& bd = node(bid).value.data;
                    for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bd[i];
                }
                if (wants(bid)) {
                    ArrayT<S>& gb = grad_of(bid);
                    const auto& ad = node(aid).value.data;
                    for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * ad[i];
                }
                break;
            }
            case Op::AddRowVec: {
                int xid = n.inputs[0], vid = n.inputs[1];
                int C = n.value.cols(), M = n.value.rows();
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
                }
                if (wants(vid)) {
                    ArrayT<S>& gv = grad_of(vid);
                    for (int m = 0; m < M; ++m) {
                        const S* grow = g.data.data() + static_cast<std::size_t>(m) * C;
                        for (int c = 0; c < C; ++c) gv.data[static_cast<std::size_t>(c)] += grow[c];
                    }
                }
                break;
            }
            case Op::MulRowVec: {
                int xid = n.inputs[0], vid = n.inputs[1];
                int C = n.value.cols(), M = n.value.rows();
                const ArrayT<S>& X = node(xid).value;
                const ArrayT<S>& V = node(vid).value;
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (int m = 0; m < M; ++m)
                        for (int c = 0; c < C; ++c)
                            gx.data[static_cast<std::size_t>(m) * C + c] +=
                                g.data[static_cast<std::size_t>(m) * C + c] * V.data[static_cast<std::size_t>(c)];
                }
                if (wants(vid)) {
                    ArrayT<S>& gv = grad_of(vid);
                    for (int m = 0; m < M; ++m)
                        for (int c = 0; c < C; ++c)
                            gv.data[static_cast<std::size_t>(c)] +=
                                g.data[static_cast<std::size_t>(m) * C + c] * X.data[static_cast<std::size_t>(m) * C + c];
                }
                break;
            }
            case Op::MulColVec: {
                int xid = n.inputs[0], vid = n.inputs[1];
                int C = n.value.cols(), M = n.value.rows();
                const ArrayT<S>& X = node(xid).value;
                const ArrayT<S>& V = node(vid).value;
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (int m = 0; m < M; ++m) {
                        S vm = V.data[static_cast<std::size_t>(m)];
                        for (int c = 0; c < C; ++c)
                            gx.data[static_cast<std::size_t>(m) * C + c] +=
                                g.data[static_cast<std::size_t>(m) * C + c] * vm;
                    }
                }
                if (wants(vid)) {
                    ArrayT<S>& gv = grad_of(vid);
                    for (int m = 0; m < M; ++m) {
                        S acc = S(0);
                        for (int c = 0; c < C; ++c)
                            acc += g.data[static_cast<std::size_t>(m) * C + c] * X.data[static_cast<std::size_t>(m) * C + c];
                        gv.data[static_cast<std::size_t>(m)] += acc;
                    }
                }
                break;
            }
            case Op::Scale: {
                int xid = n.inputs[0];
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * n.s0;
                }
                break;
            }
            case Op::AddScalar: {
                int xid = n.inputs[0];
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
                }
                break;
            }
            case Op::Concat: {
                int axis = n.a0;
                const Shape& os = n.value.shape;
                std::size_t outer = 1, inner = 1;
                int nd = static_cast<int>(os.size());
                for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(os[static_cast<std::size_t>(i)]);
                for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(os[static_cast<std::size_t>(i)]);
                std::size_t total_n = static_cast<std::size_t>(os[static_cast<std::size_t>(axis)]) * inner;
                std::size_t off = 0;
                for (int idx : n.inputs) {
                    const ArrayT<S>& xv = node(idx).value;
                    std::size_t n_i = static_cast<std::size_t>(xv.shape[static_cast<std::size_t>(axis)]) * inner;
                    if (wants(idx)) {
                        ArrayT<S>& gx = grad_of(idx);
                        for (std::size_t o = 0; o < outer; ++o) {
                            const S* src = g.data.data() + o * total_n + off;
                            S* dst = gx.data.data() + o * n_i;
                            for (std::size_t i = 0; i < n_i; ++i) dst[i] += src[i];
                        }
                    }
                    off += n_i;
                }
                break;
            }
            case Op::Slice: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int axis = n.a0, start = n.a1, len = n.a2;
                const Shape& xs = node(xid).value.shape;
                int nd = static_cast<int>(xs.size());
                std::size_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                std::size_t nfull = static_cast<std::size_t>(xs[static_cast<std::size_t>(axis)]);
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t o = 0; o < outer; ++o) {
                    const S* src = g.data.data() + o * static_cast<std::size_t>(len) * inner;
                    S* dst = gx.data.data() + (o * nfull + static_cast<std::size_t>(start)) * inner;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i) dst[i] += src[i];
                }
                break;
            }
            case Op::Reshape: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
                break;
            }
            case Op::TransposeLast2: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                const Shape& os = n.value.shape;
                int A = os[os.size() - 2], B = os[os.size() - 1];
                std::size_t M = n.value.numel() / (static_cast<std::size_t>(A) * B);
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t m = 0; m < M; ++m) {
                    const S* src = g.data.data() + m * static_cast<std::size_t>(A) * B;
                    S* dst = gx.data.data() + m * static_cast<std::size_t>(A) * B;
                    for (int i = 0; i < A; ++i)
                        for (int j = 0; j < B; ++j)
                            dst[static_cast<std::size_t>(j) * A + i] += src[static_cast<std::size_t>(i) * B + j];
                }
                break;
            }
            case Op::MeanAxis: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int axis = n.a0, cnt = n.a1;
                const Shape& xs = node(xid).value.shape;
                int nd = static_cast<int>(xs.size());
                std::size_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                S invn = S(1) / static_cast<S>(cnt);
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < static_cast<std::size_t>(cnt); ++k)
                        for (std::size_t i = 0; i < inner; ++i)
                            gx.data[(o * cnt + k) * inner + i] += g.data[o * inner + i] * invn;
                break;
            }
            case Op::MaxAxis: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int axis = n.a0, cnt = n.a1;
                const Shape& xs = node(xid).value.shape;
                int nd = static_cast<int>(xs.size());
                std::size_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(xs[static_cast<std::size_t>(i)]);
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                        int arg = n.iaux[o * inner + i];
                        gx.data[(o * static_cast<std::size_t>(cnt) + static_cast<std::size_t>(arg)) * inner + i] +=
                            g.data[o * inner + i];
                    }
                break;
            }
            case Op::Conv1dDepthwise: {
                int xid = n.inputs[0], kid = n.inputs[1];
                const Shape& s = node(xid).value.shape;
                int M = s[0], T = s[1], C = s[2];
                int W = n.a1;
                int off = n.a0 == 1 ? W - 1 : (W - 1) / 2;
                const ArrayT<S>& X = node(xid).value;
                const ArrayT<S>& K = node(kid).value;
                if (wants(xid)) {
                    ArrayT<S>& gx = grad_of(xid);
                    for (int m = 0; m < M; ++m)
                        for (int t = 0; t < T; ++t)
                            for (int c = 0; c < C; ++c) {
                                S gv = g.data[(static_cast<std::size_t>(m) * T + t) * C + c];
                                if (gv == S(0)) continue;
                                for (int w = 0; w < W; ++w) {
                                    int tin = t + w - off;
                                    if (tin < 0 || tin >= T) continue;
                                    gx.data[(static_cast<std::size_t>(m) * T + tin) * C + c] +=
                                        gv * K.data[static_cast<std::size_t>(c) * W + w];
                                }
                            }
                }
                if (wants(kid)) {
                    ArrayT<S>& gk = grad_of(kid);
                    for (int m = 0; m < M; ++m)
                        for (int t = 0; t < T; ++t)
                            for (int c = 0; c < C; ++c) {
                                S gv = g.data[(static_cast<std::size_t>(m) * T + t) * C + c];
                                if (gv == S(0)) continue;
                                for (int w = 0; w < W; ++w) {
                                    int tin = t + w - off;
                                    if (tin < 0 || tin >= T) continue;
                                    gk.data[static_cast<std::size_t>(c) * W + w] +=
                                        gv * X.data[(static_cast<std::size_t>(m) * T + tin) * C + c];
                                }
                            }
                }
                break;
            }
            case Op::Sigmoid: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    S y = n.value.data[i];
                    gx.data[i] += g.data[i] * y * (S(1) - y);
                }
                break;
            }
            case Op::Tanh: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    S y = n.value.data[i];
                    gx.data[i] += g.data[i] * (S(1) - y * y);
                }
                break;
            }
            case Op::Relu: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                const ArrayT<S>& X = node(xid).value;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    if (X.data[i] > S(0)) gx.data[i] += g.data[i];
                break;
            }
            case Op::Softplus: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                const ArrayT<S>& X = node(xid).value;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    S v = X.data[i];
                    S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
                    gx.data[i] += g.data[i] * sig;
                }
                break;
            }
            case Op::Exp: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                ArrayT<S>& gx = grad_of(xid);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    gx.data[i] += g.data[i] * n.value.data[i];
                break;
            }
            case Op::Softmax: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int C = n.value.cols(), M = n.value.rows();
                ArrayT<S>& gx = grad_of(xid);
                for (int m = 0; m < M; ++m) {
                    const S* y = n.value.data.data() + static_cast<std::size_t>(m) * C;
                    const S* gr = g.data.data() + static_cast<std::size_t>(m) * C;
                    S dot = S(0);
                    for (int c = 0; c < C; ++c) dot += gr[c] * y[c];
                    S* gxr = gx.data.data() + static_cast<std::size_t>(m) * C;
                    for (int c = 0; c < C; ++c) gxr[c] += y[c] * (gr[c] - dot);
                }
                break;
            }
            case Op::RepeatCols: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int r = n.a0;
                int M = node(xid).value.rows(), K = node(xid).value.cols();
                ArrayT<S>& gx = grad_of(xid);
                for (int m = 0; m < M; ++m)
                    for (int k = 0; k < K; ++k) {
                        S acc = S(0);
                        const S* src = g.data.data() + (static_cast<std::size_t>(m) * K + k) * r;
                        for (int j = 0; j < r; ++j) acc += src[j];
                        gx.data[static_cast<std::size_t>(m) * K + k] += acc;
                    }
                break;
            }
            case Op::TileCols: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int r = n.a0;
                int M = node(xid).value.rows(), K = node(xid).value.cols();
                ArrayT<S>& gx = grad_of(xid);
                for (int m = 0; m < M; ++m)
                    for (int j = 0; j < r; ++j) {
                        const S* src = g.data.data() + (static_cast<std::size_t>(m) * r + j) * K;
                        S* dst = gx.data.data() + static_cast<std::size_t>(m) * K;
                        for (int k = 0; k < K; ++k) dst[k] += src[k];
                    }
                break;
            }
            case Op::GroupSumCols: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int r = n.a0;
                int M = n.value.rows(), K = n.value.cols();
                ArrayT<S>& gx = grad_of(xid);
                for (int m = 0; m < M; ++m)
                    for (int k = 0; k < K; ++k) {
                        S gv = g.data[static_cast<std::size_t>(m) * K + k];
                        S* dst = gx.data.data() + (static_cast<std::size_t>(m) * K + k) * r;
                        for (int j = 0; j < r; ++j) dst[j] += gv;
                    }
                break;
            }
            case Op::RepeatRows: {
                int xid = n.inputs[0];
                if (!wants(xid)) break;
                int r = n.a0;
                int M = node(xid).value.rows(), C = node(xid).value.cols();
                ArrayT<S>& gx = grad_of(xid);
                for (int m = 0; m < M; ++m)
                    for (int j = 0; j < r; ++j) {
                        const S* src = g.data.data() + (static_cast<std::size_t>(m) * r + j) * C;
                        S* dst = gx.data.data() + static_cast<std::size_t>(m) * C;
                        for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
                break;
            }
        }
    }
};

template <class S>
const ArrayT<S>& VarT<S>::value() const {
    return tape->node(id).value;
}

// Max relative error between analytic gradients of f and central finite
// differences, over every coordinate of every parameter. f builds a scalar
// loss on the given tape, reading parameters through tape.param().
template <class S, class F>
double grad_check(F&& f, ParamStoreT<S>& params, double eps) {
    TapeT<S> tape;
    VarT<S> loss = f(tape);
    tape.backward(loss);
    auto grads = tape.collect_gradients(params);

    auto eval = [&](void) -> double {
        TapeT<S> t2;
        t2.set_recording(false);
        return static_cast<double>(f(t2).value().data[0]);
    };

    double worst = 0.0;
    for (std::size_t slot = 0; slot < params.size(); ++slot) {
        ArrayT<S>& p = params[static_cast<int>(slot)];
        const ArrayT<S>& ga = grads.at(params.names[slot]);
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            S saved = p.data[i];
            p.data[i] = saved + static_cast<S>(eps);
            double fp = eval();
            p.data[i] = saved - static_cast<S>(eps);
            double fm = eval();
            p.data[i] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double analytic = static_cast<double>(ga.data[i]);
            double rel = std::abs(analytic - numeric) /
                         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

using Array = ArrayT<float>;
using Tape = TapeT<float>;
using Var = VarT<float>;
using ParamStore = ParamStoreT<float>;

}  // namespace diffgnss

#endif  // DIFFGNSS_TAPE_HPP
