#ifndef DIFFGNSS_ARRAY_HPP
#define DIFFGNSS_ARRAY_HPP

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffgnss {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major array. Scalar type is a template parameter so the same
// network code can run in float (training/inference) and double (numeric
// gradient oracles); production code uses the float instantiation.
template <class S>
struct ArrayT {
    Shape shape;
    std::vector<S> data;

    ArrayT() = default;
    explicit ArrayT(Shape sh, S fill = S(0))
        : shape(std::move(sh)), data(shape_numel(shape), fill) {}
    ArrayT(Shape sh, std::vector<S> values) : shape(std::move(sh)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("array data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    // Rows/cols view: last dim is columns, all leading dims flatten to rows.
    int cols() const { return shape.empty() ? 1 : shape.back(); }
    int rows() const {
        if (shape.empty()) return 1;
        return static_cast<int>(numel()) / cols();
    }

    S& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    S at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    bool has_nonfinite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return true;
        return false;
    }
};

template <class S>
ArrayT<S> scalar_array(S v) {
    return ArrayT<S>(Shape{1}, std::vector<S>{v});
}

template <class S>
bool same_shape(const ArrayT<S>& a, const ArrayT<S>& b) {
    return a.shape == b.shape;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_ARRAY_HPP
