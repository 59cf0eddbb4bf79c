#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matcha {

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
    throw TensorError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Dense n-d array, flat row-major storage, shape carried explicitly.
template <class S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;

    Tensor() : shape{0}, data() {}
    explicit Tensor(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
    Tensor(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw TensorError("Tensor: " + shape_str(shape) + " does not hold " +
                              std::to_string(data.size()) + " elements");
    }

    static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
    static Tensor full(Shape sh, S v) {
        Tensor t(std::move(sh));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(S v) { return Tensor({}, {v}); }
    static Tensor vec(std::vector<S> d) {
        Shape sh{d.size()};
        return Tensor(std::move(sh), std::move(d));
    }
    static Tensor from_rows(std::initializer_list<std::initializer_list<S>> rows) {
        std::size_t r = rows.size(), c = rows.begin()->size();
        Tensor t({r, c});
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw TensorError("from_rows: ragged rows");
            for (S v : row) t.data[i++] = v;
        }
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    bool is_scalar() const { return shape.empty(); }

    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }

    S& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    S operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
    S& operator()(std::size_t b, std::size_t i, std::size_t j) {
        return data[(b * shape[1] + i) * shape[2] + j];
    }
    S operator()(std::size_t b, std::size_t i, std::size_t j) const {
        return data[(b * shape[1] + i) * shape[2] + j];
    }
    S& operator[](std::size_t i) { return data[i]; }
    S operator[](std::size_t i) const { return data[i]; }

    S item() const {
        if (data.size() != 1) throw TensorError("item: tensor is not a scalar");
        return data[0];
    }

    // Rank-2 Eigen view (row-major, no copy).
    MapM mat() { return MapM(data.data(), (Eigen::Index)rows(), (Eigen::Index)cols()); }
    CMapM mat() const { return CMapM(data.data(), (Eigen::Index)rows(), (Eigen::Index)cols()); }
    MapM as_mat(std::size_t r, std::size_t c) {
        return MapM(data.data(), (Eigen::Index)r, (Eigen::Index)c);
    }
    CMapM as_mat(std::size_t r, std::size_t c) const {
        return CMapM(data.data(), (Eigen::Index)r, (Eigen::Index)c);
    }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <class S>
bool all_finite(const Tensor<S>& t) {
    for (S v : t.data)
        if (!std::isfinite((double)v)) return false;
    return true;
}

}  // namespace matcha
