#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <vector>

#include "polarsynth/errors.hpp"

namespace polarsynth {

using cplx = std::complex<double>;

// Dense row-major 2D array. Index order is (row, col) = (y, x).
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw DomainError("Grid: negative dimensions");
    }

    static Grid from_fn(int rows, int cols, const std::function<T(int, int)>& fn) {
        Grid g(rows, cols);
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x) g(y, x) = fn(y, x);
        return g;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    T& operator()(int y, int x) { return data_[static_cast<size_t>(y) * cols_ + x]; }
    const T& operator()(int y, int x) const { return data_[static_cast<size_t>(y) * cols_ + x]; }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Grid& operator+=(const Grid& o) {
        require_same(o);
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Grid& operator-=(const Grid& o) {
        require_same(o);
        for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Grid& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    void require_same(const Grid& o) const {
        if (!same_shape(o)) throw DomainError("Grid: shape mismatch");
    }

private:
    int rows_ = 0, cols_ = 0;
    std::vector<T> data_;
};

using RGrid = Grid<double>;
using CGrid = Grid<cplx>;

// Physical coordinate of sample `i` on an n-sample axis: (i - n/2)*pitch + center.
// Integer n/2 keeps the origin on the lattice for every parity.
inline double axis_coord(int i, int n, double pitch, double center = 0.0) {
    return (i - n / 2) * pitch + center;
}

inline double sum(const RGrid& g) {
    double s = 0;
    for (size_t i = 0; i < g.size(); ++i) s += g[i];
    return s;
}

inline double dot(const RGrid& a, const RGrid& b) {
    a.require_same(b);
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm_l2(const RGrid& g) { return std::sqrt(dot(g, g)); }

inline double norm_l1(const RGrid& g) {
    double s = 0;
    for (size_t i = 0; i < g.size(); ++i) s += std::abs(g[i]);
    return s;
}

inline double max_abs(const RGrid& g) {
    double m = 0;
    for (size_t i = 0; i < g.size(); ++i) m = std::max(m, std::abs(g[i]));
    return m;
}

inline double max_val(const RGrid& g) {
    double m = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < g.size(); ++i) m = std::max(m, g[i]);
    return m;
}

inline double min_val(const RGrid& g) {
    double m = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < g.size(); ++i) m = std::min(m, g[i]);
    return m;
}

inline RGrid abs2(const CGrid& u) {
    RGrid out(u.rows(), u.cols());
    for (size_t i = 0; i < u.size(); ++i) out[i] = std::norm(u[i]);
    return out;
}

inline RGrid arg(const CGrid& u) {
    RGrid out(u.rows(), u.cols());
    for (size_t i = 0; i < u.size(); ++i) out[i] = std::arg(u[i]);
    return out;
}

inline double max_abs(const CGrid& g) {
    double m = 0;
    for (size_t i = 0; i < g.size(); ++i) m = std::max(m, std::abs(g[i]));
    return m;
}

inline bool all_finite(const RGrid& g) {
    for (size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i])) return false;
    return true;
}

} // namespace polarsynth
