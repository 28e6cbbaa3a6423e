#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/types.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <utility>
#include <vector>

namespace fsirb {

// Uniform Cartesian sampling: n[a] samples per axis with spacing h.
// Node grids include both end points; cell grids sit at cell centres.
struct Grid {
    Vec3 origin = Vec3::Zero();
    double h = 1.0;
    std::array<int, 3> n{2, 2, 2};
    bool cell_centered = false;

    static Grid nodes(const Vec3& lo, double h, std::array<int, 3> cells) {
        return Grid{lo, h, {cells[0] + 1, cells[1] + 1, cells[2] + 1}, false};
    }
    static Grid cells(const Vec3& lo, double h, std::array<int, 3> cells) {
        return Grid{lo + Vec3::Constant(0.5 * h), h, cells, true};
    }

    std::size_t size() const {
        return static_cast<std::size_t>(n[0]) * n[1] * n[2];
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(n[0]) * (static_cast<std::size_t>(j) +
                                                 static_cast<std::size_t>(n[1]) * k);
    }
    std::array<int, 3> ijk(std::size_t idx) const {
        const int i = static_cast<int>(idx % n[0]);
        const int j = static_cast<int>((idx / n[0]) % n[1]);
        const int k = static_cast<int>(idx / (static_cast<std::size_t>(n[0]) * n[1]));
        return {i, j, k};
    }
    Vec3 point(int i, int j, int k) const {
        return origin + h * Vec3(i, j, k);
    }
    Vec3 upper() const { return point(n[0] - 1, n[1] - 1, n[2] - 1); }

    // Quadrature weight: trapezoid on node grids, midpoint on cell grids.
    double weight(int i, int j, int k) const {
        double w = h * h * h;
        if (!cell_centered) {
            const int idx[3] = {i, j, k};
            for (int a = 0; a < 3; ++a)
                if (idx[a] == 0 || idx[a] == n[a] - 1) w *= 0.5;
        }
        return w;
    }

    bool same_as(const Grid& o) const {
        return n == o.n && h == o.h && origin == o.origin && cell_centered == o.cell_centered;
    }
};

template <class T>
class GridField {
public:
    Grid grid;
    std::vector<T> data;

    GridField() = default;
    explicit GridField(const Grid& g, const T& init = zero_value<T>())
        : grid(g), data(g.size(), init) {}

    T& operator()(int i, int j, int k) { return data[grid.index(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data[grid.index(i, j, k)]; }
    T& operator[](std::size_t idx) { return data[idx]; }
    const T& operator[](std::size_t idx) const { return data[idx]; }
    std::size_t size() const { return data.size(); }

    // Trilinear interpolation; points up to one cell outside the grid are
    // extrapolated from the boundary cell.
    T sample(const Vec3& x) const {
        int c[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
            const double s = (x[a] - grid.origin[a]) / grid.h;
            if (!(s >= -1.0 && s <= grid.n[a])) {
                throw MapLeftDomain("sample point outside grid band");
            }
            int ci = static_cast<int>(std::floor(s));
            ci = std::max(0, std::min(ci, grid.n[a] - 2));
            c[a] = ci;
            t[a] = s - ci;
        }
        T out = zero_value<T>();
        for (int dk = 0; dk < 2; ++dk) {
            const double wk = dk ? t[2] : 1.0 - t[2];
            for (int dj = 0; dj < 2; ++dj) {
                const double wj = dj ? t[1] : 1.0 - t[1];
                for (int di = 0; di < 2; ++di) {
                    const double wi = di ? t[0] : 1.0 - t[0];
                    axpy(out, wi * wj * wk, (*this)(c[0] + di, c[1] + dj, c[2] + dk));
                }
            }
        }
        return out;
    }

    // Trilinear value and its exact derivative within the containing cell;
    // grad(a, b) = d value_a / d x_b (vector fields only).
    std::pair<T, Mat3> sample_with_gradient(const Vec3& x) const
        requires std::is_same_v<T, Vec3>
    {
        int c[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
            const double s = (x[a] - grid.origin[a]) / grid.h;
            if (!(s >= -1.0 && s <= grid.n[a])) {
                throw MapLeftDomain("sample point outside grid band");
            }
            int ci = static_cast<int>(std::floor(s));
            ci = std::max(0, std::min(ci, grid.n[a] - 2));
            c[a] = ci;
            t[a] = s - ci;
        }
        Vec3 val = Vec3::Zero();
        Mat3 grad = Mat3::Zero();
        for (int dk = 0; dk < 2; ++dk) {
            const double wk = dk ? t[2] : 1.0 - t[2], gk = dk ? 1.0 : -1.0;
            for (int dj = 0; dj < 2; ++dj) {
                const double wj = dj ? t[1] : 1.0 - t[1], gj = dj ? 1.0 : -1.0;
                for (int di = 0; di < 2; ++di) {
                    const double wi = di ? t[0] : 1.0 - t[0], gi = di ? 1.0 : -1.0;
                    const Vec3& v = (*this)(c[0] + di, c[1] + dj, c[2] + dk);
                    val += wi * wj * wk * v;
                    grad.col(0) += (gi * wj * wk / grid.h) * v;
                    grad.col(1) += (wi * gj * wk / grid.h) * v;
                    grad.col(2) += (wi * wj * gk / grid.h) * v;
                }
            }
        }
        return {val, grad};
    }
};

namespace fd {

template <class Get>
using value_t = std::decay_t<decltype(std::declval<Get>()(0, 0, 0))>;

// First derivative along `axis` at sample (i,j,k): central inside,
// second-order one-sided at the ends.
template <class Get>
value_t<Get> d1(const Grid& g, Get&& get, int i, int j, int k, int axis) {
    using T = value_t<Get>;
    int idx[3] = {i, j, k};
    const int m = idx[axis];
    const int n = g.n[axis];
    auto at = [&](int off) {
        int p[3] = {i, j, k};
        p[axis] = m + off;
        return get(p[0], p[1], p[2]);
    };
    T out = zero_value<T>();
    const double s = 1.0 / (2.0 * g.h);
    if (m == 0) {
        axpy(out, -3.0 * s, at(0));
        axpy(out, 4.0 * s, at(1));
        axpy(out, -1.0 * s, at(2));
    } else if (m == n - 1) {
        axpy(out, 3.0 * s, at(0));
        axpy(out, -4.0 * s, at(-1));
        axpy(out, 1.0 * s, at(-2));
    } else {
        axpy(out, s, at(1));
        axpy(out, -s, at(-1));
    }
    return out;
}

// Second derivative along `axis`.
template <class Get>
value_t<Get> d2(const Grid& g, Get&& get, int i, int j, int k, int axis) {
    using T = value_t<Get>;
    int idx[3] = {i, j, k};
    const int m = idx[axis];
    const int n = g.n[axis];
    auto at = [&](int off) {
        int p[3] = {i, j, k};
        p[axis] = m + off;
        return get(p[0], p[1], p[2]);
    };
    T out = zero_value<T>();
    const double s = 1.0 / (g.h * g.h);
    if (m == 0 || m == n - 1) {
        const int dir = (m == 0) ? 1 : -1;
        axpy(out, 2.0 * s, at(0));
        axpy(out, -5.0 * s, at(dir));
        axpy(out, 4.0 * s, at(2 * dir));
        axpy(out, -1.0 * s, at(3 * dir));
    } else {
        axpy(out, s, at(1));
        axpy(out, -2.0 * s, at(0));
        axpy(out, s, at(-1));
    }
    return out;
}

// d/dx_a ( w d f/dx_a ) with a compact interior stencil; w is scalar.
template <class Get, class W>
value_t<Get> flux2(const Grid& g, Get&& get, W&& w, int i, int j, int k, int axis) {
    using T = value_t<Get>;
    int idx[3] = {i, j, k};
    const int m = idx[axis];
    const int n = g.n[axis];
    if (m == 0 || m == n - 1) {
        T out = d2(g, get, i, j, k, axis);
        const double w0 = w(i, j, k);
        out = out * w0;
        const double dw = d1(g, w, i, j, k, axis);
        axpy(out, dw, d1(g, get, i, j, k, axis));
        return out;
    }
    int p[3] = {i, j, k};
    p[axis] = m + 1;
    const double wp = 0.5 * (w(i, j, k) + w(p[0], p[1], p[2]));
    const T fp = get(p[0], p[1], p[2]);
    p[axis] = m - 1;
    const double wm = 0.5 * (w(i, j, k) + w(p[0], p[1], p[2]));
    const T fm = get(p[0], p[1], p[2]);
    const T f0 = get(i, j, k);
    const double s = 1.0 / (g.h * g.h);
    T out = zero_value<T>();
    axpy(out, wp * s, fp);
    axpy(out, -(wp + wm) * s, f0);
    axpy(out, wm * s, fm);
    return out;
}

}  // namespace fd

}  // namespace fsirb
