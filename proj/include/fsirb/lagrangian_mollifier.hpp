#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/grid.hpp"
#include "fsirb/core/parallel.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/flow_map.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

namespace fsirb {

// Samples f[n] at t0 + n dt.
template <class T>
struct TimeSeries {
    double t0 = 0.0;
    double dt = 1.0;
    std::vector<T> f;

    std::size_t size() const { return f.size(); }
    double time(std::size_t n) const { return t0 + dt * static_cast<double>(n); }
    double t_end() const { return time(f.empty() ? 0 : f.size() - 1); }
};

struct MollifierSpec {
    double h = 0.05;         // kernel half-width
    double xi_margin = 0.0;  // h0 of the extension cutoff; 0 selects h

    double margin() const { return xi_margin > 0.0 ? xi_margin : h; }
    void validate() const {
        if (!(h > 0.0) || !std::isfinite(h)) throw InvalidSpec("mollifier half-width must be positive");
        if (xi_margin < 0.0) throw InvalidSpec("xi margin must be nonnegative");
        if (xi_margin > 0.0 && xi_margin < h) throw InvalidSpec("xi plateau must cover the kernel support");
    }
};

// Unnormalized bump exp(-1/(1 - (s/h)^2)) on (-h, h).
inline double mollifier_kernel(double s, double h) {
    const double r = s / h;
    if (std::abs(r) >= 1.0) return 0.0;
    return std::exp(-1.0 / (1.0 - r * r));
}

// Discrete kernel on the time grid: w[K + k] multiplies f(t - k dt); the
// weights sum to one and w[K + k] == w[K - k].
inline std::vector<double> kernel_weights(const MollifierSpec& spec, double dt) {
    spec.validate();
    if (!(dt > 0.0)) throw InvalidSpec("time step must be positive");
    if (dt > 0.25 * spec.h) throw KernelUnderresolved("time step exceeds h/4");
    const int K = static_cast<int>(std::ceil(spec.h / dt));
    std::vector<double> w(static_cast<std::size_t>(2 * K + 1), 0.0);
    double sum = 0.0;
    for (int k = 0; k <= K; ++k) {
        const double v = mollifier_kernel(k * dt, spec.h);
        w[static_cast<std::size_t>(K + k)] = v;
        w[static_cast<std::size_t>(K - k)] = v;
        sum += k == 0 ? v : 2.0 * v;
    }
    for (double& v : w) v /= sum;
    return w;
}

// Extension cutoff: 1 on [-h0, T + h0], quintic ramps to 0 over one more h0.
inline double xi_cutoff(double t, double T, double h0) {
    auto ramp = [](double s) {
        s = std::clamp(s, 0.0, 1.0);
        return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
    };
    if (t < -h0) return ramp((t + 2.0 * h0) / h0);
    if (t > T + h0) return ramp((T + 2.0 * h0 - t) / h0);
    return 1.0;
}

namespace detail {

inline void accumulate(double& out, double w, const double& v) { out += w * v; }
inline void accumulate(Vec3& out, double w, const Vec3& v) { out += w * v; }

template <class T>
void accumulate(GridField<T>& out, double w, const GridField<T>& v) {
    for (std::size_t i = 0; i < out.size(); ++i) axpy(out[i], w, v[i]);
}

template <class T>
T zero_like(const T& v) {
    if constexpr (std::is_arithmetic_v<T>) {
        return T(0);
    } else if constexpr (std::is_same_v<T, Vec3>) {
        return Vec3::Zero();
    } else {
        return T(v.grid);
    }
}

}  // namespace detail

// Constant extension weighted by xi outside [t0, t_end], then the discrete
// convolution with the normalized kernel.
template <class T>
TimeSeries<T> extend_and_convolve(const TimeSeries<T>& ubar, const MollifierSpec& spec) {
    if (ubar.size() == 0) throw InvalidSpec("empty time series");
    const std::vector<double> w = kernel_weights(spec, ubar.dt);
    const int K = static_cast<int>(w.size() / 2);
    const int N = static_cast<int>(ubar.size());
    const double span = ubar.t_end() - ubar.t0;
    const double h0 = spec.margin();
    TimeSeries<T> out{ubar.t0, ubar.dt, {}};
    out.f.reserve(ubar.size());
    for (int n = 0; n < N; ++n) {
        T acc = detail::zero_like(ubar.f[0]);
        for (int k = -K; k <= K; ++k) {
            const double wk = w[static_cast<std::size_t>(K + k)];
            if (wk == 0.0) continue;
            const int m = n - k;
            const double s = m * ubar.dt;  // relative to t0
            const double x = xi_cutoff(s, span, h0);
            if (x == 0.0) continue;
            detail::accumulate(acc, wk * x, ubar.f[static_cast<std::size_t>(std::clamp(m, 0, N - 1))]);
        }
        out.f.push_back(std::move(acc));
    }
    return out;
}

// Lagrangian velocity gradY(X) u(X), snapshot by snapshot.
inline TimeSeries<GridField<Vec3>> to_lagrangian(const TimeSeries<GridField<Vec3>>& u,
                                                 const std::vector<FlowMapData>& maps) {
    if (maps.size() != u.size()) throw InvalidSpec("velocity and map series are not aligned");
    TimeSeries<GridField<Vec3>> out{u.t0, u.dt, {}};
    out.f.reserve(u.size());
    for (std::size_t n = 0; n < u.size(); ++n) {
        if (std::abs(maps[n].t - u.time(n)) > 1e-9 * (1.0 + std::abs(u.time(n))))
            throw InvalidSpec("velocity and map series are not aligned");
        out.f.push_back(push_velocity(u.f[n], maps[n]));
    }
    return out;
}

// u^h = gradX(Y) ubar^h(Y) on the current-domain nodes; maps need the inverse.
inline TimeSeries<GridField<Vec3>> regularize(const TimeSeries<GridField<Vec3>>& u,
                                              const std::vector<FlowMapData>& maps,
                                              const MollifierSpec& spec) {
    const auto ubar_h = extend_and_convolve(to_lagrangian(u, maps), spec);
    TimeSeries<GridField<Vec3>> out{u.t0, u.dt, {}};
    out.f.reserve(u.size());
    for (std::size_t n = 0; n < u.size(); ++n) out.f.push_back(pull_velocity(ubar_h.f[n], maps[n]));
    return out;
}

// Discrete L2(0,T; L2) norm of a - b: trapezoid in time and space.
inline double l2l2_distance(const TimeSeries<GridField<Vec3>>& a, const TimeSeries<GridField<Vec3>>& b) {
    if (a.size() != b.size()) throw InvalidSpec("series lengths differ");
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        const Grid& g = a.f[n].grid;
        double v = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto ijk = g.ijk(i);
            v += g.weight(ijk[0], ijk[1], ijk[2]) * (a.f[n][i] - b.f[n][i]).squaredNorm();
        }
        s += ((n == 0 || n + 1 == a.size()) ? 0.5 : 1.0) * a.dt * v;
    }
    return std::sqrt(s);
}

struct ReynoldsTerms {
    double lhs = 0.0;        // int int u . d_t v^h + v . d_t u^h
    double transport = 0.0;  // -int int grad(v . u) . d_t X
    double end = 0.0;        // int v(t) . u(t)
    double start = 0.0;      // int v(0) . u(0)
    double rhs() const { return transport + end - start; }
    double gap() const { return lhs - rhs(); }
};

// Both sides of the generalized Reynolds transport identity on [t0, t],
// evaluated in reference coordinates: with W = gradX wbar the current-domain
// field at X(y), d_t w(X) = d_t W + grad_y W Ydot and Ydot = -gradY Lambda(X).
inline ReynoldsTerms reynolds_terms(const TimeSeries<GridField<Vec3>>& u, const TimeSeries<GridField<Vec3>>& v,
                                    const std::vector<FlowMapData>& maps, const MollifierSpec& spec, double t) {
    if (u.size() != v.size() || std::abs(u.dt - v.dt) > 1e-15 || u.t0 != v.t0)
        throw InvalidSpec("u and v series are not aligned");
    const auto ub = to_lagrangian(u, maps), vb = to_lagrangian(v, maps);
    const auto uh = extend_and_convolve(ub, spec), vh = extend_and_convolve(vb, spec);
    const long last_l = std::lround((t - u.t0) / u.dt);
    if (last_l < 1 || last_l >= static_cast<long>(u.size()) || std::abs(u.time(static_cast<std::size_t>(last_l)) - t) > 1e-9)
        throw InvalidSpec("t is not an interior point of the time grid");
    const std::size_t last = static_cast<std::size_t>(last_l);
    const std::size_t N = u.size();

    auto current = [&](const TimeSeries<GridField<Vec3>>& s, std::size_t n) {
        GridField<Vec3> W(s.f[n].grid);
        for (std::size_t i = 0; i < W.size(); ++i) W[i] = maps[n].gradX[i] * s.f[n][i];
        return W;
    };
    auto grad = [](const GridField<Vec3>& W, int i, int j, int k) {
        Mat3 G;
        for (int b = 0; b < 3; ++b)
            G.col(b) = fd::d1(W.grid, [&](int x, int y, int z) { return W(x, y, z); }, i, j, k, b);
        return G;
    };
    auto dot_integral = [](const GridField<Vec3>& a, const GridField<Vec3>& b) {
        const Grid& g = a.grid;
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto ijk = g.ijk(i);
            s += g.weight(ijk[0], ijk[1], ijk[2]) * a[i].dot(b[i]);
        }
        return s;
    };

    // mollified current-domain fields at the levels needed for time differences
    std::vector<GridField<Vec3>> Uh(N), Vh(N);
    for (std::size_t n = 0; n <= std::min(last + 1, N - 1); ++n) {
        Uh[n] = current(uh, n);
        Vh[n] = current(vh, n);
    }
    auto time_diff = [&](const std::vector<GridField<Vec3>>& F, std::size_t n) {
        GridField<Vec3> D(F[n].grid);
        const double dt = u.dt;
        for (std::size_t i = 0; i < D.size(); ++i) {
            if (n == 0)
                D[i] = (-3.0 * F[0][i] + 4.0 * F[1][i] - F[2][i]) / (2.0 * dt);
            else if (n + 1 == N)
                D[i] = (3.0 * F[n][i] - 4.0 * F[n - 1][i] + F[n - 2][i]) / (2.0 * dt);
            else
                D[i] = (F[n + 1][i] - F[n - 1][i]) / (2.0 * dt);
        }
        return D;
    };

    ReynoldsTerms out;
    for (std::size_t n = 0; n <= last; ++n) {
        const FlowMapData& m = maps[n];
        const Grid& g = m.grid;
        const GridField<Vec3> U = current(ub, n), V = current(vb, n);
        const GridField<Vec3> dUh = time_diff(Uh, n), dVh = time_diff(Vh, n);
        std::vector<double> lhs_k(static_cast<std::size_t>(g.n[2]), 0.0), tr_k(static_cast<std::size_t>(g.n[2]), 0.0);
        parallel_for(0, g.n[2], [&](int k) {
            double a = 0.0, b = 0.0;
            for (int j = 0; j < g.n[1]; ++j)
                for (int i = 0; i < g.n[0]; ++i) {
                    const std::size_t idx = g.index(i, j, k);
                    const double w = g.weight(i, j, k);
                    const Vec3 Yd = -(m.gradY[idx] * m.dXdt[idx]);
                    const Vec3 dtv = dVh[idx] + grad(Vh[n], i, j, k) * Yd;
                    const Vec3 dtu = dUh[idx] + grad(Uh[n], i, j, k) * Yd;
                    a += w * (U[idx].dot(dtv) + V[idx].dot(dtu));
                    const Vec3 gw = grad(U, i, j, k).transpose() * V[idx] + grad(V, i, j, k).transpose() * U[idx];
                    b += w * gw.dot(Yd);
                }
            lhs_k[static_cast<std::size_t>(k)] = a;
            tr_k[static_cast<std::size_t>(k)] = b;
        });
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < lhs_k.size(); ++k) {
            a += lhs_k[k];
            b += tr_k[k];
        }
        const double tw = (n == 0 || n == last) ? 0.5 * u.dt : u.dt;
        out.lhs += tw * a;
        out.transport += tw * b;
        if (n == 0) out.start = dot_integral(U, V);
        if (n == last) out.end = dot_integral(U, V);
    }
    return out;
}

inline double reynolds_gap(const TimeSeries<GridField<Vec3>>& u, const TimeSeries<GridField<Vec3>>& v,
                           const std::vector<FlowMapData>& maps, const MollifierSpec& spec, double t) {
    return reynolds_terms(u, v, maps, spec, t).gap();
}

}  // namespace fsirb
