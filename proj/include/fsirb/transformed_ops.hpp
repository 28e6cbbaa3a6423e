#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/grid.hpp"
#include "fsirb/core/parallel.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/flow_map.hpp"

#include <array>
#include <string>
#include <vector>

namespace fsirb {

struct TransformedState {
    GridField<Vec3> U;
    GridField<double> P;
    Vec3 A = Vec3::Zero();
    Vec3 Omega = Vec3::Zero();
};

enum class WeakTermName { time, convective, diffusive, pressure, body };

inline std::string to_string(WeakTermName n) {
    switch (n) {
        case WeakTermName::time: return "time";
        case WeakTermName::convective: return "convective";
        case WeakTermName::diffusive: return "diffusive";
        case WeakTermName::pressure: return "pressure";
        case WeakTermName::body: return "body";
    }
    return "?";
}

struct WeakTerm {
    WeakTermName name;
    double value = 0.0;
};

namespace detail {

template <class T, class F>
GridField<T> node_map(const Grid& g, F&& f) {
    GridField<T> out(g);
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) out(i, j, k) = f(i, j, k);
    });
    return out;
}

// grad(a, b) = d U_a / d y_b by central differences
inline Mat3 grad_at(const GridField<Vec3>& U, int i, int j, int k) {
    Mat3 G;
    for (int b = 0; b < 3; ++b)
        G.col(b) = fd::d1(U.grid, [&](int x, int y, int z) { return U(x, y, z); }, i, j, k, b);
    return G;
}

inline void require_same(const Grid& a, const Grid& b) {
    if (!a.same_as(b)) throw InvalidSpec("field and map live on different grids");
}

inline void require_metric(const FlowMapData& m) {
    if (m.g_up.size() != m.grid.size() || m.gamma.size() != m.grid.size())
        throw InvalidSpec("map metric data missing");
}

}  // namespace detail

// Discrete vector Laplacian.
inline GridField<Vec3> laplacian_h(const GridField<Vec3>& U) {
    const Grid& g = U.grid;
    return detail::node_map<Vec3>(g, [&](int i, int j, int k) {
        Vec3 v = Vec3::Zero();
        for (int a = 0; a < 3; ++a) v += fd::d2(g, [&](int x, int y, int z) { return U(x, y, z); }, i, j, k, a);
        return v;
    });
}

inline GridField<Vec3> gradient_h(const GridField<double>& P) {
    const Grid& g = P.grid;
    return detail::node_map<Vec3>(g, [&](int i, int j, int k) {
        Vec3 v;
        for (int a = 0; a < 3; ++a) v[a] = fd::d1(g, [&](int x, int y, int z) { return P(x, y, z); }, i, j, k, a);
        return v;
    });
}

// (U . grad_h) U
inline GridField<Vec3> advection_h(const GridField<Vec3>& U) {
    return detail::node_map<Vec3>(U.grid, [&](int i, int j, int k) {
        return Vec3(detail::grad_at(U, i, j, k) * U(i, j, k));
    });
}

// sum_jk d_j(g^jk d_k U_i) + 2 g^kl G^i_jk d_l U_j
//   + (d_k(g^kl G^i_jl) + g^kl G^m_jl G^i_km) U_j
inline GridField<Vec3> op_L(const GridField<Vec3>& U, const FlowMapData& m) {
    detail::require_same(U.grid, m.grid);
    detail::require_metric(m);
    const Grid& g = m.grid;
    // T[j] = sum_{k != j} g^jk d_k U, C[k](i,j) = sum_l g^kl G^i_jl
    std::array<GridField<Vec3>, 3> T;
    std::array<GridField<Mat3>, 3> C;
    for (int a = 0; a < 3; ++a) {
        T[a] = GridField<Vec3>(g);
        C[a] = GridField<Mat3>(g);
    }
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) {
                const std::size_t idx = g.index(i, j, k);
                const Mat3 dU = detail::grad_at(U, i, j, k);
                const Mat3& gu = m.g_up[idx];
                const Tensor3& Ga = m.gamma[idx];
                for (int a = 0; a < 3; ++a) {
                    Vec3 t = Vec3::Zero();
                    for (int b = 0; b < 3; ++b)
                        if (b != a) t += gu(a, b) * dU.col(b);
                    T[a][idx] = t;
                    Mat3 c = Mat3::Zero();
                    for (int ii = 0; ii < 3; ++ii)
                        for (int jj = 0; jj < 3; ++jj)
                            for (int l = 0; l < 3; ++l) c(ii, jj) += gu(a, l) * Ga[ii](jj, l);
                    C[a][idx] = c;
                }
            }
    });
    return detail::node_map<Vec3>(g, [&](int i, int j, int k) {
        const std::size_t idx = g.index(i, j, k);
        const Mat3& gu = m.g_up[idx];
        const Tensor3& Ga = m.gamma[idx];
        const Vec3& u = U[idx];
        const Mat3 dU = detail::grad_at(U, i, j, k);
        Vec3 out = Vec3::Zero();
        for (int a = 0; a < 3; ++a) {
            out += fd::flux2(
                g, [&](int x, int y, int z) { return U(x, y, z); },
                [&](int x, int y, int z) { return m.g_up(x, y, z)(a, a); }, i, j, k, a);
            out += fd::d1(g, [&](int x, int y, int z) { return T[a](x, y, z); }, i, j, k, a);
            out += fd::d1(g, [&](int x, int y, int z) { return C[a](x, y, z); }, i, j, k, a) * u;
        }
        for (int ii = 0; ii < 3; ++ii) {
            double s = 0.0;
            for (int jj = 0; jj < 3; ++jj)
                for (int kk = 0; kk < 3; ++kk)
                    for (int l = 0; l < 3; ++l) {
                        const double gkl = gu(kk, l);
                        if (gkl == 0.0) continue;
                        s += 2.0 * gkl * Ga[ii](jj, kk) * dU(jj, l);
                        double gg = 0.0;
                        for (int mm = 0; mm < 3; ++mm) gg += Ga[mm](jj, l) * Ga[ii](kk, mm);
                        s += gkl * gg * u[jj];
                    }
            out[ii] += s;
        }
        return out;
    });
}

// Ydot = -gradY Lambda(X); (MU)_i = Ydot_j d_j U_i + (G^i_jk Ydot_k + Y_i,k d_t X_k,j) U_j
inline GridField<Vec3> op_M(const GridField<Vec3>& U, const FlowMapData& m) {
    detail::require_same(U.grid, m.grid);
    detail::require_metric(m);
    if (m.dXdt.size() != m.grid.size() || m.dgradXdt.size() != m.grid.size())
        throw InvalidSpec("map time derivatives missing");
    return detail::node_map<Vec3>(m.grid, [&](int i, int j, int k) {
        const std::size_t idx = m.grid.index(i, j, k);
        const Vec3 Yd = -(m.gradY[idx] * m.dXdt[idx]);
        const Mat3 dU = detail::grad_at(U, i, j, k);
        Mat3 B = m.gradY[idx] * m.dgradXdt[idx];
        for (int a = 0; a < 3; ++a) B.row(a) += (m.gamma[idx][a] * Yd).transpose();
        return Vec3(dU * Yd + B * U[idx]);
    });
}

inline Vec3 n_tilde_at(const Tensor3& gamma, const Vec3& u) {
    return Vec3(u.dot(gamma[0] * u), u.dot(gamma[1] * u), u.dot(gamma[2] * u));
}

// (N~ U)_i = G^i_jk U_j U_k
inline GridField<Vec3> op_N_tilde(const GridField<Vec3>& U, const FlowMapData& m) {
    detail::require_same(U.grid, m.grid);
    detail::require_metric(m);
    return detail::node_map<Vec3>(m.grid, [&](int i, int j, int k) {
        const std::size_t idx = m.grid.index(i, j, k);
        return n_tilde_at(m.gamma[idx], U[idx]);
    });
}

// Full transformed convection (U . grad)U + N~ U.
inline GridField<Vec3> op_N(const GridField<Vec3>& U, const FlowMapData& m) {
    GridField<Vec3> out = advection_h(U);
    const GridField<Vec3> nt = op_N_tilde(U, m);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += nt[i];
    return out;
}

// (GP)_i = g^ij d_j P
inline GridField<Vec3> op_G(const GridField<double>& P, const FlowMapData& m) {
    detail::require_same(P.grid, m.grid);
    detail::require_metric(m);
    const GridField<Vec3> dP = gradient_h(P);
    return detail::node_map<Vec3>(m.grid, [&](int i, int j, int k) {
        const std::size_t idx = m.grid.index(i, j, k);
        return Vec3(m.g_up[idx] * dP[idx]);
    });
}

// F = (L - Lap)U - MU - N~U - (G - grad)P
inline GridField<Vec3> transformed_rhs(const TransformedState& s, const FlowMapData& m) {
    const auto LU = op_L(s.U, m);
    const auto DU = laplacian_h(s.U);
    const auto MU = op_M(s.U, m);
    const auto NU = op_N_tilde(s.U, m);
    const auto GP = op_G(s.P, m);
    const auto dP = gradient_h(s.P);
    GridField<Vec3> F(m.grid);
    for (std::size_t i = 0; i < F.size(); ++i) F[i] = (LU[i] - DU[i]) - MU[i] - NU[i] - (GP[i] - dP[i]);
    return F;
}

// ---------------------------------------------------------------------------
// Weak forms, cell-midpoint quadrature.

namespace detail {

template <class T>
T cell_mean(const GridField<T>& f, int i, int j, int k) {
    T out = zero_value<T>();
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) axpy(out, 0.125, f(i + di, j + dj, k + dk));
    return out;
}

// gradient of the trilinear interpolant at the cell centre; grad(a, b) = d f_a / d y_b
inline Mat3 cell_grad(const GridField<Vec3>& f, int i, int j, int k) {
    Mat3 G = Mat3::Zero();
    const double s = 0.25 / f.grid.h;
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const Vec3& v = f(i + di, j + dj, k + dk);
                G.col(0) += (di ? s : -s) * v;
                G.col(1) += (dj ? s : -s) * v;
                G.col(2) += (dk ? s : -s) * v;
            }
    return G;
}

inline Mat3 sym(const Mat3& a) { return 0.5 * (a + a.transpose()); }

// Deterministic reduction over cells: per-slab partial sums, then in order.
template <class F>
double cell_sum(const Grid& g, F&& f) {
    const int nz = g.n[2] - 1;
    std::vector<double> part(static_cast<std::size_t>(std::max(nz, 0)), 0.0);
    parallel_for(0, nz, [&](int k) {
        double s = 0.0;
        for (int j = 0; j < g.n[1] - 1; ++j)
            for (int i = 0; i < g.n[0] - 1; ++i) s += f(i, j, k);
        part[static_cast<std::size_t>(k)] = s;
    });
    double s = 0.0;
    for (double p : part) s += p;
    return s * g.h * g.h * g.h;
}

}  // namespace detail

// <L U, psi> = int 2 D u : D phi with u = gradX U and phi = gradY^T psi,
// both written through the chain rule in reference coordinates.
template <class Skip>
double weak_L(const GridField<Vec3>& U, const GridField<Vec3>& psi, const FlowMapData& m, Skip&& skip) {
    detail::require_same(U.grid, m.grid);
    detail::require_same(psi.grid, m.grid);
    detail::require_metric(m);
    return detail::cell_sum(m.grid, [&](int i, int j, int k) {
        if (skip(i, j, k)) return 0.0;
        const Vec3 u = detail::cell_mean(U, i, j, k);
        const Vec3 p = detail::cell_mean(psi, i, j, k);
        const Mat3 dU = detail::cell_grad(U, i, j, k);
        const Mat3 dp = detail::cell_grad(psi, i, j, k);
        const Mat3 G = detail::cell_mean(m.gradX, i, j, k);
        const Mat3 Gi = G.inverse();
        const Tensor3 Ga = detail::cell_mean(m.gamma, i, j, k);
        Mat3 V = dU, W = dp;
        for (int a = 0; a < 3; ++a)
            for (int q = 0; q < 3; ++q) {
                V(a, q) += Ga[a].row(q).dot(u);
                for (int b = 0; b < 3; ++b) W(a, q) -= Ga[b](q, a) * p[b];
            }
        const Mat3 du = G * V * Gi;
        const Mat3 dphi = Gi.transpose() * W * Gi;
        return 2.0 * (detail::sym(du).cwiseProduct(detail::sym(dphi))).sum();
    });
}

inline double weak_L(const GridField<Vec3>& U, const GridField<Vec3>& psi, const FlowMapData& m) {
    return weak_L(U, psi, m, [](int, int, int) { return false; });
}

// <Lap U, psi> = int 2 D U : D psi
inline double weak_laplace(const GridField<Vec3>& U, const GridField<Vec3>& psi) {
    detail::require_same(U.grid, psi.grid);
    return detail::cell_sum(U.grid, [&](int i, int j, int k) {
        return 2.0 * (detail::sym(detail::cell_grad(U, i, j, k))
                          .cwiseProduct(detail::sym(detail::cell_grad(psi, i, j, k))))
                         .sum();
    });
}

inline double integrate_dot(const GridField<Vec3>& a, const GridField<Vec3>& b) {
    detail::require_same(a.grid, b.grid);
    return detail::cell_sum(a.grid, [&](int i, int j, int k) {
        return detail::cell_mean(a, i, j, k).dot(detail::cell_mean(b, i, j, k));
    });
}

// One time level of the transformed weak formulation.
struct WeakSlice {
    double t = 0.0;
    const FlowMapData* map = nullptr;
    TransformedState state;
    GridField<Vec3> u1;
    GridField<Vec3> psi;
    GridField<Vec3> psi_t;      // optional; time differences of psi otherwise
    Vec3 omega_tilde = Vec3::Zero();
    Vec3 body_center = Vec3::Zero();
    double body_radius = 0.0;  // 0: no body term
};

struct WeakOptions {
    double n_tilde_sign = 1.0;
    double rigid_tol = 1e-8;
};

// Rigid description psi = psi_h + psi_w x (y - q) of a test field on the body.
struct RigidPart {
    Vec3 h = Vec3::Zero();
    Vec3 w = Vec3::Zero();
};

inline RigidPart rigid_part(const GridField<Vec3>& psi, const Vec3& q, double r, double tol) {
    const Grid& g = psi.grid;
    RigidPart out;
    Vec3 mean = Vec3::Zero(), cmean = Vec3::Zero(), curl = Vec3::Zero();
    int count = 0;
    double worst = 0.0, scale = 0.0;
    for (int k = 0; k + 1 < g.n[2]; ++k)
        for (int j = 0; j + 1 < g.n[1]; ++j)
            for (int i = 0; i + 1 < g.n[0]; ++i) {
                const Vec3 c = g.point(i, j, k) + Vec3::Constant(0.5 * g.h);
                if ((c - q).norm() >= r) continue;
                const Mat3 d = detail::cell_grad(psi, i, j, k);
                worst = std::max(worst, detail::sym(d).norm());
                scale = std::max(scale, d.norm());
                curl += Vec3(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
                mean += detail::cell_mean(psi, i, j, k);
                cmean += c;
                ++count;
            }
    if (count == 0) return out;
    if (worst > tol * (1.0 + scale)) throw NonRigidTest("test function deforms on the body");
    out.w = 0.5 * curl / count;
    out.h = mean / count - out.w.cross(cmean / count - q);
    return out;
}

// Integrands of the transformed weak formulation at one time level, each
// carrying the sign it has in LHS - RHS (order: time, convective,
// diffusive, pressure, body).
//  time:       int U.dpsi/dt - MU.psi
//  convective: int (u1 (x) U):grad psi^T - (U - u1).grad U.psi - N~U.psi
//  diffusive:  -<L U, psi>
//  pressure:   -int G P . psi
//  body:       -int_S (w~ x U.psi - u1 x U.psi_w)
inline std::array<double, 5> weak_terms_at(const WeakSlice& sl, const GridField<Vec3>& psi_t,
                                           const WeakOptions& opt = {}) {
    if (!sl.map) throw InvalidSpec("slice without map");
    const FlowMapData& m = *sl.map;
    const Grid& g = m.grid;
    detail::require_same(sl.state.U.grid, g);
    detail::require_same(sl.psi.grid, g);
    detail::require_same(sl.u1.grid, g);
    detail::require_same(psi_t.grid, g);
    const GridField<Vec3>& U = sl.state.U;
    const GridField<Vec3>& psi = sl.psi;
    const GridField<Vec3>& u1 = sl.u1;
    const auto MU = op_M(U, m);
    const auto NU = op_N_tilde(U, m);
    const auto GP = op_G(sl.state.P, m);

    // fluid-only integrals skip cells whose centre lies in the body
    const bool has_body = sl.body_radius > 0.0;
    auto in_body = [&](int i, int j, int k) {
        const Vec3 c = g.point(i, j, k) + Vec3::Constant(0.5 * g.h);
        return has_body && (c - sl.body_center).norm() < sl.body_radius;
    };
    auto fluid_dot = [&](const GridField<Vec3>& a, const GridField<Vec3>& b) {
        return detail::cell_sum(g, [&](int i, int j, int k) {
            if (in_body(i, j, k)) return 0.0;
            return detail::cell_mean(a, i, j, k).dot(detail::cell_mean(b, i, j, k));
        });
    };

    const double time = integrate_dot(U, psi_t) - fluid_dot(MU, psi);
    double conv = detail::cell_sum(g, [&](int i, int j, int k) {
        if (in_body(i, j, k)) return 0.0;
        const Vec3 u = detail::cell_mean(U, i, j, k);
        const Vec3 a = detail::cell_mean(u1, i, j, k);
        const Vec3 p = detail::cell_mean(psi, i, j, k);
        const Mat3 dU = detail::cell_grad(U, i, j, k);
        const Mat3 dp = detail::cell_grad(psi, i, j, k);
        return u.dot(dp * a) - (dU * (u - a)).dot(p);
    });
    conv -= opt.n_tilde_sign * fluid_dot(NU, psi);
    const double diff = -weak_L(U, psi, m, in_body);
    const double pres = -fluid_dot(GP, psi);
    double body = 0.0;
    if (has_body) {
        const RigidPart rp = rigid_part(psi, sl.body_center, sl.body_radius, opt.rigid_tol);
        body = -detail::cell_sum(g, [&](int i, int j, int k) {
            if (!in_body(i, j, k)) return 0.0;
            const Vec3 u = detail::cell_mean(U, i, j, k);
            const Vec3 a = detail::cell_mean(u1, i, j, k);
            const Vec3 p = detail::cell_mean(psi, i, j, k);
            return sl.omega_tilde.cross(u).dot(p) - a.cross(u).dot(rp.w);
        });
    }
    return {time, conv, diff, pres, body};
}

// Trapezoid rule in time over the slices; psi_t falls back to differences
// of psi across neighbouring slices.
inline std::vector<WeakTerm> weak_residual(const std::vector<WeakSlice>& slices, const WeakOptions& opt = {}) {
    const std::size_t n = slices.size();
    if (n < 2) throw InvalidSpec("weak residual needs at least two time levels");
    double acc[5] = {0, 0, 0, 0, 0};
    for (std::size_t s = 0; s < n; ++s) {
        const WeakSlice& sl = slices[s];
        GridField<Vec3> psi_t;
        if (sl.psi_t.size() == sl.psi.size()) {
            psi_t = sl.psi_t;
        } else {
            const std::size_t lo = s == 0 ? 0 : s - 1, hi = s + 1 == n ? s : s + 1;
            psi_t = GridField<Vec3>(sl.psi.grid);
            for (std::size_t i = 0; i < psi_t.size(); ++i)
                psi_t[i] = (slices[hi].psi[i] - slices[lo].psi[i]) / (slices[hi].t - slices[lo].t);
        }
        const auto v = weak_terms_at(sl, psi_t, opt);
        const double w = 0.5 * (slices[s + 1 == n ? s : s + 1].t - slices[s == 0 ? 0 : s - 1].t);
        for (int q = 0; q < 5; ++q) acc[q] += w * v[q];
    }
    std::vector<WeakTerm> out{{WeakTermName::time, acc[0]},
                              {WeakTermName::convective, acc[1]},
                              {WeakTermName::diffusive, acc[2]},
                              {WeakTermName::pressure, acc[3]},
                              {WeakTermName::body, acc[4]}};
    for (const auto& t : out)
        if (!std::isfinite(t.value)) throw NonFiniteState("weak term " + to_string(t.name));
    return out;
}

inline double residual_sum(const std::vector<WeakTerm>& terms) {
    double s = 0.0;
    for (const auto& t : terms) s += t.value;
    return s;
}

}  // namespace fsirb
