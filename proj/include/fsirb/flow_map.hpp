#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/geometry.hpp"
#include "fsirb/core/grid.hpp"
#include "fsirb/core/parallel.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/divfree_extension.hpp"
#include "fsirb/rigid_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <tuple>
#include <vector>

namespace fsirb {

// Rigid state as a function of time.
using Trajectory = std::function<RigidState(double)>;

// Constant spin plus translation with an optional oscillating part:
// a(t) = a0 + a1 sin(nu t), omega constant.
struct PrescribedMotion {
    Vec3 q0 = Vec3::Constant(0.5);
    Vec3 a0 = Vec3::Zero();
    Vec3 a1 = Vec3::Zero();
    double nu = 0.0;
    Vec3 omega = Vec3::Zero();

    RigidState operator()(double t) const {
        RigidState s;
        s.t = t;
        s.a = a0 + a1 * std::sin(nu * t);
        s.q = q0 + a0 * t;
        if (nu != 0.0) s.q += a1 * (1.0 - std::cos(nu * t)) / nu;
        s.Q = rotation_exp(omega * t);
        s.omega = omega;
        return s;
    }
};

// Piecewise interpolation of solver states: cubic Hermite for q (a is its
// derivative), linear for a and omega, geodesic for Q.
class SampledTrajectory {
public:
    SampledTrajectory() = default;
    explicit SampledTrajectory(std::vector<RigidState> states) : states_(std::move(states)) {}

    void push_back(const RigidState& s) { states_.push_back(s); }
    const std::vector<RigidState>& states() const { return states_; }

    RigidState operator()(double t) const {
        if (states_.empty()) throw InvalidSpec("empty trajectory");
        if (states_.size() == 1 || t <= states_.front().t) return at_clamped(0, t);
        if (t >= states_.back().t) return at_clamped(states_.size() - 1, t);
        const auto it = std::upper_bound(states_.begin(), states_.end(), t,
                                         [](double v, const RigidState& s) { return v < s.t; });
        const std::size_t i = static_cast<std::size_t>(it - states_.begin()) - 1;
        const RigidState& s0 = states_[i];
        const RigidState& s1 = states_[i + 1];
        const double H = s1.t - s0.t;
        const double u = (t - s0.t) / H;
        RigidState out;
        out.t = t;
        const double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
        const double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
        out.q = h00 * s0.q + h10 * H * s0.a + h01 * s1.q + h11 * H * s1.a;
        out.a = (1 - u) * s0.a + u * s1.a;
        out.omega = (1 - u) * s0.omega + u * s1.omega;
        const Eigen::AngleAxisd rel(Mat3(s0.Q.transpose() * s1.Q));
        out.Q = s0.Q * rotation_exp(u * rel.angle() * rel.axis());
        return out;
    }

private:
    RigidState at_clamped(std::size_t i, double t) const {
        RigidState s = states_[i];
        s.t = t;
        return s;
    }
    std::vector<RigidState> states_;
};

struct MapOptions {
    bool hessian = true;   // integrate the second variational equation
    bool inverse = true;   // maintain Y on the current-domain nodes
    bool metric = true;    // fill g_lo, g_up, gamma
    double newton_tol = 1e-12;
};

// Sampled forward map on reference nodes y_k, plus the inverse map on the
// same node positions read as current-domain points x_k.
struct FlowMapData {
    double t = 0.0;
    Grid grid;
    Box box;
    CutoffSpec cutoff;
    MapOptions options;

    GridField<Vec3> X;          // X(t, y_k)
    GridField<Mat3> gradX;      // grad X(t, y_k)
    GridField<Tensor3> hessX;   // hessX[l](i,j) = d_i d_j X_l
    GridField<Vec3> dXdt;       // Lambda(t, X(t, y_k))
    GridField<Mat3> dgradXdt;   // d/dt grad X = grad Lambda(X) grad X
    GridField<Vec3> Y;          // Y(t, x_k), x_k the node positions
    GridField<Mat3> gradY;      // grad Y(t, X(t, y_k)) = gradX(y_k)^-1
    GridField<Mat3> g_lo;       // g_ij
    GridField<Mat3> g_up;       // g^ij
    GridField<Tensor3> gamma;   // gamma[k](i,j) = Gamma^k_ij
};

inline void metric_and_christoffel(FlowMapData& m);

inline FlowMapData identity_map(const Grid& grid, const Box& box, const CutoffSpec& cutoff,
                                double t0 = 0.0, MapOptions opt = {}) {
    FlowMapData m;
    m.t = t0;
    m.grid = grid;
    m.box = box;
    m.cutoff = cutoff;
    m.options = opt;
    m.X = GridField<Vec3>(grid);
    for (int k = 0; k < grid.n[2]; ++k)
        for (int j = 0; j < grid.n[1]; ++j)
            for (int i = 0; i < grid.n[0]; ++i) m.X(i, j, k) = grid.point(i, j, k);
    m.gradX = GridField<Mat3>(grid, Mat3::Identity());
    m.dXdt = GridField<Vec3>(grid);
    m.dgradXdt = GridField<Mat3>(grid);
    m.gradY = GridField<Mat3>(grid, Mat3::Identity());
    if (opt.hessian) m.hessX = GridField<Tensor3>(grid);
    if (opt.inverse) m.Y = m.X;
    if (opt.metric) metric_and_christoffel(m);
    return m;
}

namespace detail {

inline void check_inside(const Box& box, const Vec3& x) {
    const double tol = 1e-12 * (1.0 + box.extent().maxCoeff());
    if ((x.array() < box.lo.array() - tol).any() || (x.array() > box.hi.array() + tol).any())
        throw MapLeftDomain("characteristic left the container");
}

}  // namespace detail

inline Vec3 invert_map(const FlowMapData& m, const Vec3& x, const Vec3& seed);

// Fills Y on every node by Newton iteration, warm-started from the stored Y.
inline void update_inverse(FlowMapData& m) {
    if (m.Y.size() != m.grid.size()) m.Y = m.X;
    GridField<Vec3> Ynew(m.grid);
    const int nz = m.grid.n[2];
    parallel_for(0, nz, [&](int k) {
        for (int j = 0; j < m.grid.n[1]; ++j)
            for (int i = 0; i < m.grid.n[0]; ++i)
                Ynew(i, j, k) = invert_map(m, m.grid.point(i, j, k), m.Y(i, j, k));
    });
    m.Y = std::move(Ynew);
}

// One RK4 step of dX/dt = Lambda(t, X) with the first and second
// variational equations, node by node.
inline FlowMapData advance_flowmap(const FlowMapData& m, const Trajectory& traj, double dt) {
    if (!(dt > 0.0)) throw InvalidSpec("dt must be positive");
    const bool with_h = m.options.hessian;
    const RigidState s0 = traj(m.t), sh = traj(m.t + 0.5 * dt), s1 = traj(m.t + dt);
    const double ro = m.cutoff.r_outer;
    const double ri = m.cutoff.r_inner * (1.0 - 1e-12);

    FlowMapData out;
    out.t = m.t + dt;
    out.grid = m.grid;
    out.box = m.box;
    out.cutoff = m.cutoff;
    out.options = m.options;
    out.X = m.X;
    out.gradX = m.gradX;
    if (with_h) out.hessX = m.hessX;
    out.dXdt = GridField<Vec3>(m.grid);
    out.dgradXdt = GridField<Mat3>(m.grid);
    out.Y = m.Y;

    struct Deriv {
        Vec3 x;
        Mat3 G;
        Tensor3 H;
    };
    auto rhs = [&](const RigidState& st, const Vec3& x, const Mat3& G, const Tensor3& H) {
        const LambdaEval e = lambda_eval(st, m.cutoff, x, with_h);
        Deriv d;
        d.x = e.value;
        d.G = e.grad * G;
        if (with_h) {
            for (int l = 0; l < 3; ++l) {
                Mat3 acc = G.transpose() * e.hess[l] * G;
                for (int q = 0; q < 3; ++q) acc += e.grad(l, q) * H[q];
                d.H[l] = acc;
            }
        }
        return d;
    };
    auto add = [](const Tensor3& a, double w, const Tensor3& b) {
        Tensor3 r;
        for (int l = 0; l < 3; ++l) r[l] = a[l] + w * b[l];
        return r;
    };

    const int nz = m.grid.n[2];
    std::vector<int> left(static_cast<std::size_t>(nz), 0), bad(static_cast<std::size_t>(nz), 0);
    parallel_for(0, nz, [&](int k) {
        const Tensor3 H0 = zero_value<Tensor3>();
        for (int j = 0; j < m.grid.n[1]; ++j) {
            for (int i = 0; i < m.grid.n[0]; ++i) {
                const std::size_t idx = m.grid.index(i, j, k);
                const Vec3 x = m.X[idx];
                // Lambda vanishes along every stage: the step is the identity.
                if ((x - s0.q).norm() >= ro && (x - sh.q).norm() >= ro && (x - s1.q).norm() >= ro)
                    continue;
                const Mat3 G = m.gradX[idx];
                const Tensor3 H = with_h ? m.hessX[idx] : H0;
                // inside the collar the path is the body motion itself
                if ((x - s0.q).norm() <= ri) {
                    const Mat3 R = s1.Q * s0.Q.transpose();
                    const Vec3 xn = s1.q + R * (x - s0.q);
                    out.X[idx] = xn;
                    out.gradX[idx] = R * G;
                    if (with_h) {
                        Tensor3 Hn = zero_value<Tensor3>();
                        for (int l = 0; l < 3; ++l)
                            for (int q = 0; q < 3; ++q) Hn[l] += R(l, q) * H[q];
                        out.hessX[idx] = Hn;
                    }
                    out.dXdt[idx] = rigid_velocity(s1, xn);
                    out.dgradXdt[idx] = skew(s1.omega) * out.gradX[idx];
                    if (!xn.allFinite()) bad[static_cast<std::size_t>(k)] = 1;
                    continue;
                }
                const Deriv k1 = rhs(s0, x, G, H);
                const Deriv k2 = rhs(sh, x + 0.5 * dt * k1.x, G + 0.5 * dt * k1.G,
                                     with_h ? add(H, 0.5 * dt, k1.H) : H0);
                const Deriv k3 = rhs(sh, x + 0.5 * dt * k2.x, G + 0.5 * dt * k2.G,
                                     with_h ? add(H, 0.5 * dt, k2.H) : H0);
                const Deriv k4 = rhs(s1, x + dt * k3.x, G + dt * k3.G,
                                     with_h ? add(H, dt, k3.H) : H0);
                const Vec3 xn = x + dt / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
                const Mat3 Gn = G + dt / 6.0 * (k1.G + 2.0 * k2.G + 2.0 * k3.G + k4.G);
                out.X[idx] = xn;
                out.gradX[idx] = Gn;
                if (with_h) {
                    Tensor3 Hn;
                    for (int l = 0; l < 3; ++l) {
                        const Mat3 v = H[l] + dt / 6.0 * (k1.H[l] + 2.0 * k2.H[l] + 2.0 * k3.H[l] + k4.H[l]);
                        Hn[l] = 0.5 * (v + v.transpose());
                    }
                    out.hessX[idx] = Hn;
                }
                if (!xn.allFinite() || !Gn.allFinite()) bad[static_cast<std::size_t>(k)] = 1;
                const double tol = 1e-12 * (1.0 + m.box.extent().maxCoeff());
                if ((xn.array() < m.box.lo.array() - tol).any() ||
                    (xn.array() > m.box.hi.array() + tol).any())
                    left[static_cast<std::size_t>(k)] = 1;
                const LambdaEval e = lambda_eval(s1, m.cutoff, xn, false);
                out.dXdt[idx] = e.value;
                out.dgradXdt[idx] = e.grad * Gn;
            }
        }
    });
    for (int k = 0; k < nz; ++k) {
        if (bad[static_cast<std::size_t>(k)]) throw NonFiniteState("flow map");
        if (left[static_cast<std::size_t>(k)]) throw MapLeftDomain("characteristic left the container");
    }

    out.gradY = GridField<Mat3>(m.grid);
    for (std::size_t idx = 0; idx < m.grid.size(); ++idx) out.gradY[idx] = out.gradX[idx].inverse();
    if (m.options.inverse) update_inverse(out);
    if (m.options.metric) metric_and_christoffel(out);
    return out;
}

// Integrates from map.t to t_end in uniform steps of at most dt.
inline FlowMapData advance_to(FlowMapData m, const Trajectory& traj, double t_end, double dt) {
    const int steps = static_cast<int>(std::ceil((t_end - m.t) / dt - 1e-9));
    if (steps <= 0) return m;
    const double h = (t_end - m.t) / steps;
    for (int n = 0; n < steps; ++n) m = advance_flowmap(m, traj, h);
    return m;
}

// Continuous interpolant of the forward map: trilinear blend of the corner
// Taylor models X_c + G_c d + H_c(d, d)/2, d = y - y_c. Returns the value and
// its exact Jacobian. Without a stored Hessian the models are first order.
inline std::pair<Vec3, Mat3> map_point(const FlowMapData& m, const Vec3& y) {
    const Grid& g = m.grid;
    const bool with_h = m.hessX.size() == g.size();
    int c[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        const double s = (y[a] - g.origin[a]) / g.h;
        if (!(s >= -1.0 && s <= g.n[a])) throw MapLeftDomain("map point outside grid band");
        int ci = static_cast<int>(std::floor(s));
        ci = std::max(0, std::min(ci, g.n[a] - 2));
        c[a] = ci;
        t[a] = s - ci;
    }
    Vec3 val = Vec3::Zero();
    Mat3 jac = Mat3::Zero();
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const double wx = di ? t[0] : 1.0 - t[0], gx = (di ? 1.0 : -1.0) / g.h;
                const double wy = dj ? t[1] : 1.0 - t[1], gy = (dj ? 1.0 : -1.0) / g.h;
                const double wz = dk ? t[2] : 1.0 - t[2], gz = (dk ? 1.0 : -1.0) / g.h;
                const double w = wx * wy * wz;
                const Vec3 dw(gx * wy * wz, wx * gy * wz, wx * wy * gz);
                const std::size_t idx = g.index(c[0] + di, c[1] + dj, c[2] + dk);
                const Vec3 d = y - g.point(c[0] + di, c[1] + dj, c[2] + dk);
                Vec3 T = m.X[idx] + m.gradX[idx] * d;
                Mat3 dT = m.gradX[idx];
                if (with_h) {
                    for (int l = 0; l < 3; ++l) {
                        const Vec3 Hd = m.hessX[idx][l] * d;
                        T[l] += 0.5 * d.dot(Hd);
                        dT.row(l) += Hd.transpose();
                    }
                }
                val += w * T;
                jac += w * dT + T * dw.transpose();
            }
    return {val, jac};
}

// Damped Newton iteration on map_point; backtracks when the residual grows.
inline Vec3 invert_map(const FlowMapData& m, const Vec3& x, const Vec3& seed) {
    const double L = m.box.extent().maxCoeff();
    const double tol = m.options.newton_tol * L;
    Vec3 y = seed;
    auto [Xy, J] = map_point(m, y);
    Vec3 r = Xy - x;
    double rn = r.norm();
    for (int it = 0; it < 50; ++it) {
        if (rn <= tol) return y;
        const Vec3 dy = J.partialPivLu().solve(r);
        double lam = 1.0;
        bool accepted = false;
        for (int b = 0; b < 30 && !accepted; ++b, lam *= 0.5) {
            try {
                auto [Xn, Jn] = map_point(m, y - lam * dy);
                if ((Xn - x).norm() < rn) {
                    y -= lam * dy;
                    r = Xn - x;
                    rn = r.norm();
                    J = Jn;
                    accepted = true;
                }
            } catch (const MapLeftDomain&) {
            }
        }
        if (!accepted) break;
    }
    if (rn <= tol) return y;
    throw NewtonDiverged("inverse map did not converge");
}

inline Vec3 invert_map(const FlowMapData& m, const Vec3& x) { return invert_map(m, x, x); }

inline void metric_and_christoffel(FlowMapData& m) {
    const Grid& g = m.grid;
    m.g_lo = GridField<Mat3>(g);
    m.g_up = GridField<Mat3>(g);
    const bool with_h = m.hessX.size() == g.size();
    m.gamma = GridField<Tensor3>(g);
    if (m.gradY.size() != g.size()) {
        m.gradY = GridField<Mat3>(g);
        for (std::size_t idx = 0; idx < g.size(); ++idx) m.gradY[idx] = m.gradX[idx].inverse();
    }
    int singular = 0;
    for (std::size_t idx = 0; idx < g.size(); ++idx) {
        const Mat3& G = m.gradX[idx];
        const Mat3& Gi = m.gradY[idx];
        m.g_lo[idx] = G.transpose() * G;
        m.g_up[idx] = Gi * Gi.transpose();
        if (std::abs(m.g_lo[idx].determinant()) < 1e-8) singular = 1;
        if (with_h) {
            const Tensor3& H = m.hessX[idx];
            Tensor3 gam;
            for (int k = 0; k < 3; ++k) {
                Mat3 acc = Mat3::Zero();
                for (int l = 0; l < 3; ++l) acc += Gi(k, l) * H[l];
                gam[k] = 0.5 * (acc + acc.transpose());
            }
            m.gamma[idx] = gam;
        }
    }
    if (singular) throw SingularMetric("|det g| < 1e-8");
}

// Christoffel symbols from finite differences of the covariant metric:
// Gamma^k_ij = g^kl (d_j g_il + d_i g_jl - d_l g_ij) / 2.
inline GridField<Tensor3> christoffel_from_metric(const FlowMapData& m) {
    const Grid& g = m.grid;
    GridField<Tensor3> out(g);
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) {
                Mat3 dg[3];
                for (int a = 0; a < 3; ++a)
                    dg[a] = fd::d1(g, [&](int x, int y, int z) { return m.g_lo(x, y, z); }, i, j, k, a);
                const Mat3& gu = m.g_up(i, j, k);
                Tensor3 gam;
                for (int kk = 0; kk < 3; ++kk)
                    for (int a = 0; a < 3; ++a)
                        for (int b = 0; b < 3; ++b) {
                            double v = 0.0;
                            for (int l = 0; l < 3; ++l)
                                v += gu(kk, l) * (dg[b](a, l) + dg[a](b, l) - dg[l](a, b));
                            gam[kk](a, b) = 0.5 * v;
                        }
                out(i, j, k) = gam;
            }
    });
    return out;
}

// U(y) = gradY(X(y)) u(X(y)); the source is either a grid field or any
// callable x -> u(x).
template <class Source>
GridField<Vec3> push_velocity(const Source& u, const FlowMapData& m) {
    GridField<Vec3> U(m.grid);
    parallel_for(0, m.grid.n[2], [&](int k) {
        for (int j = 0; j < m.grid.n[1]; ++j)
            for (int i = 0; i < m.grid.n[0]; ++i) {
                const std::size_t idx = m.grid.index(i, j, k);
                Vec3 ux;
                if constexpr (std::is_same_v<Source, GridField<Vec3>>) {
                    ux = u.sample(m.X[idx]);
                } else {
                    ux = u(m.X[idx]);
                }
                U[idx] = m.gradY[idx] * ux;
            }
    });
    return U;
}

// Trilinear blend of the corner gradient models G_c + H_c d. Smaller error
// than the derivative of map_point when the map is strongly sheared.
inline Mat3 map_jacobian(const FlowMapData& m, const Vec3& y) {
    const Grid& g = m.grid;
    const bool with_h = m.hessX.size() == g.size();
    int c[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        const double s = (y[a] - g.origin[a]) / g.h;
        if (!(s >= -1.0 && s <= g.n[a])) throw MapLeftDomain("map point outside grid band");
        const int ci = std::max(0, std::min(static_cast<int>(std::floor(s)), g.n[a] - 2));
        c[a] = ci;
        t[a] = s - ci;
    }
    Mat3 jac = Mat3::Zero();
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const double w = (di ? t[0] : 1.0 - t[0]) * (dj ? t[1] : 1.0 - t[1]) * (dk ? t[2] : 1.0 - t[2]);
                const std::size_t idx = g.index(c[0] + di, c[1] + dj, c[2] + dk);
                Mat3 dT = m.gradX[idx];
                if (with_h) {
                    const Vec3 d = y - g.point(c[0] + di, c[1] + dj, c[2] + dk);
                    for (int l = 0; l < 3; ++l) dT.row(l) += (m.hessX[idx][l] * d).transpose();
                }
                jac += w * dT;
            }
    return jac;
}

// gradX(y) U(y) at a reference point y, i.e. u at x = X(y).
inline Vec3 pull_velocity_at(const GridField<Vec3>& U, const FlowMapData& m, const Vec3& y) {
    return map_jacobian(m, y) * U.sample(y);
}

// u(x) = gradX(Y(x)) U(Y(x)) on the current-domain nodes.
inline GridField<Vec3> pull_velocity(const GridField<Vec3>& U, const FlowMapData& m) {
    if (m.Y.size() != m.grid.size()) throw InvalidSpec("pull_velocity needs the inverse map");
    GridField<Vec3> u(m.grid);
    parallel_for(0, m.grid.n[2], [&](int k) {
        for (int j = 0; j < m.grid.n[1]; ++j)
            for (int i = 0; i < m.grid.n[0]; ++i) {
                const std::size_t idx = m.grid.index(i, j, k);
                u[idx] = pull_velocity_at(U, m, m.Y[idx]);
            }
    });
    return u;
}

// Discrete divergence of a nodal vector field.
inline GridField<double> divergence(const GridField<Vec3>& U) {
    const Grid& g = U.grid;
    GridField<double> d(g);
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) {
                double v = 0.0;
                for (int a = 0; a < 3; ++a)
                    v += fd::d1(g, [&](int x, int y, int z) { return U(x, y, z)[a]; }, i, j, k, a);
                d(i, j, k) = v;
            }
    });
    return d;
}

}  // namespace fsirb
