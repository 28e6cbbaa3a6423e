#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/grid.hpp"
#include "fsirb/core/parallel.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/flow_map.hpp"
#include "fsirb/fsi_solver.hpp"
#include "fsirb/transformed_ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

namespace fsirb {

// Serrin pair 3/s + 2/r = 1 with the exponents of the pressure and
// trilinear estimates: 1/q = 1/2 + 1/s, 1/p = 1/2 + 1/r.
struct SerrinSpec {
    double s = 4.0;
    double r = 8.0;
    double p = 1.6;
    double q = 4.0 / 3.0;

    static SerrinSpec from_s(double s) {
        if (!(s > 3.0)) throw InvalidSpec("serrin exponent s must exceed 3");
        SerrinSpec out;
        out.s = s;
        out.r = std::isinf(s) ? 2.0 : 2.0 * s / (s - 3.0);
        out.q = 1.0 / (0.5 + 1.0 / out.s);
        out.p = 1.0 / (0.5 + 1.0 / out.r);
        return out;
    }

    // conjugates 1/p + 1/p' = 1
    double p_conj() const { return 1.0 / (1.0 - 1.0 / p); }
    double q_conj() const { return 1.0 / (1.0 - 1.0 / q); }

    void validate() const {
        if (!(s > 3.0) || !(r >= 2.0)) throw InvalidSpec("serrin exponents need s > 3");
        if (std::abs(3.0 / s + 2.0 / r - 1.0) > 1e-12) throw InvalidSpec("3/s + 2/r != 1");
        if (std::abs(1.0 / q - 0.5 - 1.0 / s) > 1e-12 || std::abs(1.0 / p - 0.5 - 1.0 / r) > 1e-12)
            throw InvalidSpec("p, q inconsistent with s, r");
    }
};

namespace detail {

inline double magnitude(double v) { return std::abs(v); }
inline double magnitude(const Vec3& v) { return v.norm(); }

}  // namespace detail

// Discrete L^s norm with the grid's quadrature weights; s = inf is the max.
template <class T>
double serrin_norm(const GridField<T>& u, double s) {
    if (!(s >= 1.0)) throw InvalidSpec("norm exponent must be at least 1");
    const Grid& g = u.grid;
    if (std::isinf(s)) {
        double m = 0.0;
        for (const T& v : u.data) m = std::max(m, detail::magnitude(v));
        return m;
    }
    const double sum = detail::slab_sum(g.n[2], [&](int k) {
        double acc = 0.0;
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) acc += g.weight(i, j, k) * std::pow(detail::magnitude(u(i, j, k)), s);
        return acc;
    });
    return std::pow(sum, 1.0 / s);
}

inline double serrin_norm(const MacField& u, const MacGrid& g, double s) { return serrin_norm(cell_velocity(u, g), s); }

// Trapezoid sum of ||u(t_n)||_s^r over an equally spaced series.
template <class T>
double serrin_accumulate(const std::vector<GridField<T>>& series, const SerrinSpec& spec, double dt) {
    if (series.size() < 2) return 0.0;
    double acc = 0.0;
    for (std::size_t n = 0; n < series.size(); ++n) {
        const double w = (n == 0 || n + 1 == series.size()) ? 0.5 : 1.0;
        acc += w * std::pow(serrin_norm(series[n], spec.s), spec.r);
    }
    return acc * dt;
}

// ---------------------------------------------------------------------------
// Rotations of two trajectories

inline Vec3 axial(const Mat3& W) {
    return 0.5 * Vec3(W(2, 1) - W(1, 2), W(0, 2) - W(2, 0), W(1, 0) - W(0, 1));
}

// Q = Q2 Q1^T
inline Mat3 relative_rotation(const RigidState& s1, const RigidState& s2) { return s2.Q * s1.Q.transpose(); }

// axial(Q^T Q') with a five-point stencil in t
inline Vec3 omega_tilde(const Trajectory& t1, const Trajectory& t2, double t, double eps = 1e-3) {
    auto Q = [&](double tau) { return relative_rotation(t1(tau), t2(tau)); };
    const Mat3 dQ = (Q(t - 2 * eps) - 8.0 * Q(t - eps) + 8.0 * Q(t + eps) - Q(t + 2 * eps)) / (12.0 * eps);
    return axial(Q(t).transpose() * dQ);
}

// Omega_2 - omega_1 with Omega_2 = Q^T omega_2
inline Vec3 omega_difference(const RigidState& s1, const RigidState& s2) {
    return relative_rotation(s1, s2).transpose() * s2.omega - s1.omega;
}

// RK4 for Z' = Z W(t), W = Q2^T Q2' = skew(Q2^T omega_2), from Z(t0) = Z0.
inline Mat3 reconstruct_rotation(const Trajectory& t2, const Mat3& Z0, double t0, double t1, int steps) {
    if (steps < 1) throw InvalidSpec("steps must be positive");
    auto W = [&](double t) {
        const RigidState s = t2(t);
        return skew(Vec3(s.Q.transpose() * s.omega));
    };
    const double h = (t1 - t0) / steps;
    Mat3 Z = Z0;
    for (int n = 0; n < steps; ++n) {
        const double t = t0 + n * h;
        const Mat3 Wa = W(t), Wb = W(t + 0.5 * h), Wc = W(t + h);
        const Mat3 k1 = Z * Wa;
        const Mat3 k2 = (Z + 0.5 * h * k1) * Wb;
        const Mat3 k3 = (Z + 0.5 * h * k2) * Wb;
        const Mat3 k4 = (Z + h * k3) * Wc;
        Z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return Z;
}

// ---------------------------------------------------------------------------
// Composed maps

// Face-wise trilinear sample of a staggered field.
inline Vec3 mac_sample(const MacField& u, const Vec3& x) {
    return Vec3(u.c[0].sample(x), u.c[1].sample(x), u.c[2].sample(x));
}

// X~2 = X2 o Y1 on the current nodes of run 1, with gradX from the corner
// Jacobians and, if requested, the Hessian and gradient of dX/dt by central
// differences, the metric and the Christoffel symbols. dX~2/dt at fixed x1
// is Lambda2(X~2) - gradX~2 Lambda1(x1).
inline FlowMapData composite_map(const FlowMapData& m1, const FlowMapData& m2, const RigidState& s1,
                                 const RigidState& s2, bool derivatives = true) {
    if (!m1.grid.same_as(m2.grid)) throw MismatchedScenario("maps live on different grids");
    if (m1.Y.size() != m1.grid.size()) throw InvalidSpec("first map needs its inverse");
    const Grid& g = m1.grid;
    FlowMapData c;
    c.t = m1.t;
    c.grid = g;
    c.box = m1.box;
    c.cutoff = m1.cutoff;
    c.options = MapOptions{derivatives, false, derivatives, m1.options.newton_tol};
    c.X = GridField<Vec3>(g);
    c.gradX = GridField<Mat3>(g);
    c.dXdt = GridField<Vec3>(g);
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) {
                const std::size_t idx = g.index(i, j, k);
                const Vec3& y = m1.Y[idx];
                const Vec3 x2 = map_point(m2, y).first;
                const Mat3 G = map_jacobian(m2, y) * map_jacobian(m1, y).inverse();
                c.X[idx] = x2;
                c.gradX[idx] = G;
                if (derivatives)
                    c.dXdt[idx] = lambda_field(s2, m2.cutoff, x2).first -
                                  G * lambda_field(s1, m1.cutoff, g.point(i, j, k)).first;
            }
    });
    c.gradY = GridField<Mat3>(g);
    for (std::size_t idx = 0; idx < g.size(); ++idx) c.gradY[idx] = c.gradX[idx].inverse();
    if (!derivatives) return c;
    c.hessX = GridField<Tensor3>(g);
    c.dgradXdt = GridField<Mat3>(g);
    parallel_for(0, g.n[2], [&](int k) {
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) {
                std::array<Mat3, 3> dG;
                Mat3 dV;
                for (int b = 0; b < 3; ++b) {
                    dG[b] = fd::d1(g, [&](int x, int y, int z) { return c.gradX(x, y, z); }, i, j, k, b);
                    dV.col(b) = fd::d1(g, [&](int x, int y, int z) { return c.dXdt(x, y, z); }, i, j, k, b);
                }
                Tensor3 H;
                for (int l = 0; l < 3; ++l)
                    for (int a = 0; a < 3; ++a)
                        for (int b = 0; b < 3; ++b) H[l](a, b) = 0.5 * (dG[b](l, a) + dG[a](l, b));
                c.hessX(i, j, k) = H;
                c.dgradXdt(i, j, k) = dV;
            }
    });
    metric_and_christoffel(c);
    return c;
}

// U2 = gradX~1(X~2) u2(X~2) = (gradX~2)^-1 u2(X~2), P2 = p2(X~2).
inline TransformedState transform_fields(const SolverState& st2, const FlowMapData& composite, const Mat3& Q) {
    TransformedState out;
    out.U = push_velocity([&](const Vec3& x) { return mac_sample(st2.u, x); }, composite);
    out.P = GridField<double>(composite.grid);
    for (std::size_t idx = 0; idx < out.P.size(); ++idx) out.P[idx] = st2.p.sample(composite.X[idx]);
    out.A = Q.transpose() * st2.rigid.a;
    out.Omega = Q.transpose() * st2.rigid.omega;
    return out;
}

struct TransformedSnapshot {
    double t = 0.0;
    TransformedState state;
    Mat3 Q = Mat3::Identity();
    Vec3 omega_diff = Vec3::Zero();  // Omega_2 - omega_1
};

// Node grid of the maps for a scenario.
inline Grid map_grid(const Scenario& sc) { return Grid::nodes(sc.container.lo, sc.h(), {sc.grid_n, sc.grid_n, sc.grid_n}); }

// Wide quintic transition band for the comparison maps: they are sampled on
// the solver grid, and a band of one or two cells folds the interpolant.
inline CutoffSpec comparison_cutoff(const Scenario& sc) {
    CutoffSpec c;
    c.profile = CutoffProfile::quintic;
    c.r_inner = 1.25 * sc.body.radius;
    c.r_outer = 0.85 * sc.container.wall_distance(sc.body.center);
    c.validate();
    return c;
}

inline void require_aligned(const Scenario& a, const RunResult& ra, const Scenario& b, const RunResult& rb) {
    if (!(a.container.lo == b.container.lo) || !(a.container.hi == b.container.hi))
        throw MismatchedScenario("containers differ");
    if (!(a.body.center == b.body.center) || a.body.radius != b.body.radius || a.body.rho_s != b.body.rho_s)
        throw MismatchedScenario("body specs differ");
    if (a.grid_n != b.grid_n || a.dt != b.dt) throw MismatchedScenario("time or space grids differ");
    if (ra.snapshots.size() != rb.snapshots.size() || ra.trajectory.size() != rb.trajectory.size())
        throw MismatchedScenario("runs have different lengths");
    for (std::size_t n = 0; n < ra.snapshots.size(); ++n)
        if (ra.snapshots[n].step != rb.snapshots[n].step) throw MismatchedScenario("snapshot steps differ");
}

using TransformVisitor = std::function<void(const SolverState& st1, const SolverState& st2, const FlowMapData& m1,
                                            const FlowMapData& m2, const TransformedSnapshot& snap)>;

// Walks both runs, advancing the two flow maps along the recorded
// trajectories with the solver step, and calls `visit` at every snapshot.
inline void for_each_transformed(const Scenario& sc1, const RunResult& r1, const Scenario& sc2, const RunResult& r2,
                                 const TransformVisitor& visit) {
    require_aligned(sc1, r1, sc2, r2);
    const SampledTrajectory tr1(r1.trajectory), tr2(r2.trajectory);
    const Grid g = map_grid(sc1);
    const CutoffSpec cut = comparison_cutoff(sc1);
    FlowMapData m1 = identity_map(g, sc1.container, cut, 0.0, MapOptions{true, true, false});
    FlowMapData m2 = identity_map(g, sc2.container, cut, 0.0, MapOptions{true, false, false});
    int at = 0;
    for (std::size_t n = 0; n < r1.snapshots.size(); ++n) {
        const SolverState& st1 = r1.snapshots[n];
        const SolverState& st2 = r2.snapshots[n];
        for (; at < st1.step; ++at) {
            m1 = advance_flowmap(m1, tr1, sc1.dt);
            m2 = advance_flowmap(m2, tr2, sc1.dt);
        }
        TransformedSnapshot snap;
        snap.t = st1.t;
        snap.Q = relative_rotation(st1.rigid, st2.rigid);
        snap.omega_diff = omega_difference(st1.rigid, st2.rigid);
        const FlowMapData comp = composite_map(m1, m2, st1.rigid, st2.rigid, false);
        snap.state = transform_fields(st2, comp, snap.Q);
        visit(st1, st2, m1, m2, snap);
    }
}

inline std::vector<TransformedSnapshot> transform_second_solution(const Scenario& sc1, const RunResult& r1,
                                                                  const Scenario& sc2, const RunResult& r2) {
    std::vector<TransformedSnapshot> out;
    for_each_transformed(sc1, r1, sc2, r2,
                         [&](const SolverState&, const SolverState&, const FlowMapData&, const FlowMapData&,
                             const TransformedSnapshot& s) { out.push_back(s); });
    return out;
}

// ---------------------------------------------------------------------------
// Gronwall experiment

namespace detail {

inline double node_l2_sq(const GridField<Vec3>& a, const GridField<Vec3>& b) {
    const Grid& g = a.grid;
    return slab_sum(g.n[2], [&](int k) {
        double acc = 0.0;
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i) acc += g.weight(i, j, k) * (a(i, j, k) - b(i, j, k)).squaredNorm();
        return acc;
    });
}

inline GridField<Vec3> node_samples(const MacField& u, const Grid& g) {
    GridField<Vec3> out(g);
    for (std::size_t idx = 0; idx < g.size(); ++idx) {
        const auto p = g.ijk(idx);
        out[idx] = mac_sample(u, g.point(p[0], p[1], p[2]));
    }
    return out;
}

}  // namespace detail

struct GronwallOptions {
    double fit_fraction = 0.25;
    int pressure_refine = 1;  // P2 sampled on a grid this many times finer
};

struct GronwallReport {
    double delta = 0.0;
    std::vector<double> times;
    std::vector<double> diff_norm;
    std::vector<double> integrand;
    std::vector<double> velocity_part;  // ||U2||_s^r
    std::vector<double> pressure_part;  // ||t grad P2||_q^p
    std::vector<double> integral;  // running trapezoid of the integrand
    std::vector<double> bound;
    double C_fit = 0.0;  // smallest C >= 0 with diff <= bound on the fit window
    double C_ls = 0.0;   // least-squares slope of log(diff / delta^2) against the integral
    std::size_t fit_end = 0;
    bool zero_ok = false;
    bool sandwich_ok = false;
};

// ||t grad P2||_{L^q}, with P2 = p2 o X~2 on a node grid `refine` times finer.
inline double pressure_term(const SolverState& st2, const FlowMapData& m1, const FlowMapData& m2,
                            const FlowMapData& comp_coarse, double q, int refine) {
    GridField<double> P;
    if (refine <= 1) {
        P = GridField<double>(comp_coarse.grid);
        for (std::size_t idx = 0; idx < P.size(); ++idx) P[idx] = st2.p.sample(comp_coarse.X[idx]);
    } else {
        const Grid& c = m1.grid;
        const Grid f = Grid::nodes(c.origin, c.h / refine, {(c.n[0] - 1) * refine, (c.n[1] - 1) * refine,
                                                            (c.n[2] - 1) * refine});
        P = GridField<double>(f);
        parallel_for(0, f.n[2], [&](int k) {
            for (int j = 0; j < f.n[1]; ++j)
                for (int i = 0; i < f.n[0]; ++i) {
                    const Vec3 x = f.point(i, j, k);
                    const Vec3 y = invert_map(m1, x);
                    P(i, j, k) = st2.p.sample(map_point(m2, y).first);
                }
        });
    }
    GridField<Vec3> dP = gradient_h(P);
    for (Vec3& v : dP.data) v *= st2.t;
    return serrin_norm(dP, q);
}

// Compares two aligned runs; delta is the L2 size of the initial difference.
inline GronwallReport gronwall_compare(const Scenario& sc, const RunResult& r1, const RunResult& r2, double delta,
                                       const SerrinSpec& spec, const GronwallOptions& opt = {}) {
    spec.validate();
    GronwallReport rep;
    rep.delta = delta;
    for_each_transformed(sc, r1, sc, r2,
                         [&](const SolverState& st1, const SolverState& st2, const FlowMapData& m1,
                             const FlowMapData& m2, const TransformedSnapshot& snap) {
                             // run 1 through the same pipeline, so the common interpolation error cancels
                             const FlowMapData self = composite_map(m1, m1, st1.rigid, st1.rigid, false);
                             const TransformedState u1 = transform_fields(st1, self, Mat3::Identity());
                             const FlowMapData comp = composite_map(m1, m2, st1.rigid, st2.rigid, false);
                             rep.times.push_back(snap.t);
                             rep.diff_norm.push_back(detail::node_l2_sq(u1.U, snap.state.U));
                             const double pu = std::pow(serrin_norm(snap.state.U, spec.s), spec.r);
                             const double pp = std::pow(pressure_term(st2, m1, m2, comp, spec.q, opt.pressure_refine),
                                                        spec.p);
                             rep.velocity_part.push_back(pu);
                             rep.pressure_part.push_back(pp);
                             rep.integrand.push_back(1.0 + pu + pp);
                         });
    const std::size_t n = rep.times.size();
    rep.integral.assign(n, 0.0);
    for (std::size_t i = 1; i < n; ++i)
        rep.integral[i] = rep.integral[i - 1] +
                          0.5 * (rep.times[i] - rep.times[i - 1]) * (rep.integrand[i] + rep.integrand[i - 1]);
    rep.zero_ok = std::all_of(rep.diff_norm.begin(), rep.diff_norm.end(), [](double v) { return v == 0.0; });
    const double d2 = delta * delta;
    const double t_fit = rep.times.empty() ? 0.0 : rep.times.front() + opt.fit_fraction * (rep.times.back() - rep.times.front());
    double sLI = 0.0, sII = 0.0, cmax = 0.0;
    for (std::size_t i = 0; i < n && rep.times[i] <= t_fit + 1e-12; ++i) {
        rep.fit_end = i + 1;
        if (!(rep.integral[i] > 0.0) || !(rep.diff_norm[i] > 0.0) || !(d2 > 0.0)) continue;
        const double L = std::log(rep.diff_norm[i] / d2);
        sLI += L * rep.integral[i];
        sII += rep.integral[i] * rep.integral[i];
        cmax = std::max(cmax, L / rep.integral[i]);
    }
    rep.C_ls = sII > 0.0 ? sLI / sII : 0.0;
    rep.C_fit = cmax;
    rep.bound.resize(n);
    rep.sandwich_ok = true;
    for (std::size_t i = 0; i < n; ++i) {
        rep.bound[i] = d2 * std::exp(rep.C_fit * rep.integral[i]);
        if (rep.diff_norm[i] > rep.bound[i] * (1.0 + 1e-9)) rep.sandwich_ok = false;
    }
    return rep;
}

// L2 norm on the map nodes of the initial state change caused by a unit
// perturbation coefficient. The initial state is affine in the velocity
// data, so the change is the initial state of the scenario with zero data.
inline double perturbation_gain(const Scenario& sc) {
    Scenario z = sc;
    z.u0.preset = "zero";
    z.u0.amplitude = 0.0;
    z.a0 = Vec3::Zero();
    z.omega0 = Vec3::Zero();
    const double c = std::min(1.0, 0.1 * sc.h() / sc.dt);
    z.u0.perturbation = c;
    const SolverState st = FsiSolver(z).initialize();
    const GridField<Vec3> du = detail::node_samples(st.u, map_grid(sc));
    return std::sqrt(detail::node_l2_sq(du, GridField<Vec3>(du.grid))) / c;
}

// The scenario with u0 perturbed by the seeded solenoidal field scaled so
// the initial L2 difference is delta.
inline Scenario perturbed(const Scenario& sc, double delta) {
    if (!(delta >= 0.0)) throw InvalidSpec("delta must be nonnegative");
    Scenario out = sc;
    out.u0.perturbation = delta == 0.0 ? 0.0 : delta / perturbation_gain(sc);
    return out;
}

inline Scenario with_every_step(Scenario sc) {
    if (sc.snapshot_every <= 0) sc.snapshot_every = 1;
    return sc;
}

inline GronwallReport gronwall_experiment(const Scenario& scenario, double delta, const SerrinSpec& spec,
                                          const GronwallOptions& opt = {}) {
    const Scenario sc = with_every_step(scenario);
    const RunResult r1 = run(sc);
    const RunResult r2 = run(perturbed(sc, delta));
    return gronwall_compare(sc, r1, r2, delta, spec, opt);
}

inline void write_gronwall_csv(std::ostream& os, const GronwallReport& rep) {
    os.precision(17);
    os << "t,diff_norm,integrand,bound\n";
    for (std::size_t i = 0; i < rep.times.size(); ++i)
        os << rep.times[i] << ',' << rep.diff_norm[i] << ',' << rep.integrand[i] << ',' << rep.bound[i] << '\n';
}

inline void write_gronwall_summary(std::ostream& os, const GronwallReport& rep) {
    os << "delta " << rep.delta << "\n"
       << "C_fit " << rep.C_fit << "\n"
       << "C_ls " << rep.C_ls << "\n"
       << "fit_window_samples " << rep.fit_end << "\n"
       << "diff_norm_final " << (rep.diff_norm.empty() ? 0.0 : rep.diff_norm.back()) << "\n"
       << "diff_identically_zero " << (rep.zero_ok ? "yes" : "no") << "\n"
       << "sandwich " << (rep.sandwich_ok ? "holds" : "violated") << "\n";
}

// ---------------------------------------------------------------------------
// Transformed energy equality

struct EnergyEqualityTerms {
    double t = 0.0;
    double kinetic = 0.0;      // 1/2 int rho |U2(t)|^2
    double convective = 0.0;   // int_0^t int_F rho (U2 - u1) . grad U2 . U2
    double dissipation = 0.0;  // int_0^t int_F 2 mu |D U2|^2
    double forcing = 0.0;      // int_0^t <F, U2>_F
    double initial = 0.0;      // 1/2 int rho |U2(0)|^2

    double residual() const { return kinetic + convective + dissipation - forcing - initial; }
};

// Every term by nodal trapezoid quadrature, time integrals by the
// trapezoid rule over the snapshots. F = mu (L - Lap) U - rho (M + N~) U
// - (G - grad) P on the composed map.
inline std::vector<EnergyEqualityTerms> energy_equality_terms(const Scenario& sc1, const RunResult& r1,
                                                              const Scenario& sc2, const RunResult& r2) {
    std::vector<EnergyEqualityTerms> out;
    double prev_t = 0.0, prev_c = 0.0, prev_d = 0.0, prev_f = 0.0;
    for_each_transformed(
        sc1, r1, sc2, r2,
        [&](const SolverState& st1, const SolverState& st2, const FlowMapData& m1, const FlowMapData& m2,
            const TransformedSnapshot& snap) {
            const FlowMapData comp = composite_map(m1, m2, st1.rigid, st2.rigid, true);
            const GridField<Vec3>& U = snap.state.U;
            const Grid& g = U.grid;
            const GridField<Vec3> u1 = detail::node_samples(st1.u, g);
            const auto LU = op_L(U, comp), DU = laplacian_h(U), MU = op_M(U, comp), NU = op_N_tilde(U, comp);
            const auto GP = op_G(snap.state.P, comp), dP = gradient_h(snap.state.P);
            const double r = sc1.body.radius;
            double kin = 0.0, c = 0.0, d = 0.0, f = 0.0;
            for (std::size_t idx = 0; idx < g.size(); ++idx) {
                const auto p = g.ijk(idx);
                const Vec3 x = g.point(p[0], p[1], p[2]);
                const double w = g.weight(p[0], p[1], p[2]);
                const bool solid = (x - st1.rigid.q).norm() < r;
                kin += 0.5 * w * (solid ? sc1.body.rho_s : sc1.rho_f) * U[idx].squaredNorm();
                if (solid) continue;
                const Mat3 gU = detail::grad_at(U, p[0], p[1], p[2]);
                const Mat3 D = 0.5 * (gU + gU.transpose());
                c += w * sc1.rho_f * (gU * (U[idx] - u1[idx])).dot(U[idx]);
                d += w * 2.0 * sc1.mu * D.squaredNorm();
                const Vec3 F = sc1.mu * (LU[idx] - DU[idx]) - sc1.rho_f * (MU[idx] + NU[idx]) - (GP[idx] - dP[idx]);
                f += w * F.dot(U[idx]);
            }
            EnergyEqualityTerms e;
            e.t = snap.t;
            e.kinetic = kin;
            if (out.empty()) {
                e.initial = kin;
            } else {
                const EnergyEqualityTerms& b = out.back();
                const double dt = snap.t - prev_t;
                e.initial = b.initial;
                e.convective = b.convective + 0.5 * dt * (c + prev_c);
                e.dissipation = b.dissipation + 0.5 * dt * (d + prev_d);
                e.forcing = b.forcing + 0.5 * dt * (f + prev_f);
            }
            prev_t = snap.t;
            prev_c = c;
            prev_d = d;
            prev_f = f;
            out.push_back(e);
        });
    return out;
}

// Signed residual of the energy equality at the final snapshot.
inline double energy_equality_check(const Scenario& sc1, const RunResult& r1, const Scenario& sc2,
                                    const RunResult& r2) {
    const auto terms = energy_equality_terms(sc1, r1, sc2, r2);
    return terms.empty() ? 0.0 : terms.back().residual();
}

}  // namespace fsirb
