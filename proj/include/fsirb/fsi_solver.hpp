#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/geometry.hpp"
#include "fsirb/core/grid.hpp"
#include "fsirb/core/parallel.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/rigid_dynamics.hpp"

#include <fftw3.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace fsirb {

enum class Coupling { no_slip, navier_slip };

inline std::string to_string(Coupling c) { return c == Coupling::no_slip ? "no_slip" : "navier_slip"; }

// Initial fluid velocity: a preset scaled by amplitude plus an optional
// seeded solenoidal perturbation of max-norm `perturbation`.
struct InitialVelocity {
    std::string preset = "zero";  // zero | vortex | random
    double amplitude = 0.0;
    std::uint64_t seed = 1;
    double perturbation = 0.0;
    std::uint64_t perturbation_seed = 7;
};

struct Scenario {
    Box container;
    BodySpec body;
    double rho_f = 1.0;
    double mu = 0.05;
    double beta = 0.0;
    Coupling coupling = Coupling::no_slip;
    InitialVelocity u0;
    Vec3 a0 = Vec3::Zero();
    Vec3 omega0 = Vec3::Zero();
    int grid_n = 48;
    double dt = 1e-3;
    double T = 0.1;
    double delta_wall = 0.02;
    int snapshot_every = 0;  // 0: initial and final only

    double h() const { return container.extent().x() / grid_n; }
    int steps() const { return static_cast<int>(std::ceil(T / dt - 1e-9)); }

    // Everything except the CFL bound on u0, which needs the sampled field.
    void validate() const {
        const Vec3 ext = container.extent();
        if (!(ext.minCoeff() > 0.0)) throw InvalidSpec("container must have positive extent");
        if (std::abs(ext.x() - ext.y()) > 1e-12 * ext.x() || std::abs(ext.x() - ext.z()) > 1e-12 * ext.x())
            throw InvalidSpec("container must be a cube");
        if (grid_n < 4) throw InvalidSpec("grid_n must be at least 4");
        if (!(rho_f > 0.0) || !(mu > 0.0)) throw InvalidSpec("rho_F and mu must be positive");
        if (!(body.radius > 0.0)) throw InvalidSpec("body radius must be positive");
        if (body.rho_s < rho_f) throw InvalidSpec("body density below fluid density is not supported");
        if (coupling == Coupling::navier_slip && !(beta > 0.0)) throw InvalidSpec("navier_slip needs beta > 0");
        if (!(dt > 0.0) || !(T >= 0.0)) throw InvalidSpec("dt must be positive and T nonnegative");
        if (!(delta_wall >= 0.0)) throw InvalidSpec("delta_wall must be nonnegative");
        if (dt > 0.25 * h() * h() / (mu / rho_f)) throw CFLViolation("dt > 0.25 h^2 / nu");
    }
};

// Staggered layout on the cube container: component d lives on the faces
// normal to axis d, (N+1) samples along d and N along the other axes.
struct MacGrid {
    Vec3 lo = Vec3::Zero();
    double h = 1.0;
    int N = 4;

    static MacGrid of(const Scenario& sc) { return MacGrid{sc.container.lo, sc.h(), sc.grid_n}; }

    Grid face(int d) const {
        Vec3 o = lo + Vec3::Constant(0.5 * h);
        o[d] = lo[d];
        std::array<int, 3> n{N, N, N};
        n[d] = N + 1;
        return Grid{o, h, n, false};
    }
    Grid cells() const { return Grid::cells(lo, h, {N, N, N}); }
};

struct MacField {
    std::array<GridField<double>, 3> c;

    MacField() = default;
    explicit MacField(const MacGrid& g) {
        for (int d = 0; d < 3; ++d) c[d] = GridField<double>(g.face(d), 0.0);
    }
};

struct SolverState {
    double t = 0.0;
    int step = 0;
    MacField u;
    GridField<double> p;        // cell-centred pressure
    RigidState rigid;
    MacField mask;              // fraction of each face control volume inside S(t)
    double dissipation = 0.0;   // accumulated interior viscous dissipation
    double slip_dissipation = 0.0;
    double energy0 = 0.0;
};

struct EnergyRecord {
    double t = 0.0;
    double kinetic = 0.0;
    double dissipation = 0.0;
    double slip_dissipation = 0.0;
    double slack = 0.0;  // E(0) - E(t) - D(t)
};

namespace detail {

// Deterministic uniform in [-1, 1).
inline double uniform_pm1(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return 2.0 * static_cast<double>(z >> 11) * 0x1.0p-53 - 1.0;
}

// Sum of per-slab partial sums in slab order.
template <class F>
double slab_sum(int n, F&& f) {
    std::vector<double> part(static_cast<std::size_t>(n), 0.0);
    parallel_for(0, n, [&](int k) { part[static_cast<std::size_t>(k)] = f(k); });
    double s = 0.0;
    for (double v : part) s += v;
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Field utilities

inline double mac_dot(const MacField& a, const MacField& b, double h) {
    double s = 0.0;
    for (int d = 0; d < 3; ++d) {
        const Grid& g = a.c[d].grid;
        s += detail::slab_sum(g.n[2], [&](int k) {
            double v = 0.0;
            for (int j = 0; j < g.n[1]; ++j)
                for (int i = 0; i < g.n[0]; ++i) v += a.c[d](i, j, k) * b.c[d](i, j, k);
            return v;
        });
    }
    return s * h * h * h;
}

inline double mac_max(const MacField& a) {
    double m = 0.0;
    for (int d = 0; d < 3; ++d)
        for (double v : a.c[d].data) m = std::max(m, std::abs(v));
    return m;
}

inline bool mac_finite(const MacField& a) {
    for (int d = 0; d < 3; ++d)
        for (double v : a.c[d].data)
            if (!std::isfinite(v)) return false;
    return true;
}

inline GridField<double> mac_divergence(const MacField& u, const MacGrid& g) {
    GridField<double> div(g.cells(), 0.0);
    parallel_for(0, g.N, [&](int k) {
        for (int j = 0; j < g.N; ++j)
            for (int i = 0; i < g.N; ++i)
                div(i, j, k) = (u.c[0](i + 1, j, k) - u.c[0](i, j, k) + u.c[1](i, j + 1, k) - u.c[1](i, j, k) +
                                u.c[2](i, j, k + 1) - u.c[2](i, j, k)) /
                               g.h;
    });
    return div;
}

// Max |div u| over cells none of whose faces touch the body mask.
inline double fluid_divergence_max(const MacField& u, const MacField& mask, const MacGrid& g) {
    const auto div = mac_divergence(u, g);
    double m = 0.0;
    for (int k = 0; k < g.N; ++k)
        for (int j = 0; j < g.N; ++j)
            for (int i = 0; i < g.N; ++i) {
                if (mask.c[0](i, j, k) > 0 || mask.c[0](i + 1, j, k) > 0 || mask.c[1](i, j, k) > 0 ||
                    mask.c[1](i, j + 1, k) > 0 || mask.c[2](i, j, k) > 0 || mask.c[2](i, j, k + 1) > 0)
                    continue;
                m = std::max(m, std::abs(div(i, j, k)));
            }
    return m;
}

// Cell-centred velocity by averaging opposite faces.
inline GridField<Vec3> cell_velocity(const MacField& u, const MacGrid& g) {
    GridField<Vec3> out(g.cells());
    parallel_for(0, g.N, [&](int k) {
        for (int j = 0; j < g.N; ++j)
            for (int i = 0; i < g.N; ++i)
                out(i, j, k) = 0.5 * Vec3(u.c[0](i, j, k) + u.c[0](i + 1, j, k), u.c[1](i, j, k) + u.c[1](i, j + 1, k),
                                          u.c[2](i, j, k) + u.c[2](i, j, k + 1));
    });
    return out;
}

// Samples x -> v(x) on the faces (normal component).
template <class F>
MacField sample_mac(const MacGrid& g, F&& v) {
    MacField u(g);
    for (int d = 0; d < 3; ++d) {
        const Grid fg = g.face(d);
        parallel_for(0, fg.n[2], [&](int k) {
            for (int j = 0; j < fg.n[1]; ++j)
                for (int i = 0; i < fg.n[0]; ++i) {
                    const int idx[3] = {i, j, k};
                    if (idx[d] == 0 || idx[d] == g.N) continue;  // wall normal faces stay zero
                    u.c[d](i, j, k) = v(fg.point(i, j, k))[d];
                }
        });
    }
    return u;
}

// Discrete curl of an edge potential A(x) that vanishes on the walls; the
// result is exactly discretely solenoidal with zero wall flux.
template <class F>
MacField curl_of_potential(const MacGrid& g, F&& A) {
    const double h = g.h;
    // edge e_c: centred along c, nodes along the other axes
    auto edge_point = [&](int c, int i, int j, int k) {
        Vec3 p = g.lo + h * Vec3(i, j, k);
        p[c] += 0.5 * h;
        return p;
    };
    MacField u(g);
    for (int d = 0; d < 3; ++d) {
        const int a = (d + 1) % 3, b = (d + 2) % 3;
        const Grid fg = g.face(d);
        parallel_for(0, fg.n[2], [&](int k) {
            for (int j = 0; j < fg.n[1]; ++j)
                for (int i = 0; i < fg.n[0]; ++i) {
                    std::array<int, 3> n{i, j, k};
                    if (n[d] == 0 || n[d] == g.N) continue;
                    // u_d = d_a A_b - d_b A_a; A_b edges are centred along b
                    std::array<int, 3> p = n, q = n;
                    p[a] += 1;
                    const double dAb = (A(edge_point(b, p[0], p[1], p[2]))[b] - A(edge_point(b, q[0], q[1], q[2]))[b]) / h;
                    p = n;
                    p[b] += 1;
                    const double dAa = (A(edge_point(a, p[0], p[1], p[2]))[a] - A(edge_point(a, q[0], q[1], q[2]))[a]) / h;
                    u.c[d](i, j, k) = dAb - dAa;
                }
        });
    }
    return u;
}

// Smooth random potential with zero trace on the walls; unit max velocity.
inline MacField random_solenoidal(const MacGrid& g, std::uint64_t seed) {
    const double L = g.N * g.h;
    std::array<std::array<double, 27>, 3> coef{};
    std::uint64_t s = seed * 0x2545F4914F6CDD1DULL + 1;
    for (auto& c : coef)
        for (auto& v : c) v = detail::uniform_pm1(s);
    auto A = [&](const Vec3& x) {
        const Vec3 y = (x - g.lo) / L;
        Vec3 out = Vec3::Zero();
        for (int m = 0; m < 27; ++m) {
            const int k1 = 1 + m % 3, k2 = 1 + (m / 3) % 3, k3 = 1 + m / 9;
            const double phase = std::sin(M_PI * k1 * y.x()) * std::sin(M_PI * k2 * y.y()) * std::sin(M_PI * k3 * y.z());
            const double w = 1.0 / (k1 * k1 + k2 * k2 + k3 * k3);
            for (int c = 0; c < 3; ++c) out[c] += w * coef[c][m] * phase;
        }
        return out;
    };
    MacField u = curl_of_potential(g, A);
    const double m = mac_max(u);
    if (m > 0)
        for (int d = 0; d < 3; ++d)
            for (double& v : u.c[d].data) v /= m;
    return u;
}

inline MacField initial_velocity(const MacGrid& g, const InitialVelocity& spec) {
    MacField u(g);
    const double L = g.N * g.h;
    if (spec.preset == "zero") {
    } else if (spec.preset == "vortex") {
        u = curl_of_potential(g, [&](const Vec3& x) {
            const Vec3 y = (x - g.lo) / L;
            return Vec3(0.0, 0.0,
                        spec.amplitude * L / M_PI * std::sin(M_PI * y.x()) * std::sin(M_PI * y.y()) * std::sin(M_PI * y.z()));
        });
    } else if (spec.preset == "random") {
        u = random_solenoidal(g, spec.seed);
        for (int d = 0; d < 3; ++d)
            for (double& v : u.c[d].data) v *= spec.amplitude;
    } else {
        throw InvalidSpec("unknown velocity preset '" + spec.preset + "'");
    }
    if (spec.perturbation != 0.0) {
        const MacField du = random_solenoidal(g, spec.perturbation_seed);
        for (int d = 0; d < 3; ++d)
            for (std::size_t i = 0; i < u.c[d].size(); ++i) u.c[d][i] += spec.perturbation * du.c[d][i];
    }
    return u;
}

// Fraction of each face control volume inside the ball, by 4^3 subsampling.
inline MacField body_mask(const MacGrid& g, const Vec3& q, double r) {
    constexpr int S = 4;
    MacField m(g);
    for (int d = 0; d < 3; ++d) {
        const Grid fg = g.face(d);
        parallel_for(0, fg.n[2], [&](int k) {
            for (int j = 0; j < fg.n[1]; ++j)
                for (int i = 0; i < fg.n[0]; ++i) {
                    const Vec3 x = fg.point(i, j, k);
                    const double dist = (x - q).norm();
                    if (dist > r + g.h) continue;
                    if (dist < r - g.h) {
                        m.c[d](i, j, k) = 1.0;
                        continue;
                    }
                    int in = 0;
                    for (int c = 0; c < S; ++c)
                        for (int b = 0; b < S; ++b)
                            for (int a = 0; a < S; ++a) {
                                const Vec3 off((a + 0.5) / S - 0.5, (b + 0.5) / S - 0.5, (c + 0.5) / S - 0.5);
                                if ((x + g.h * off - q).squaredNorm() < r * r) ++in;
                            }
                    m.c[d](i, j, k) = static_cast<double>(in) / (S * S * S);
                }
        });
    }
    return m;
}

// ---------------------------------------------------------------------------
// Pressure projection: CG on the Neumann cell Laplacian, preconditioned by
// its exact cosine-transform inverse.

class NeumannPoisson {
public:
    explicit NeumannPoisson(const MacGrid& g) : g_(g), n_(static_cast<std::size_t>(g.N) * g.N * g.N) {
        buf_ = static_cast<double*>(fftw_malloc(sizeof(double) * n_));
        fwd_ = fftw_plan_r2r_3d(g.N, g.N, g.N, buf_, buf_, FFTW_REDFT10, FFTW_REDFT10, FFTW_REDFT10, FFTW_ESTIMATE);
        bwd_ = fftw_plan_r2r_3d(g.N, g.N, g.N, buf_, buf_, FFTW_REDFT01, FFTW_REDFT01, FFTW_REDFT01, FFTW_ESTIMATE);
        lam_.resize(static_cast<std::size_t>(g.N));
        for (int m = 0; m < g.N; ++m) {
            const double s = std::sin(M_PI * m / (2.0 * g.N));
            lam_[static_cast<std::size_t>(m)] = -4.0 * s * s / (g.h * g.h);
        }
    }
    ~NeumannPoisson() {
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
        fftw_free(buf_);
    }
    NeumannPoisson(const NeumannPoisson&) = delete;
    NeumannPoisson& operator=(const NeumannPoisson&) = delete;

    // L phi for cell data
    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const int N = g_.N;
        const double ih2 = 1.0 / (g_.h * g_.h);
        parallel_for(0, N, [&](int k) {
            for (int j = 0; j < N; ++j)
                for (int i = 0; i < N; ++i) {
                    const std::size_t c = idx(i, j, k);
                    double s = 0.0;
                    if (i > 0) s += x[idx(i - 1, j, k)] - x[c];
                    if (i < N - 1) s += x[idx(i + 1, j, k)] - x[c];
                    if (j > 0) s += x[idx(i, j - 1, k)] - x[c];
                    if (j < N - 1) s += x[idx(i, j + 1, k)] - x[c];
                    if (k > 0) s += x[idx(i, j, k - 1)] - x[c];
                    if (k < N - 1) s += x[idx(i, j, k + 1)] - x[c];
                    y[c] = s * ih2;
                }
        });
    }

    // Exact inverse on the mean-free subspace.
    void precondition(const std::vector<double>& r, std::vector<double>& z) {
        const int N = g_.N;
        std::copy(r.begin(), r.end(), buf_);
        fftw_execute(fwd_);
        for (int k = 0; k < N; ++k)
            for (int j = 0; j < N; ++j)
                for (int i = 0; i < N; ++i) {
                    const double l = lam_[static_cast<std::size_t>(i)] + lam_[static_cast<std::size_t>(j)] +
                                     lam_[static_cast<std::size_t>(k)];
                    buf_[idx(i, j, k)] = (i + j + k == 0) ? 0.0 : buf_[idx(i, j, k)] / l;
                }
        fftw_execute(bwd_);
        const double scale = 1.0 / (8.0 * static_cast<double>(n_));
        for (std::size_t c = 0; c < n_; ++c) z[c] = buf_[c] * scale;
    }

    // Solves L phi = b (b mean-free up to roundoff) to ||b - L phi||_inf <= tol.
    int solve(const std::vector<double>& b_in, std::vector<double>& x, double tol, int max_iter = 200) {
        std::vector<double> b = b_in;
        remove_mean(b);
        x.assign(n_, 0.0);
        std::vector<double> r = b, z(n_), p(n_), Ap(n_);
        if (max_abs(r) <= tol) return 0;
        precondition(r, z);
        p = z;
        double rz = dot(r, z);
        for (int it = 1; it <= max_iter; ++it) {
            apply(p, Ap);
            const double alpha = rz / dot(p, Ap);
            for (std::size_t c = 0; c < n_; ++c) {
                x[c] += alpha * p[c];
                r[c] -= alpha * Ap[c];
            }
            if (max_abs(r) <= tol) return it;
            precondition(r, z);
            const double rz_new = dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t c = 0; c < n_; ++c) p[c] = z[c] + beta * p[c];
        }
        throw SolverDiverged("pressure CG did not reach tolerance");
    }

private:
    std::size_t idx(int i, int j, int k) const {
        return static_cast<std::size_t>(i) + static_cast<std::size_t>(g_.N) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(g_.N) * k);
    }
    double dot(const std::vector<double>& a, const std::vector<double>& b) const {
        const std::size_t slab = static_cast<std::size_t>(g_.N) * g_.N;
        return detail::slab_sum(g_.N, [&](int k) {
            double s = 0.0;
            for (std::size_t c = slab * k; c < slab * (k + 1); ++c) s += a[c] * b[c];
            return s;
        });
    }
    static double max_abs(const std::vector<double>& a) {
        double m = 0.0;
        for (double v : a) m = std::max(m, std::abs(v));
        return m;
    }
    void remove_mean(std::vector<double>& a) const {
        std::vector<double> one(n_, 1.0);
        const double mean = dot(a, one) / static_cast<double>(n_);
        for (double& v : a) v -= mean;
    }

    MacGrid g_;
    std::size_t n_;
    double* buf_ = nullptr;
    fftw_plan fwd_{};
    fftw_plan bwd_{};
    std::vector<double> lam_;
};

// u <- u - grad phi with div u = 0; returns phi (cell data).
inline GridField<double> project(MacField& u, const MacGrid& g, NeumannPoisson& poisson, double tol = 1e-11) {
    const auto div = mac_divergence(u, g);
    std::vector<double> phi;
    double scale = 0.0;
    for (double v : div.data) scale = std::max(scale, std::abs(v));
    poisson.solve(div.data, phi, std::max(tol, 1e-15 * scale));
    GridField<double> out(g.cells(), 0.0);
    out.data = phi;
    for (int d = 0; d < 3; ++d) {
        const Grid fg = g.face(d);
        parallel_for(0, fg.n[2], [&](int k) {
            for (int j = 0; j < fg.n[1]; ++j)
                for (int i = 0; i < fg.n[0]; ++i) {
                    std::array<int, 3> n{i, j, k};
                    if (n[d] == 0 || n[d] == g.N) continue;
                    std::array<int, 3> m = n;
                    m[d] -= 1;
                    u.c[d](i, j, k) -= (out(n[0], n[1], n[2]) - out(m[0], m[1], m[2])) / g.h;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Solver

struct StepDiagnostics {
    int pressure_iterations = 0;
    double dissipation = 0.0;
    double slip_dissipation = 0.0;
};

class FsiSolver {
public:
    explicit FsiSolver(Scenario sc) : sc_(std::move(sc)), g_(MacGrid::of(sc_)) {
        sc_.validate();
        poisson_ = std::make_unique<NeumannPoisson>(g_);
        inertia_ = inertia_tensor(sc_.body);
        const double dm = (sc_.body.rho_s - sc_.rho_f) * sc_.body.volume();
        dM_ = dm;
        dJ_ = 0.4 * dm * sc_.body.radius * sc_.body.radius;
    }

    const Scenario& scenario() const { return sc_; }
    const MacGrid& grid() const { return g_; }

    void contact_guard(const RigidState& s) const {
        const double gap = sc_.container.wall_distance(s.q) - sc_.body.radius;
        if (!(gap > sc_.delta_wall)) throw ContactError(s.t, gap);
    }

    SolverState initialize() {
        SolverState st;
        st.rigid.t = 0.0;
        st.rigid.q = sc_.body.center;
        st.rigid.a = sc_.a0;
        st.rigid.omega = sc_.omega0;
        contact_guard(st.rigid);
        st.u = initial_velocity(g_, sc_.u0);
        if (!mac_finite(st.u)) throw NonFiniteState("initial velocity");
        const double umax = std::max(mac_max(st.u), sc_.a0.norm() + sc_.omega0.norm() * sc_.body.radius);
        if (umax > 0 && sc_.dt > 0.5 * g_.h / umax) throw CFLViolation("dt > 0.5 h / max|u0|");
        st.mask = body_mask(g_, st.rigid.q, sc_.body.radius);
        impose_rigid(st.u, st.mask, st.rigid);
        st.p = project(st.u, g_, *poisson_);
        for (double& v : st.p.data) v = 0.0;
        impose_rigid(st.u, st.mask, st.rigid);
        st.energy0 = kinetic_energy(st);
        return st;
    }

    double kinetic_energy(const SolverState& st) const {
        return 0.5 * sc_.rho_f * mac_dot(st.u, st.u, g_.h) + 0.5 * dM_ * st.rigid.a.squaredNorm() +
               0.5 * dJ_ * st.rigid.omega.squaredNorm();
    }

    EnergyRecord energy_report(const SolverState& st) const {
        EnergyRecord r;
        r.t = st.t;
        r.kinetic = kinetic_energy(st);
        r.dissipation = st.dissipation;
        r.slip_dissipation = st.slip_dissipation;
        r.slack = st.energy0 - r.kinetic - r.dissipation - r.slip_dissipation;
        return r;
    }

    SolverState step(const SolverState& s, StepDiagnostics* diag = nullptr) {
        const double dt = sc_.dt, h = g_.h;
        if (!mac_finite(s.u) || !s.rigid.a.allFinite() || !s.rigid.omega.allFinite()) throw NonFiniteState("state");
        const double umax = mac_max(s.u);
        if (umax > 0 && dt > 0.5 * h / umax) throw CFLViolation("dt > 0.5 h / max|u| at t=" + std::to_string(s.t));

        SolverState st = s;
        // (1) explicit advection, implicit viscosity
        MacField ut = s.u;
        const MacField adv = advection(s.u);
        for (int d = 0; d < 3; ++d)
            for (std::size_t i = 0; i < ut.c[d].size(); ++i) ut.c[d][i] -= dt * adv.c[d][i];
        double d_total = 0.0, d_slip = 0.0;
        for (int d = 0; d < 3; ++d) viscous_solve(d, ut.c[d], s.mask.c[d], d_total, d_slip);
        // (2) projection
        const auto phi = project(ut, g_, *poisson_);
        st.p = phi;
        for (double& v : st.p.data) v *= sc_.rho_f / dt;
        // (3)+(4) momentum-conserving rigid projection on the body region
        const auto [a1, w1] = rigid_fit(ut, s.mask, s.rigid);
        RigidState next = step_rigid_body(s.rigid, inertia_, inertia_.m * (a1 - s.rigid.a) / dt,
                                          inertia_.J0 * (w1 - s.rigid.omega) / dt, dt);
        next.a = a1;
        next.omega = w1;
        RigidState at_mask = s.rigid;
        at_mask.a = a1;
        at_mask.omega = w1;
        impose_rigid(ut, s.mask, at_mask);
        // (5) contact guard on the new position
        contact_guard(next);

        st.u = std::move(ut);
        st.rigid = next;
        st.t = s.t + dt;
        st.rigid.t = st.t;
        st.step = s.step + 1;
        st.mask = body_mask(g_, next.q, sc_.body.radius);
        st.dissipation += dt * (d_total - d_slip);
        st.slip_dissipation += dt * d_slip;
        if (!mac_finite(st.u)) throw NonFiniteState("velocity after step");
        if (diag) {
            diag->dissipation = dt * (d_total - d_slip);
            diag->slip_dissipation = dt * d_slip;
        }
        return st;
    }

    // Slip-link conductance 1/(h/mu + 1/beta); mu/h on no_slip.
    double interface_conductance() const {
        const double h = g_.h;
        if (sc_.coupling == Coupling::no_slip) return sc_.mu / h;
        return 1.0 / (h / sc_.mu + 1.0 / sc_.beta);
    }

private:
    // Conservative second-order advection div(u (x) u) on the interior faces.
    MacField advection(const MacField& u) const {
        MacField out(g_);
        const int N = g_.N;
        const double h = g_.h;
        for (int d = 0; d < 3; ++d) {
            const Grid fg = g_.face(d);
            parallel_for(0, fg.n[2], [&](int k) {
                for (int j = 0; j < fg.n[1]; ++j)
                    for (int i = 0; i < fg.n[0]; ++i) {
                        const std::array<int, 3> f{i, j, k};
                        if (f[d] == 0 || f[d] == N) continue;
                        auto ud = [&](std::array<int, 3> p) { return u.c[d](p[0], p[1], p[2]); };
                        double s = 0.0;
                        for (int e = 0; e < 3; ++e) {
                            if (e == d) {
                                std::array<int, 3> fp = f, fm = f;
                                fp[d] += 1;
                                fm[d] -= 1;
                                const double up = 0.5 * (ud(f) + ud(fp)), um = 0.5 * (ud(f) + ud(fm));
                                s += (up * up - um * um) / h;
                            } else {
                                // fluxes through the edges at f +- e/2
                                double flux[2] = {0.0, 0.0};
                                for (int side = 0; side < 2; ++side) {
                                    const int node = f[e] + side;  // e-node index of the edge
                                    if (node == 0 || node == N) continue;
                                    std::array<int, 3> c0 = f, c1 = f;
                                    c0[d] -= 1;
                                    c0[e] = node;
                                    c1[e] = node;
                                    const double ue = 0.5 * (u.c[e](c0[0], c0[1], c0[2]) + u.c[e](c1[0], c1[1], c1[2]));
                                    std::array<int, 3> fa = f, fb = f;
                                    fa[e] = node - 1;
                                    fb[e] = node;
                                    flux[side] = ue * 0.5 * (ud(fa) + ud(fb));
                                }
                                s += (flux[1] - flux[0]) / h;
                            }
                        }
                        out.c[d](i, j, k) = s;
                    }
            });
        }
        return out;
    }

    // Link weight between two unknown faces of the same component.
    double link_weight(double chi_a, double chi_b) const {
        const bool ba = chi_a >= 0.5, bb = chi_b >= 0.5;
        const double h = g_.h;
        if (ba && bb) return 0.0;
        if (ba != bb) return interface_conductance() / h;
        return sc_.mu / (h * h);
    }

    // (rho/dt) x - A x on component d; A has the link weights above, Dirichlet
    // zero on wall normal faces and mirrored ghosts for tangential walls.
    template <class Visit>
    void for_links(int d, const GridField<double>& chi, int i, int j, int k, Visit&& visit) const {
        const int N = g_.N;
        const std::array<int, 3> f{i, j, k};
        for (int e = 0; e < 3; ++e)
            for (int side = -1; side <= 1; side += 2) {
                std::array<int, 3> nb = f;
                nb[e] += side;
                const double w0 = sc_.mu / (g_.h * g_.h);
                if (e == d) {
                    if (nb[d] == 0 || nb[d] == N) {
                        visit(-1, 0, 0, w0, false);  // fixed zero neighbour
                        continue;
                    }
                } else if (nb[e] < 0 || nb[e] >= N) {
                    visit(-1, 0, 0, 2.0 * w0, false);  // mirrored ghost
                    continue;
                }
                const double w = link_weight(chi(i, j, k), chi(nb[0], nb[1], nb[2]));
                const bool interface = (chi(i, j, k) >= 0.5) != (chi(nb[0], nb[1], nb[2]) >= 0.5);
                visit(nb[0], nb[1], nb[2], w, interface);
            }
    }

    void apply_viscous(int d, const GridField<double>& chi, const GridField<double>& x, GridField<double>& y) const {
        const int N = g_.N;
        const double c0 = sc_.rho_f / sc_.dt;
        const Grid& fg = x.grid;
        parallel_for(0, fg.n[2], [&](int k) {
            for (int j = 0; j < fg.n[1]; ++j)
                for (int i = 0; i < fg.n[0]; ++i) {
                    const std::array<int, 3> f{i, j, k};
                    if (f[d] == 0 || f[d] == N) {
                        y(i, j, k) = 0.0;
                        continue;
                    }
                    const double xf = x(i, j, k);
                    double s = c0 * xf;
                    for_links(d, chi, i, j, k, [&](int a, int b, int c, double w, bool) {
                        s += w * (xf - (a < 0 ? 0.0 : x(a, b, c)));
                    });
                    y(i, j, k) = s;
                }
        });
    }

    double field_dot(const GridField<double>& a, const GridField<double>& b) const {
        const Grid& g = a.grid;
        return detail::slab_sum(g.n[2], [&](int k) {
            double s = 0.0;
            const std::size_t slab = static_cast<std::size_t>(g.n[0]) * g.n[1];
            for (std::size_t c = slab * k; c < slab * (k + 1); ++c) s += a[c] * b[c];
            return s;
        });
    }

    // Backward-Euler viscous update of component d by Jacobi-preconditioned
    // CG; adds the dissipation rates (u, -A u) h^3 and its slip share.
    void viscous_solve(int d, GridField<double>& u, const GridField<double>& chi, double& d_total, double& d_slip) const {
        const double c0 = sc_.rho_f / sc_.dt;
        const double h3 = g_.h * g_.h * g_.h;
        GridField<double> b = u;
        for (double& v : b.data) v *= c0;
        GridField<double> diag(u.grid, 1.0);
        const int N = g_.N;
        for (int k = 0; k < u.grid.n[2]; ++k)
            for (int j = 0; j < u.grid.n[1]; ++j)
                for (int i = 0; i < u.grid.n[0]; ++i) {
                    const std::array<int, 3> f{i, j, k};
                    if (f[d] == 0 || f[d] == N) continue;
                    double s = c0;
                    for_links(d, chi, i, j, k, [&](int, int, int, double w, bool) { s += w; });
                    diag(i, j, k) = s;
                }
        GridField<double> Ax(u.grid), r(u.grid), z(u.grid), p(u.grid), Ap(u.grid);
        apply_viscous(d, chi, u, Ax);
        for (std::size_t c = 0; c < u.size(); ++c) r[c] = b[c] - Ax[c];
        const double bnorm = std::sqrt(field_dot(b, b));
        const double tol = 1e-13 * std::max(bnorm, 1e-300);
        for (std::size_t c = 0; c < u.size(); ++c) z[c] = r[c] / diag[c];
        p = z;
        double rz = field_dot(r, z);
        for (int it = 0; it < 1000 && std::sqrt(field_dot(r, r)) > tol; ++it) {
            apply_viscous(d, chi, p, Ap);
            const double alpha = rz / field_dot(p, Ap);
            for (std::size_t c = 0; c < u.size(); ++c) {
                u[c] += alpha * p[c];
                r[c] -= alpha * Ap[c];
            }
            for (std::size_t c = 0; c < u.size(); ++c) z[c] = r[c] / diag[c];
            const double rz_new = field_dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t c = 0; c < u.size(); ++c) p[c] = z[c] + beta * p[c];
            if (it == 999) throw SolverDiverged("viscous CG did not converge");
        }
        // dissipation rate: each link once, walls by their diagonal share
        const double kappa = interface_conductance();
        const bool slip = sc_.coupling == Coupling::navier_slip;
        double tot = 0.0, sl = 0.0;
        for (int k = 0; k < u.grid.n[2]; ++k)
            for (int j = 0; j < u.grid.n[1]; ++j)
                for (int i = 0; i < u.grid.n[0]; ++i) {
                    const std::array<int, 3> f{i, j, k};
                    if (f[d] == 0 || f[d] == N) continue;
                    const std::size_t me = u.grid.index(i, j, k);
                    for_links(d, chi, i, j, k, [&](int a, int b2, int c, double w, bool interface) {
                        if (a < 0) {
                            tot += w * u[me] * u[me];
                            return;
                        }
                        const std::size_t other = u.grid.index(a, b2, c);
                        if (other < me) return;
                        const double jump = u[me] - u[other];
                        tot += w * jump * jump;
                        if (interface && slip) sl += g_.h * g_.h * kappa * kappa / sc_.beta * jump * jump;
                    });
                }
        d_total += tot * h3;
        d_slip += sl;
    }

    // Rigid velocity at the face of component d.
    static double rigid_component(const RigidState& s, const Vec3& x, int d) { return rigid_velocity(s, x)[d]; }

    // Momentum-conserving fit (a, omega) of the fluid in the mask plus the
    // excess body mass carrying the previous rigid velocities.
    std::pair<Vec3, Vec3> rigid_fit(const MacField& u, const MacField& mask, const RigidState& s) const {
        Eigen::Matrix<double, 6, 6> A = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
        const double vol = sc_.rho_f * g_.h * g_.h * g_.h;
        for (int d = 0; d < 3; ++d) {
            const Grid fg = g_.face(d);
            for (int k = 0; k < fg.n[2]; ++k)
                for (int j = 0; j < fg.n[1]; ++j)
                    for (int i = 0; i < fg.n[0]; ++i) {
                        const double chi = mask.c[d](i, j, k);
                        if (chi == 0.0) continue;
                        Eigen::Matrix<double, 6, 1> phi;
                        Vec3 e = Vec3::Zero();
                        e[d] = 1.0;
                        phi.head<3>() = e;
                        phi.tail<3>() = (fg.point(i, j, k) - s.q).cross(e);
                        A += chi * vol * phi * phi.transpose();
                        b += chi * vol * u.c[d](i, j, k) * phi;
                    }
        }
        A.topLeftCorner<3, 3>() += dM_ * Mat3::Identity();
        A.bottomRightCorner<3, 3>() += dJ_ * Mat3::Identity();
        b.head<3>() += dM_ * s.a;
        b.tail<3>() += dJ_ * s.omega;
        const Eigen::Matrix<double, 6, 1> v = A.ldlt().solve(b);
        return {v.head<3>(), v.tail<3>()};
    }

    void impose_rigid(MacField& u, const MacField& mask, const RigidState& s) const {
        for (int d = 0; d < 3; ++d) {
            const Grid fg = g_.face(d);
            parallel_for(0, fg.n[2], [&](int k) {
                for (int j = 0; j < fg.n[1]; ++j)
                    for (int i = 0; i < fg.n[0]; ++i) {
                        const double chi = mask.c[d](i, j, k);
                        if (chi == 0.0) continue;
                        double& v = u.c[d](i, j, k);
                        v = (1.0 - chi) * v + chi * rigid_component(s, fg.point(i, j, k), d);
                    }
            });
        }
    }

    Scenario sc_;
    MacGrid g_;
    std::unique_ptr<NeumannPoisson> poisson_;
    InertiaData inertia_;
    double dM_ = 0.0, dJ_ = 0.0;
};

// Free-function forms.
inline SolverState initialize(const Scenario& sc) { return FsiSolver(sc).initialize(); }

inline SolverState step(const SolverState& s, const Scenario& sc) { return FsiSolver(sc).step(s); }

inline EnergyRecord energy_report(const SolverState& s, const Scenario& sc) { return FsiSolver(sc).energy_report(s); }

inline void contact_guard(const SolverState& s, const Scenario& sc) {
    const double gap = sc.container.wall_distance(s.rigid.q) - sc.body.radius;
    if (!(gap > sc.delta_wall)) throw ContactError(s.t, gap);
}

struct RunResult {
    std::vector<SolverState> snapshots;
    std::vector<EnergyRecord> energy;    // every step
    std::vector<RigidState> trajectory;  // every step
};

using RunObserver = std::function<void(const SolverState&, const EnergyRecord&)>;

// Integrates to T; snapshots at t=0, every snapshot_every steps and at T.
inline RunResult run(const Scenario& sc, const RunObserver& observer = {}) {
    FsiSolver solver(sc);
    RunResult out;
    SolverState st = solver.initialize();
    auto record = [&](const SolverState& s) {
        const EnergyRecord e = solver.energy_report(s);
        out.energy.push_back(e);
        out.trajectory.push_back(s.rigid);
        if (observer) observer(s, e);
    };
    record(st);
    out.snapshots.push_back(st);
    const int steps = sc.steps();
    for (int n = 0; n < steps; ++n) {
        st = solver.step(st);
        record(st);
        const bool last = n + 1 == steps;
        if (last || (sc.snapshot_every > 0 && st.step % sc.snapshot_every == 0)) out.snapshots.push_back(st);
    }
    return out;
}

}  // namespace fsirb
