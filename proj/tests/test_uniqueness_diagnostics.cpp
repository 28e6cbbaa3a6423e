#include "fsirb/uniqueness_diagnostics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace fsirb;

namespace {

Box unit_box() { return Box{Vec3::Zero(), Vec3::Ones()}; }

// Q(t) = Rz(alpha(t)) Rx(beta t), omega = alpha' e_z + Rz(alpha) beta e_x
struct TwistMotion {
    double a0 = 0.4, a1 = 0.7, beta = 0.9;
    Vec3 q0 = Vec3::Constant(0.5);

    RigidState operator()(double t) const {
        RigidState s;
        s.t = t;
        const double al = a0 * t + a1 * std::sin(t), dal = a0 + a1 * std::cos(t);
        const Mat3 Rz = rotation_exp(Vec3(0, 0, al));
        s.Q = Rz * rotation_exp(Vec3(beta * t, 0, 0));
        s.omega = dal * Vec3::UnitZ() + beta * (Rz * Vec3::UnitX());
        s.q = q0;
        return s;
    }
};

Scenario small_pair_scenario() {
    Scenario sc;
    sc.body.center = Vec3(0.5, 0.5, 0.5);
    sc.body.radius = 0.15;
    sc.body.rho_s = 2.0;
    sc.mu = 0.05;
    sc.grid_n = 12;
    sc.dt = 0.01;
    sc.T = 0.2;
    sc.u0.preset = "random";
    sc.u0.amplitude = 0.3;
    sc.u0.seed = 5;
    sc.omega0 = Vec3(0.0, 0.0, 1.0);
    sc.a0 = Vec3(0.1, 0.0, 0.0);
    sc.snapshot_every = 1;
    return sc;
}

Vec3 solenoidal(const Vec3& x) {
    return Vec3(std::sin(2 * x.y()) + x.z() * x.z(), std::cos(3 * x.z()) + x.x(), std::sin(x.x() + x.y()));
}

FlowMapData advanced(const Trajectory& tr, int n, double t, bool inverse, CutoffSpec cut = {0.125, 0.45}) {
    FlowMapData m = identity_map(Grid::nodes(Vec3::Zero(), 1.0 / n, {n, n, n}), unit_box(), cut, 0.0,
                                 MapOptions{true, inverse, false});
    return advance_to(m, tr, t, 0.005);
}

}  // namespace

TEST(UniquenessDiagnostics, SerrinExponentClosure) {
    for (double s : {3.5, 4.0, 6.0, 10.0}) {
        const SerrinSpec sp = SerrinSpec::from_s(s);
        EXPECT_NO_THROW(sp.validate());
        EXPECT_NEAR(3.0 / sp.s + 2.0 / sp.r, 1.0, 1e-12);
        EXPECT_NEAR(3.0 / sp.q + 2.0 / sp.p, 3.5, 1e-12) << s;
        EXPECT_NEAR(3.0 / sp.q_conj() + 2.0 / sp.p_conj(), 1.5, 1e-12) << s;
        EXPECT_GT(sp.p_conj(), 2.0);
        EXPECT_GT(sp.q_conj(), 2.0);
        EXPECT_LT(sp.q_conj(), 6.0);
    }
    const SerrinSpec d;
    EXPECT_NO_THROW(d.validate());
    EXPECT_THROW(SerrinSpec::from_s(3.0), InvalidSpec);
    SerrinSpec bad;
    bad.r = 4.0;
    EXPECT_THROW(bad.validate(), InvalidSpec);
}

TEST(UniquenessDiagnostics, SerrinNorm) {
    const Grid g = Grid::nodes(Vec3::Zero(), 0.125, {8, 8, 8});
    const GridField<double> one(g, 1.0), zero(g, 0.0);
    for (double s : {1.0, 2.0, 4.0, 7.5, std::numeric_limits<double>::infinity()}) {
        EXPECT_NEAR(serrin_norm(one, s), 1.0, 1e-14) << s;
        EXPECT_EQ(serrin_norm(zero, s), 0.0);
    }
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-1, 1);
    GridField<Vec3> v(g);
    for (Vec3& x : v.data) x = Vec3(U(rng), U(rng), U(rng));
    double sum = 0.0, mx = 0.0;
    for (int k = 0; k <= 8; ++k)
        for (int j = 0; j <= 8; ++j)
            for (int i = 0; i <= 8; ++i) {
                const int ends = (i % 8 == 0) + (j % 8 == 0) + (k % 8 == 0);
                const double w = std::pow(0.125, 3) / (1 << ends);
                const double a = v(i, j, k).norm();
                sum += w * a * a * a * a;
                mx = std::max(mx, a);
            }
    EXPECT_NEAR(serrin_norm(v, 4.0), std::pow(sum, 0.25), 1e-12);
    EXPECT_EQ(serrin_norm(v, std::numeric_limits<double>::infinity()), mx);
    EXPECT_THROW(serrin_norm(v, 0.5), InvalidSpec);
}

TEST(UniquenessDiagnostics, SerrinAccumulate) {
    const Grid g = Grid::cells(Vec3::Zero(), 0.25, {4, 4, 4});
    const SerrinSpec sp;
    std::vector<GridField<double>> zeros(11, GridField<double>(g, 0.0));
    EXPECT_EQ(serrin_accumulate(zeros, sp, 0.1), 0.0);
    std::vector<GridField<double>> c(11, GridField<double>(g, 0.7));
    EXPECT_NEAR(serrin_accumulate(c, sp, 0.1), std::pow(0.7, sp.r) * 1.0, 1e-14);
}

TEST(UniquenessDiagnostics, OmegaTildeIdentity) {
    TwistMotion a;
    TwistMotion b;
    b.a0 = -0.3;
    b.a1 = 1.1;
    b.beta = -0.5;
    PrescribedMotion c;
    c.omega = Vec3(0.2, -0.7, 0.4);
    for (double t : {0.1, 0.37, 0.8}) {
        EXPECT_LE((omega_tilde(a, b, t) - omega_difference(a(t), b(t))).norm(), 1e-10) << t;
        EXPECT_LE((omega_tilde(c, a, t) - omega_difference(c(t), a(t))).norm(), 1e-10) << t;
        EXPECT_LE(omega_tilde(a, a, t).norm(), 1e-12);
    }
}

TEST(UniquenessDiagnostics, RotationReconstructionFourthOrder) {
    TwistMotion m;
    std::vector<double> err;
    for (int steps : {10, 20, 40}) {
        const Mat3 Z = reconstruct_rotation(m, m(0.0).Q, 0.0, 1.0, steps);
        err.push_back((Z - m(1.0).Q).norm());
    }
    EXPECT_LE(err.back(), 1e-6);
    for (std::size_t i = 1; i < err.size(); ++i) {
        const double ratio = err[i - 1] / err[i];
        EXPECT_GT(ratio, 12.0);
        EXPECT_LT(ratio, 20.0);
    }
}

TEST(UniquenessDiagnostics, RigidCollarTransform) {
    PrescribedMotion m1, m2;
    m1.a0 = Vec3(0.05, -0.02, 0.01);
    m1.omega = Vec3(0.0, 0.3, 1.0);
    m2.a0 = Vec3(-0.03, 0.04, 0.0);
    m2.omega = Vec3(0.5, -0.2, 0.6);
    const double t = 0.2;
    const CutoffSpec cut{0.2, 0.45, CutoffProfile::quintic};
    const FlowMapData X1 = advanced(m1, 16, t, true, cut), X2 = advanced(m2, 16, t, false, cut);
    const RigidState s1 = m1(t), s2 = m2(t);
    const FlowMapData c = composite_map(X1, X2, s1, s2, false);
    const GridField<Vec3> U = push_velocity(solenoidal, c);
    const Mat3 Q = relative_rotation(s1, s2);
    int checked = 0;
    double worst = 0.0;
    for (std::size_t idx = 0; idx < c.grid.size(); ++idx) {
        const auto p = c.grid.ijk(idx);
        const Vec3 x = c.grid.point(p[0], p[1], p[2]);
        if ((x - s1.q).norm() > X1.cutoff.r_inner - 2.0 * c.grid.h) continue;
        ++checked;
        const Vec3 x2 = s2.q + Q * (x - s1.q);
        worst = std::max(worst, (c.X[idx] - x2).norm());
        worst = std::max(worst, (U[idx] - Q.transpose() * solenoidal(x2)).norm());
    }
    EXPECT_GT(checked, 0);
    EXPECT_LE(worst, 1e-8);
}

// The maps are strongly sheared in the transition band, so the asymptotic
// range starts near 32^3.
TEST(UniquenessDiagnostics, TransformPreservesDivergence) {
    PrescribedMotion m1, m2;
    m1.a0 = Vec3(0.05, -0.02, 0.01);
    m1.omega = Vec3(0.0, 0.3, 1.0);
    m2.a0 = Vec3(-0.03, 0.04, 0.0);
    m2.omega = Vec3(0.5, -0.2, 0.6);
    const double t = 0.05;
    const std::vector<int> ns{16, 32, 48};
    std::vector<double> errs;
    for (int n : ns) {
        const FlowMapData X1 = advanced(m1, n, t, true), X2 = advanced(m2, n, t, false);
        const FlowMapData c = composite_map(X1, X2, m1(t), m2(t), false);
        const GridField<double> div = divergence(push_velocity(solenoidal, c));
        // interior nodes of the 16^3 grid, shared by every level
        double e = 0.0;
        const int s = n / 16;
        for (int k = 1; k < 16; ++k)
            for (int j = 1; j < 16; ++j)
                for (int i = 1; i < 16; ++i) e = std::max(e, std::abs(div(s * i, s * j, s * k)));
        errs.push_back(e);
    }
    EXPECT_GT(errs[0] / errs[1], 2.5);
    const double order = std::log(errs[1] / errs[2]) / std::log(48.0 / 32.0);
    EXPECT_GT(order, 1.7) << errs[1] << " " << errs[2];
}

TEST(UniquenessDiagnostics, IdenticalRunsCollapse) {
    const Scenario sc = small_pair_scenario();
    const RunResult r = run(sc);
    const auto tr = transform_second_solution(sc, r, sc, r);
    ASSERT_EQ(tr.size(), r.snapshots.size());
    const Grid g = map_grid(sc);
    double umax = 0.0, worst = 0.0, pworst = 0.0;
    for (std::size_t n = 0; n < tr.size(); ++n) {
        EXPECT_LE((tr[n].Q - Mat3::Identity()).norm(), 1e-14);
        EXPECT_LE(tr[n].omega_diff.norm(), 1e-14);
        const SolverState& st = r.snapshots[n];
        EXPECT_LE((tr[n].state.A - st.rigid.a).norm(), 1e-15);
        for (std::size_t idx = 0; idx < g.size(); ++idx) {
            const auto p = g.ijk(idx);
            const Vec3 x = g.point(p[0], p[1], p[2]);
            const Vec3 u = mac_sample(st.u, x);
            umax = std::max(umax, u.norm());
            worst = std::max(worst, (tr[n].state.U[idx] - u).norm());
            pworst = std::max(pworst, std::abs(tr[n].state.P[idx] - st.p.sample(x)));
        }
    }
    EXPECT_LE(worst, 1e-9 * umax);
    EXPECT_LE(pworst, 1e-8);
}

TEST(UniquenessDiagnostics, MismatchedRunsRejected) {
    Scenario a = small_pair_scenario();
    a.T = 0.02;
    Scenario b = a;
    b.body.radius = 0.14;
    const RunResult ra = run(a), rb = run(b);
    EXPECT_THROW(transform_second_solution(a, ra, b, rb), MismatchedScenario);
    Scenario c = a;
    c.T = 0.03;
    EXPECT_THROW(transform_second_solution(a, ra, c, run(c)), MismatchedScenario);
}

TEST(UniquenessDiagnostics, ZeroDeltaIsBitwiseIdentical) {
    const Scenario sc = small_pair_scenario();
    const RunResult r1 = run(sc), r2 = run(perturbed(sc, 0.0));
    for (std::size_t n = 0; n < r1.snapshots.size(); ++n)
        for (int d = 0; d < 3; ++d) EXPECT_EQ(r1.snapshots[n].u.c[d].data, r2.snapshots[n].u.c[d].data);
    const GronwallReport rep = gronwall_compare(sc, r1, r2, 0.0, SerrinSpec{});
    EXPECT_TRUE(rep.zero_ok);
    EXPECT_TRUE(rep.sandwich_ok);
    for (double v : rep.diff_norm) EXPECT_EQ(v, 0.0);
}

TEST(UniquenessDiagnostics, PerturbationCalibration) {
    const Scenario sc = small_pair_scenario();
    const double delta = 2e-3;
    const RunResult r1 = run(sc), r2 = run(perturbed(sc, delta));
    const GronwallReport rep = gronwall_compare(sc, r1, r2, delta, SerrinSpec{});
    EXPECT_NEAR(rep.diff_norm.front(), delta * delta, 1e-10 * delta * delta);
}

TEST(UniquenessDiagnostics, QuadraticScalingAndSandwich) {
    const Scenario sc = small_pair_scenario();
    const RunResult r1 = run(sc);
    std::vector<double> finals;
    for (double delta : {4e-3, 2e-3, 1e-3}) {
        const GronwallReport rep = gronwall_compare(sc, r1, run(perturbed(sc, delta)), delta, SerrinSpec{});
        EXPECT_TRUE(rep.sandwich_ok) << delta;
        for (std::size_t i = 0; i < rep.times.size(); ++i) {
            EXPECT_TRUE(std::isfinite(rep.integrand[i]) && rep.integrand[i] >= 1.0);
            EXPECT_GE(rep.bound[i], 0.0);
        }
        finals.push_back(rep.diff_norm.back());
    }
    for (std::size_t i = 1; i < finals.size(); ++i) {
        const double ratio = finals[i - 1] / finals[i];
        EXPECT_GE(ratio, 3.0);
        EXPECT_LE(ratio, 5.0);
    }
}

TEST(UniquenessDiagnostics, PressureRefinementRobustness) {
    const Scenario sc = small_pair_scenario();
    const double delta = 2e-3;
    const RunResult r1 = run(sc), r2 = run(perturbed(sc, delta));
    const GronwallReport a = gronwall_compare(sc, r1, r2, delta, SerrinSpec{});
    GronwallOptions fine;
    fine.pressure_refine = 2;
    const GronwallReport b = gronwall_compare(sc, r1, r2, delta, SerrinSpec{}, fine);
    double pa = 0.0, pb = 0.0;
    for (std::size_t i = 1; i < a.times.size(); ++i) {
        pa += a.pressure_part[i];
        pb += b.pressure_part[i];
    }
    ASSERT_GT(pa, 0.0);
    EXPECT_LE(std::abs(pb - pa), 0.2 * pa);
    EXPECT_LE(std::abs(b.C_fit - a.C_fit), 0.2 * a.C_fit + 1e-12);
}

TEST(UniquenessDiagnostics, GronwallCsv) {
    GronwallReport rep;
    rep.times = {0.0, 0.1};
    rep.diff_norm = {1e-6, 2e-6};
    rep.integrand = {1.0, 1.5};
    rep.bound = {1e-6, 3e-6};
    std::ostringstream os;
    write_gronwall_csv(os, rep);
    EXPECT_EQ(os.str().substr(0, 29), "t,diff_norm,integrand,bound\n0");
    int lines = 0;
    for (char ch : os.str()) lines += ch == '\n';
    EXPECT_EQ(lines, 3);
}

TEST(UniquenessDiagnostics, EnergyEqualityZeroFields) {
    Scenario sc = small_pair_scenario();
    sc.u0.preset = "zero";
    sc.a0 = Vec3::Zero();
    sc.omega0 = Vec3::Zero();
    sc.T = 0.05;
    const RunResult r = run(sc);
    EXPECT_EQ(energy_equality_check(sc, r, sc, r), 0.0);
}

// Identical runs: the composed map is the identity, so the forcing and the
// convective correction vanish and the residual is the mismatch between the
// nodal quadrature and the solver's own energy budget, which shrinks with h.
TEST(UniquenessDiagnostics, EnergyEqualityIdenticalRuns) {
    std::vector<double> res;
    for (int n : {12, 24}) {
        Scenario sc = small_pair_scenario();
        sc.u0.preset = "vortex";
        sc.u0.amplitude = 0.5;
        sc.grid_n = n;
        sc.dt = 0.01 * (12.0 / n) * (12.0 / n);
        sc.T = 0.1;
        const RunResult r = run(sc);
        const auto terms = energy_equality_terms(sc, r, sc, r);
        ASSERT_EQ(terms.size(), r.snapshots.size());
        const double E0 = r.energy.front().kinetic;
        for (const auto& e : terms) {
            EXPECT_LE(std::abs(e.forcing), 1e-9 * E0);
            EXPECT_LE(std::abs(e.convective), 1e-9 * E0);
        }
        EXPECT_NEAR(terms.front().initial, terms.front().kinetic, 0.0);
        res.push_back(std::abs(terms.back().residual()) / E0);
    }
    EXPECT_LT(res[1], 0.7 * res[0]);
}
