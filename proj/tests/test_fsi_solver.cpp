#include "fsirb/fsi_solver.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fsirb;

namespace {

Scenario spinning_ball(int n = 24) {
    Scenario sc;
    sc.body.center = Vec3(0.5, 0.5, 0.5);
    sc.body.radius = 0.15;
    sc.body.rho_s = 2.0;
    sc.mu = 0.05;
    sc.grid_n = n;
    sc.dt = 0.004 * 24.0 / n;
    sc.T = 0.2;
    sc.omega0 = Vec3(0.0, 0.0, 1.0);
    return sc;
}

bool same_field(const MacField& a, const MacField& b) {
    for (int d = 0; d < 3; ++d)
        if (a.c[d].data != b.c[d].data) return false;
    return true;
}

}  // namespace

TEST(FsiSolver, ZeroStateStaysZero) {
    Scenario sc = spinning_ball(12);
    sc.omega0 = Vec3::Zero();
    FsiSolver solver(sc);
    SolverState st = solver.initialize();
    for (int n = 0; n < 5; ++n) st = solver.step(st);
    EXPECT_EQ(mac_max(st.u), 0.0);
    EXPECT_EQ(st.rigid.a.norm(), 0.0);
    EXPECT_EQ(st.rigid.omega.norm(), 0.0);
    const EnergyRecord e = solver.energy_report(st);
    EXPECT_EQ(e.kinetic, 0.0);
    EXPECT_EQ(e.dissipation, 0.0);
    EXPECT_EQ(e.slack, 0.0);
}

TEST(FsiSolver, ProjectionIdempotentAndSolenoidal) {
    const MacGrid g{Vec3::Zero(), 1.0 / 16, 16};
    NeumannPoisson poisson(g);
    MacField u = random_solenoidal(g, 3);
    double div0 = 0;
    for (double v : mac_divergence(u, g).data) div0 = std::max(div0, std::abs(v));
    EXPECT_LE(div0, 1e-12);
    const MacField before = u;
    project(u, g, poisson);
    for (int d = 0; d < 3; ++d)
        for (std::size_t i = 0; i < u.c[d].size(); ++i) EXPECT_NEAR(u.c[d][i], before.c[d][i], 1e-12);
    // arbitrary field
    MacField w = sample_mac(g, [](const Vec3& x) {
        return Vec3(std::sin(7 * x.y()) + x.x() * x.x(), std::cos(3 * x.x() * x.z()), x.y() * x.z() + 1.0);
    });
    project(w, g, poisson);
    double div = 0;
    for (double v : mac_divergence(w, g).data) div = std::max(div, std::abs(v));
    EXPECT_LE(div, 1e-10);
}

TEST(FsiSolver, InitialRandomFieldIsProjected) {
    Scenario sc = spinning_ball(16);
    sc.u0.preset = "random";
    sc.u0.amplitude = 0.3;
    sc.dt = 0.005;
    FsiSolver solver(sc);
    SolverState st = solver.initialize();
    EXPECT_LE(fluid_divergence_max(st.u, st.mask, solver.grid()), 1e-10);
    for (int n = 0; n < 3; ++n) {
        st = solver.step(st);
        EXPECT_LE(fluid_divergence_max(st.u, st.mask, solver.grid()), 1e-10);
    }
}

// Symmetric gradient of the face field on cells whose six faces are inside
// the body; the rigid motion imposed there has D u = 0.
TEST(FsiSolver, RigidConstraintOnBodyCells) {
    Scenario sc = spinning_ball(32);
    sc.a0 = Vec3(0.05, -0.02, 0.03);
    sc.omega0 = Vec3(0.3, 0.5, -1.0);
    FsiSolver solver(sc);
    SolverState st = solver.initialize();
    for (int n = 0; n < 3; ++n) st = solver.step(st);
    // the constraint is imposed with the mask of the previous position
    const MacGrid& g = solver.grid();
    const MacField& m = st.mask;
    int checked = 0;
    double worst = 0;
    SolverState nxt = solver.step(st);
    const MacField& u = nxt.u;
    for (int k = 1; k < g.N - 1; ++k)
        for (int j = 1; j < g.N - 1; ++j)
            for (int i = 1; i < g.N - 1; ++i) {
                // all faces of the 3x3x3 block must be fully inside for the cross terms
                bool inside = true;
                for (int dk = -1; dk <= 1 && inside; ++dk)
                    for (int dj = -1; dj <= 1 && inside; ++dj)
                        for (int di = -1; di <= 2 && inside; ++di)
                            for (int d = 0; d < 3; ++d) {
                                std::array<int, 3> p{i + di, j + dj, k + dk};
                                if (p[d] < 0 || p[d] > g.N || p[(d + 1) % 3] < 0 || p[(d + 1) % 3] >= g.N ||
                                    p[(d + 2) % 3] < 0 || p[(d + 2) % 3] >= g.N || m.c[d](p[0], p[1], p[2]) < 1.0) {
                                    inside = false;
                                    break;
                                }
                            }
                if (!inside) continue;
                ++checked;
                // normal strains
                const double exx = (u.c[0](i + 1, j, k) - u.c[0](i, j, k)) / g.h;
                const double eyy = (u.c[1](i, j + 1, k) - u.c[1](i, j, k)) / g.h;
                const double ezz = (u.c[2](i, j, k + 1) - u.c[2](i, j, k)) / g.h;
                // shear at the cell from neighbouring faces (centred)
                const double uy = (u.c[0](i, j + 1, k) + u.c[0](i + 1, j + 1, k) - u.c[0](i, j - 1, k) - u.c[0](i + 1, j - 1, k)) / (4 * g.h);
                const double vx = (u.c[1](i + 1, j, k) + u.c[1](i + 1, j + 1, k) - u.c[1](i - 1, j, k) - u.c[1](i - 1, j + 1, k)) / (4 * g.h);
                worst = std::max({worst, std::abs(exx), std::abs(eyy), std::abs(ezz), std::abs(uy + vx)});
            }
    EXPECT_GT(checked, 0);
    EXPECT_LE(worst, 1e-10);
}

TEST(FsiSolver, SpinningBallDecaysAndEnergyInequalityHolds) {
    const Scenario sc = spinning_ball(24);
    const RunResult r = run(sc);
    ASSERT_EQ(r.energy.size(), static_cast<std::size_t>(sc.steps()) + 1);
    const double E0 = r.energy.front().kinetic;
    ASSERT_GT(E0, 0.0);
    for (std::size_t n = 1; n < r.energy.size(); ++n) {
        EXPECT_LT(r.energy[n].kinetic, r.energy[n - 1].kinetic) << n;
        EXPECT_LT(r.trajectory[n].omega.norm(), r.trajectory[n - 1].omega.norm()) << n;
        EXPECT_GE(r.energy[n].slack, -1e-3 * E0) << n;
        EXPECT_GE(r.energy[n].dissipation, r.energy[n - 1].dissipation);
    }
    // ball stays put by symmetry
    EXPECT_LE((r.trajectory.back().q - sc.body.center).norm(), 1e-10);
}

TEST(FsiSolver, SlipDissipationIsPositive) {
    Scenario sc = spinning_ball(24);
    sc.coupling = Coupling::navier_slip;
    sc.beta = 5.0;
    const RunResult r = run(sc);
    const double E0 = r.energy.front().kinetic;
    for (std::size_t n = 1; n < r.energy.size(); ++n) {
        EXPECT_GE(r.energy[n].slip_dissipation, r.energy[n - 1].slip_dissipation);
        EXPECT_GE(r.energy[n].slack, -1e-3 * E0) << n;
    }
    EXPECT_GT(r.energy.back().slip_dissipation, 0.0);
    // less torque than no-slip
    const RunResult ns = run(spinning_ball(24));
    EXPECT_GT(r.trajectory.back().omega.norm(), ns.trajectory.back().omega.norm());
}

TEST(FsiSolver, LargeBetaApproachesNoSlip) {
    Scenario base = spinning_ball(16);
    base.dt = 0.006;
    base.T = 0.3;
    base.a0 = Vec3(0.2, 0.0, 0.0);
    const RunResult ns = run(base);
    const RigidState ref = ns.trajectory.back();
    std::vector<double> gaps;
    for (double beta : {10.0, 1e2, 1e3}) {
        Scenario sc = base;
        sc.coupling = Coupling::navier_slip;
        sc.beta = beta;
        const RigidState s = run(sc).trajectory.back();
        const double g = std::max((s.omega - ref.omega).norm() / ref.omega.norm(),
                                  (s.q - ref.q).norm() / (ref.q - base.body.center).norm());
        gaps.push_back(g);
    }
    EXPECT_GT(gaps[0], gaps[1]);
    EXPECT_GT(gaps[1], gaps[2]);
    EXPECT_LE(gaps[2], 0.05);
}

TEST(FsiSolver, BitIdenticalReruns) {
    Scenario sc = spinning_ball(12);
    sc.dt = 0.01;
    sc.T = 0.1;
    sc.u0.preset = "random";
    sc.u0.amplitude = 0.2;
    sc.a0 = Vec3(0.1, 0.05, 0);
    const RunResult a = run(sc), b = run(sc);
    ASSERT_EQ(a.snapshots.size(), b.snapshots.size());
    EXPECT_TRUE(same_field(a.snapshots.back().u, b.snapshots.back().u));
    EXPECT_EQ(a.snapshots.back().p.data, b.snapshots.back().p.data);
    for (std::size_t n = 0; n < a.energy.size(); ++n) {
        EXPECT_EQ(a.energy[n].kinetic, b.energy[n].kinetic);
        EXPECT_EQ(a.trajectory[n].q, b.trajectory[n].q);
    }
}

TEST(FsiSolver, ZeroHorizonGivesInitialSnapshot) {
    Scenario sc = spinning_ball(8);
    sc.dt = 0.01;
    sc.T = 0.0;
    const RunResult r = run(sc);
    EXPECT_EQ(r.snapshots.size(), 1u);
    EXPECT_EQ(r.energy.size(), 1u);
}

TEST(FsiSolver, ContactGuard) {
    Scenario sc = spinning_ball(8);
    sc.dt = 0.01;
    sc.delta_wall = 0.05;
    SolverState st;
    st.rigid.q = Vec3(0.5, 0.5, 0.5);
    EXPECT_NO_THROW(contact_guard(st, sc));
    st.rigid.q = Vec3(0.0, 0.5, 0.5);
    EXPECT_THROW(contact_guard(st, sc), ContactError);
    st.rigid.q = Vec3(0.25, 0.5, 0.5);  // 0.25 - 0.15 - 0.05 is not exactly 0 in binary
    sc.delta_wall = 0.25 - 0.15;
    sc.body.radius = 0.15;
    st.rigid.q.x() = sc.delta_wall + sc.body.radius;
    EXPECT_THROW(contact_guard(st, sc), ContactError);
    try {
        st.t = 0.7;
        st.rigid.q = Vec3(0.1, 0.5, 0.5);
        contact_guard(st, sc);
        FAIL();
    } catch (const ContactError& e) {
        EXPECT_EQ(e.time, 0.7);
        EXPECT_NEAR(e.gap, 0.1 - 0.15, 1e-15);
    }
}

TEST(FsiSolver, ScenarioValidation) {
    Scenario sc = spinning_ball(16);
    sc.dt = 1.0;
    EXPECT_THROW(FsiSolver{sc}, CFLViolation);
    sc = spinning_ball(16);
    sc.body.rho_s = 0.5;
    EXPECT_THROW(FsiSolver{sc}, InvalidSpec);
    sc = spinning_ball(16);
    sc.coupling = Coupling::navier_slip;
    EXPECT_THROW(FsiSolver{sc}, InvalidSpec);
    sc = spinning_ball(16);
    sc.u0.preset = "random";
    sc.u0.amplitude = 100.0;
    EXPECT_THROW(FsiSolver(sc).initialize(), CFLViolation);
    sc = spinning_ball(16);
    sc.u0.preset = "nope";
    EXPECT_THROW(FsiSolver(sc).initialize(), InvalidSpec);
    sc = spinning_ball(16);
    sc.body.center = Vec3(0.1, 0.5, 0.5);
    EXPECT_THROW(FsiSolver(sc).initialize(), ContactError);
}
