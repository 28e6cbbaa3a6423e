// Library use of the solver: a ball spun up in still fluid, printing the
// energy budget every ten steps.
#include "fsirb/fsi_solver.hpp"
#include "fsirb/uniqueness_diagnostics.hpp"

#include <cstdio>

using namespace fsirb;

int main() {
    Scenario sc;
    sc.body.radius = 0.15;
    sc.body.rho_s = 2.0;
    sc.grid_n = 24;
    sc.dt = 0.004;
    sc.T = 0.2;
    sc.omega0 = Vec3(0, 0, 1);
    const MacGrid g = MacGrid::of(sc);
    std::printf("%6s %12s %12s %12s %10s %10s\n", "t", "E", "D", "slack", "|omega|", "||u||_4");
    run(sc, [&](const SolverState& st, const EnergyRecord& e) {
        if (st.step % 10) return;
        std::printf("%6.3f %12.5e %12.5e %12.5e %10.5f %10.5f\n", st.t, e.kinetic, e.dissipation, e.slack,
                    st.rigid.omega.norm(), serrin_norm(st.u, g, 4.0));
    });
}
