// Flow map of a tumbling, drifting ball: det(grad X) stays at 1 and the
// error drops by four when dt halves.
#include "fsirb/flow_map.hpp"

#include <cstdio>

using namespace fsirb;

int main() {
    PrescribedMotion motion;
    motion.a0 = Vec3(0.05, 0.02, 0.0);
    motion.omega = Vec3(0.3, -0.2, 1.0);
    const Box box;
    const CutoffSpec cut{0.2, 0.4, CutoffProfile::smooth};
    const Grid g = Grid::nodes(box.lo, 1.0 / 32, {32, 32, 32});
    double prev = 0.0;
    for (double dt : {2e-3, 1e-3, 5e-4}) {
        FlowMapData m = identity_map(g, box, cut, 0.0, MapOptions{false, false, false});
        m = advance_to(m, motion, 0.2, dt);
        double err = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) err = std::max(err, std::abs(m.gradX[i].determinant() - 1.0));
        std::printf("dt %.1e  max|det-1| %.3e", dt, err);
        if (prev > 0) std::printf("  ratio %.2f", prev / err);
        std::printf("\n");
        prev = err;
    }
}
