#include "fsirb/rigid_dynamics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace fsirb;

namespace {

Mat3 rot_z(double angle) {
    Mat3 r;
    r << std::cos(angle), -std::sin(angle), 0, std::sin(angle), std::cos(angle), 0, 0, 0, 1;
    return r;
}

// Spatial-frame reference: L = Q I Q^T omega is conserved, Q' = skew(omega) Q.
Mat3 reference_free_rotation(const Mat3& I, const Vec3& omega0, double T, int steps) {
    const Vec3 L = I * omega0;
    const Mat3 Iinv = I.inverse();
    Mat3 Q = Mat3::Identity();
    const double dt = T / steps;
    auto f = [&](const Mat3& q) {
        const Vec3 w = q * Iinv * q.transpose() * L;
        return Mat3(skew(w) * q);
    };
    for (int n = 0; n < steps; ++n) {
        const Mat3 k1 = f(Q);
        const Mat3 k2 = f(Q + 0.5 * dt * k1);
        const Mat3 k3 = f(Q + 0.5 * dt * k2);
        const Mat3 k4 = f(Q + dt * k3);
        Q += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return Q;
}

InertiaData anisotropic() {
    InertiaData in;
    in.m = 2.0;
    in.J0 = Vec3(1.0, 2.0, 3.5).asDiagonal();
    in.I_body = in.J0;
    return in;
}

}  // namespace

TEST(Skew, UnitZ) {
    Mat3 expected;
    expected << 0, -1, 0, 1, 0, 0, 0, 0, 0;
    EXPECT_EQ(skew(Vec3(0, 0, 1)), expected);
    EXPECT_EQ(skew(Vec3::Zero()), Mat3::Zero());
}

TEST(Skew, MatchesCrossProduct) {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int n = 0; n < 100; ++n) {
        const Vec3 w(u(rng), u(rng), u(rng)), x(u(rng), u(rng), u(rng));
        EXPECT_LE((skew(w) * x - w.cross(x)).norm(), 1e-15 * 16);
        EXPECT_EQ(skew(w) + skew(w).transpose(), Mat3::Zero());
    }
}

TEST(RigidVelocity, Cases) {
    RigidState s;
    s.a = Vec3(1, 0, 0);
    EXPECT_EQ(rigid_velocity(s, Vec3(3, -1, 2)), Vec3(1, 0, 0));
    s.a = Vec3::Zero();
    s.omega = Vec3(0, 0, 1);
    s.q = Vec3(0.5, 0.5, 0.5);
    EXPECT_LE((rigid_velocity(s, Vec3(1.5, 0.5, 0.5)) - Vec3(0, 1, 0)).norm(), 1e-15);

    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int n = 0; n < 50; ++n) {
        s.a = Vec3(u(rng), u(rng), u(rng));
        s.omega = Vec3(u(rng), u(rng), u(rng));
        s.q = Vec3(u(rng), u(rng), u(rng));
        const Vec3 x(u(rng), u(rng), u(rng));
        EXPECT_LE((rigid_velocity(s, x) - (skew(s.omega) * (x - s.q) + s.a)).norm(), 1e-15);
    }
}

TEST(RigidVelocity, SymmetricGradientVanishes) {
    RigidState s;
    s.a = Vec3(0.3, -0.2, 0.1);
    s.omega = Vec3(1.0, 2.0, -0.5);
    const Vec3 x(0.2, 0.4, 0.9);
    const double h = 1e-3;
    Mat3 G;
    for (int j = 0; j < 3; ++j) {
        const Vec3 e = Vec3::Unit(j) * h;
        G.col(j) = (rigid_velocity(s, x + e) - rigid_velocity(s, x - e)) / (2 * h);
    }
    EXPECT_LE((G + G.transpose()).norm(), 1e-10);
}

TEST(Inertia, BallMatchesVoxelQuadrature) {
    BodySpec b;
    b.radius = 0.2;
    b.rho_s = 1.0 / b.volume();
    const InertiaData in = inertia_tensor(b);
    EXPECT_NEAR(in.m, 1.0, 1e-14);
    EXPECT_LE((in.J0 - 0.016 * Mat3::Identity()).norm(), 1e-15);

    // midpoint voxel quadrature of rho (|y|^2 I - y y^T) over the ball
    const int N = 160;
    const double h = 2 * b.radius / N;
    Mat3 J = Mat3::Zero();
    double mass = 0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            for (int k = 0; k < N; ++k) {
                const Vec3 y = Vec3(i + 0.5, j + 0.5, k + 0.5) * h - Vec3::Constant(b.radius);
                if (y.norm() >= b.radius) continue;
                J += b.rho_s * h * h * h * (y.squaredNorm() * Mat3::Identity() - y * y.transpose());
                mass += b.rho_s * h * h * h;
            }
    EXPECT_NEAR(mass, 1.0, 5e-3);
    EXPECT_LE((J - in.J0).norm() / in.J0.norm(), 1e-2);
    EXPECT_LE(std::abs(J(0, 1)) + std::abs(J(0, 2)) + std::abs(J(1, 2)), 1e-6);

    BodySpec b2 = b;
    b2.rho_s *= 2;
    const InertiaData in2 = inertia_tensor(b2);
    EXPECT_NEAR(in2.m, 2 * in.m, 1e-14);
    EXPECT_LE((in2.J0 - 2 * in.J0).norm(), 1e-15);
}

TEST(Renormalize, PolarFactor) {
    const Mat3 R = rot_z(0.7) * rotation_exp(Vec3(0.1, -0.3, 0.2));
    EXPECT_LE((renormalize_rotation(R) - R).norm(), 1e-15);
    EXPECT_EQ(renormalize_rotation(Mat3::Identity()), Mat3::Identity());

    std::mt19937 rng(11);
    std::uniform_real_distribution<double> u(-1e-6, 1e-6);
    Mat3 P = R;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) P(i, j) += u(rng);
    const Mat3 out = renormalize_rotation(P);
    EXPECT_LE((out.transpose() * out - Mat3::Identity()).norm(), 1e-14);
    Eigen::JacobiSVD<Mat3> svd(P, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3 oracle = svd.matrixU() * svd.matrixV().transpose();
    EXPECT_LE((out - oracle).norm(), 1e-14);
}

TEST(Renormalize, Degenerate) {
    Mat3 M = Mat3::Identity();
    M(2, 2) = 1e-10;
    EXPECT_THROW(renormalize_rotation(M), DegenerateMatrix);
    EXPECT_THROW(renormalize_rotation(-Mat3::Identity()), DegenerateMatrix);
}

TEST(StepRigidBody, IsotropicConservesOmega) {
    BodySpec b;
    b.rho_s = 1.0 / b.volume();
    const InertiaData in = inertia_tensor(b);
    RigidState s;
    s.omega = Vec3(0, 0, 1);
    for (int n = 0; n < 1000; ++n) s = step_rigid_body(s, in, Vec3::Zero(), Vec3::Zero(), 1e-3);
    EXPECT_LE((s.omega - Vec3(0, 0, 1)).norm(), 1e-12);
    EXPECT_LE((s.Q.transpose() * s.Q - Mat3::Identity()).norm(), 1e-12);
    EXPECT_NEAR(s.Q.determinant(), 1.0, 1e-12);
}

TEST(StepRigidBody, ClosedFormRotation) {
    BodySpec b;
    const InertiaData in = inertia_tensor(b);
    for (double dt : {1e-2, 5e-3}) {
        RigidState s;
        s.omega = Vec3(0, 0, 3.0);
        const int steps = static_cast<int>(std::lround(1.0 / dt));
        for (int n = 0; n < steps; ++n) s = step_rigid_body(s, in, Vec3::Zero(), Vec3::Zero(), dt);
        EXPECT_LE((s.Q - rot_z(3.0)).norm(), 10 * std::pow(dt, 4) + 1e-13);
        EXPECT_NEAR(s.t, 1.0, 1e-12);
    }
}

TEST(StepRigidBody, ConstantForceExact) {
    const InertiaData in = anisotropic();
    RigidState s;
    s.a = Vec3(0.1, 0.2, 0.3);
    const Vec3 f(1.0, -2.0, 0.5);
    for (int n = 0; n < 100; ++n) s = step_rigid_body(s, in, f, Vec3::Zero(), 0.01);
    EXPECT_LE((s.a - (Vec3(0.1, 0.2, 0.3) + f * 1.0 / in.m)).norm(), 1e-13);
    const Vec3 q_exact = Vec3(0.1, 0.2, 0.3) + 0.5 * f / in.m;
    EXPECT_LE((s.q - q_exact).norm(), 1e-13);
}

TEST(StepRigidBody, FreeRotationMatchesSpatialFrame) {
    // Tumbling anisotropic body: energy and spatial angular momentum conserved,
    // and the orientation matches an independent spatial-frame integration.
    const InertiaData in = anisotropic();
    const Vec3 w0(0.3, 2.0, 0.4);
    RigidState s;
    s.omega = w0;
    const double E0 = kinetic_energy(s, in);
    const Vec3 L0 = in.J0 * w0;
    const int steps = 2000;
    for (int n = 0; n < steps; ++n) s = step_rigid_body(s, in, Vec3::Zero(), Vec3::Zero(), 1.0 / steps);
    const Vec3 L = s.Q * in.I_body * s.Q.transpose() * s.omega;
    EXPECT_NEAR(kinetic_energy(s, in), E0, 1e-10);
    EXPECT_LE((L - L0).norm(), 1e-10);
    const Mat3 Qref = reference_free_rotation(in.J0, w0, 1.0, 20000);
    EXPECT_LE((s.Q - Qref).norm(), 1e-9);
}

TEST(StepRigidBody, RichardsonOrder) {
    const InertiaData in = anisotropic();
    RigidState s0;
    s0.omega = Vec3(0.5, 1.5, -0.7);
    s0.a = Vec3(0.1, 0, 0);
    const Vec3 f(0.2, 0.1, 0.0), tau(0.3, -0.2, 0.4);
    auto run = [&](int steps) {
        RigidState s = s0;
        for (int n = 0; n < steps; ++n) s = step_rigid_body(s, in, f, tau, 1.0 / steps);
        return s;
    };
    const RigidState ref = run(3200);
    const double e1 = (run(50).Q - ref.Q).norm() + (run(50).omega - ref.omega).norm();
    const double e2 = (run(100).Q - ref.Q).norm() + (run(100).omega - ref.omega).norm();
    EXPECT_GE(std::log2(e1 / e2), 2.0);
}

TEST(StepRigidBody, OrthonormalAfterManySteps) {
    const InertiaData in = anisotropic();
    RigidState s;
    s.omega = Vec3(4, -3, 5);
    for (int n = 0; n < 5000; ++n) s = step_rigid_body(s, in, Vec3::Zero(), Vec3(0.1, 0, 0), 1e-3);
    EXPECT_LE((s.Q.transpose() * s.Q - Mat3::Identity()).norm(), 1e-10);
}

TEST(StepRigidBody, NonFinite) {
    const InertiaData in = anisotropic();
    RigidState s;
    s.a[0] = std::nan("");
    EXPECT_THROW(step_rigid_body(s, in, Vec3::Zero(), Vec3::Zero(), 0.1), NonFiniteInput);
    RigidState t;
    EXPECT_THROW(step_rigid_body(t, in, Vec3(INFINITY, 0, 0), Vec3::Zero(), 0.1), NonFiniteInput);
}
