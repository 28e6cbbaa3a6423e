#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/types.hpp"

#include <cmath>
#include <numbers>

namespace fsirb {

struct RigidState {
    double t = 0.0;
    Vec3 q = Vec3::Zero();
    Mat3 Q = Mat3::Identity();
    Vec3 a = Vec3::Zero();
    Vec3 omega = Vec3::Zero();
};

// Ball-shaped body.
struct BodySpec {
    Vec3 center = Vec3::Constant(0.5);
    double radius = 0.2;
    double rho_s = 1.0;

    double volume() const { return 4.0 / 3.0 * std::numbers::pi * radius * radius * radius; }
};

struct InertiaData {
    double m = 1.0;
    Mat3 J0 = Mat3::Identity();
    Mat3 I_body = Mat3::Identity();
};

inline Vec3 rigid_velocity(const RigidState& s, const Vec3& x) {
    return s.a + s.omega.cross(x - s.q);
}

inline InertiaData inertia_tensor(const BodySpec& body) {
    InertiaData out;
    out.m = body.rho_s * body.volume();
    out.J0 = (0.4 * out.m * body.radius * body.radius) * Mat3::Identity();
    out.I_body = out.J0;
    return out;
}

// Polar factor by the scaled-free Newton iteration Q <- (Q + Q^-T) / 2.
inline Mat3 renormalize_rotation(const Mat3& Q) {
    if (!Q.allFinite()) throw NonFiniteInput("rotation has non-finite entries");
    if (Q.determinant() <= 1e-8) throw DegenerateMatrix("det Q <= 1e-8");
    Mat3 x = Q;
    for (int it = 0; it < 60; ++it) {
        const Mat3 next = 0.5 * (x + x.inverse().transpose());
        const double change = (next - x).norm();
        x = next;
        if (change < 1e-15) break;
    }
    return x;
}

// exp of skew(theta) by Rodrigues' formula.
inline Mat3 rotation_exp(const Vec3& theta) {
    const double th = theta.norm();
    const Mat3 K = skew(theta);
    if (th < 1e-8) {
        return Mat3::Identity() + K + 0.5 * K * K;
    }
    return Mat3::Identity() + (std::sin(th) / th) * K + ((1.0 - std::cos(th)) / (th * th)) * K * K;
}

namespace detail {

struct RigidDeriv {
    Vec3 q, a, Omega, theta;
};

}  // namespace detail

// One RK4 step. Orientation is advanced as Q = Q_n exp(theta) with theta
// integrated in the Lie algebra; angular velocity is integrated in the body
// frame where the inertia is constant.
inline RigidState step_rigid_body(const RigidState& s, const InertiaData& inertia,
                                  const Vec3& force, const Vec3& torque, double dt) {
    if (!(std::isfinite(s.t) && s.q.allFinite() && s.Q.allFinite() && s.a.allFinite() &&
          s.omega.allFinite() && force.allFinite() && torque.allFinite() &&
          std::isfinite(dt) && std::isfinite(inertia.m) && inertia.I_body.allFinite())) {
        throw NonFiniteInput("step_rigid_body");
    }
    if (!(dt > 0.0)) throw InvalidSpec("dt must be positive");

    const Mat3& I = inertia.I_body;
    const Mat3 Iinv = I.inverse();
    const Mat3 Qn = s.Q;
    const Vec3 Omega0 = Qn.transpose() * s.omega;

    auto rhs = [&](const Vec3& a, const Vec3& Omega, const Vec3& theta) {
        detail::RigidDeriv d;
        const Mat3 Q = Qn * rotation_exp(theta);
        d.q = a;
        d.a = force / inertia.m;
        d.Omega = Iinv * ((I * Omega).cross(Omega) + Q.transpose() * torque);
        d.theta = Omega + 0.5 * theta.cross(Omega) + theta.cross(theta.cross(Omega)) / 12.0;
        return d;
    };

    const Vec3 th0 = Vec3::Zero();
    const auto k1 = rhs(s.a, Omega0, th0);
    const auto k2 = rhs(s.a + 0.5 * dt * k1.a, Omega0 + 0.5 * dt * k1.Omega, th0 + 0.5 * dt * k1.theta);
    const auto k3 = rhs(s.a + 0.5 * dt * k2.a, Omega0 + 0.5 * dt * k2.Omega, th0 + 0.5 * dt * k2.theta);
    const auto k4 = rhs(s.a + dt * k3.a, Omega0 + dt * k3.Omega, th0 + dt * k3.theta);

    auto comb = [dt](const Vec3& x1, const Vec3& x2, const Vec3& x3, const Vec3& x4) {
        return Vec3(dt / 6.0 * (x1 + 2.0 * x2 + 2.0 * x3 + x4));
    };

    RigidState out;
    out.t = s.t + dt;
    out.q = s.q + comb(k1.q, k2.q, k3.q, k4.q);
    out.a = s.a + comb(k1.a, k2.a, k3.a, k4.a);
    const Vec3 Omega1 = Omega0 + comb(k1.Omega, k2.Omega, k3.Omega, k4.Omega);
    const Vec3 theta1 = comb(k1.theta, k2.theta, k3.theta, k4.theta);
    out.Q = renormalize_rotation(Qn * rotation_exp(theta1));
    out.omega = out.Q * Omega1;
    return out;
}

inline double kinetic_energy(const RigidState& s, const InertiaData& inertia) {
    const Vec3 Omega = s.Q.transpose() * s.omega;
    return 0.5 * inertia.m * s.a.squaredNorm() + 0.5 * Omega.dot(inertia.I_body * Omega);
}

}  // namespace fsirb
