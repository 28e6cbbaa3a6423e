#pragma once

// Second-order forward-mode AD in three variables, used to build
// closed-form oracles for manufactured fields.

#include <Eigen/Dense>

#include <cmath>

namespace testsupport {

struct Dual2 {
    double v = 0.0;
    Eigen::Vector3d g = Eigen::Vector3d::Zero();
    Eigen::Matrix3d H = Eigen::Matrix3d::Zero();

    Dual2() = default;
    Dual2(double c) : v(c) {}  // NOLINT: constants promote implicitly
    static Dual2 var(double x, int axis) {
        Dual2 d(x);
        d.g[axis] = 1.0;
        return d;
    }
};

inline Dual2 operator+(const Dual2& a, const Dual2& b) {
    Dual2 r;
    r.v = a.v + b.v;
    r.g = a.g + b.g;
    r.H = a.H + b.H;
    return r;
}
inline Dual2 operator-(const Dual2& a, const Dual2& b) {
    Dual2 r;
    r.v = a.v - b.v;
    r.g = a.g - b.g;
    r.H = a.H - b.H;
    return r;
}
inline Dual2 operator-(const Dual2& a) { return Dual2(0.0) - a; }
inline Dual2 operator*(const Dual2& a, const Dual2& b) {
    Dual2 r;
    r.v = a.v * b.v;
    r.g = a.g * b.v + a.v * b.g;
    r.H = a.H * b.v + a.v * b.H + a.g * b.g.transpose() + b.g * a.g.transpose();
    return r;
}
// f(a) given f, f', f''
inline Dual2 chain(const Dual2& a, double f, double f1, double f2) {
    Dual2 r;
    r.v = f;
    r.g = f1 * a.g;
    r.H = f1 * a.H + f2 * a.g * a.g.transpose();
    return r;
}
inline Dual2 sin(const Dual2& a) { return chain(a, std::sin(a.v), std::cos(a.v), -std::sin(a.v)); }
inline Dual2 cos(const Dual2& a) { return chain(a, std::cos(a.v), -std::sin(a.v), -std::cos(a.v)); }
inline Dual2 exp(const Dual2& a) {
    const double e = std::exp(a.v);
    return chain(a, e, e, e);
}

using std::cos;
using std::exp;
using std::sin;

}  // namespace testsupport
