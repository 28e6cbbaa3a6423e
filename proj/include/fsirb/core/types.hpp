#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>

namespace fsirb {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Third-order tensor stored as three slabs: T[l](i, j).
using Tensor3 = std::array<Mat3, 3>;

template <class T>
inline T zero_value() {
    if constexpr (std::is_arithmetic_v<T>) {
        return T(0);
    } else if constexpr (std::is_same_v<T, Tensor3>) {
        return Tensor3{Mat3::Zero(), Mat3::Zero(), Mat3::Zero()};
    } else {
        return T::Zero();
    }
}

// acc += w * v, uniform across the value types stored on grids
inline void axpy(double& acc, double w, double v) { acc += w * v; }
inline void axpy(Vec3& acc, double w, const Vec3& v) { acc += w * v; }
inline void axpy(Mat3& acc, double w, const Mat3& v) { acc += w * v; }
inline void axpy(Tensor3& acc, double w, const Tensor3& v) {
    for (int l = 0; l < 3; ++l) acc[l] += w * v[l];
}

inline bool is_finite(double v) { return std::isfinite(v); }
template <class Derived>
inline bool is_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}
inline bool is_finite(const Tensor3& t) {
    return t[0].allFinite() && t[1].allFinite() && t[2].allFinite();
}

inline double frob(const Tensor3& t) {
    return std::sqrt(t[0].squaredNorm() + t[1].squaredNorm() + t[2].squaredNorm());
}

inline Mat3 skew(const Vec3& w) {
    Mat3 p;
    p << 0.0, -w.z(), w.y(),
         w.z(), 0.0, -w.x(),
         -w.y(), w.x(), 0.0;
    return p;
}

}  // namespace fsirb
