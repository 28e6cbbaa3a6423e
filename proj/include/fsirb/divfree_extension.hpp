#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/core/geometry.hpp"
#include "fsirb/core/types.hpp"
#include "fsirb/rigid_dynamics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

namespace fsirb {

// smooth: degree-13 smoothstep, C6 at both junctions.
// quintic: 10s^3 - 15s^4 + 6s^5, C2 at the junctions.
enum class CutoffProfile { smooth, quintic };

namespace detail {

// Coefficients of the order-n smoothstep, S(s) = sum c[k] s^k.
template <int N>
constexpr std::array<double, 2 * N + 2> smoothstep_coeffs() {
    std::array<double, 2 * N + 2> c{};
    auto binom = [](int n, int k) {
        double r = 1.0;
        for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
        return r;
    };
    for (int k = 0; k <= N; ++k) {
        c[N + 1 + k] = binom(N + k, k) * binom(2 * N + 1, N - k) * ((k % 2) ? -1.0 : 1.0);
    }
    return c;
}

// Value and first three derivatives of a polynomial at s.
template <std::size_t M>
std::array<double, 4> poly_derivs(const std::array<double, M>& c, double s) {
    std::array<double, 4> out{0.0, 0.0, 0.0, 0.0};
    for (int d = 0; d < 4; ++d) {
        double acc = 0.0;
        for (int k = static_cast<int>(M) - 1; k >= d; --k) {
            double f = c[k];
            for (int m = 0; m < d; ++m) f *= (k - m);
            acc = acc * s + f;
        }
        out[d] = acc;
    }
    return out;
}

}  // namespace detail

// chi = 1 for rho <= r_inner, chi = 0 for rho >= r_outer, radii from q(t).
struct CutoffSpec {
    double r_inner = 0.25;
    double r_outer = 0.4;
    CutoffProfile profile = CutoffProfile::smooth;

    void validate() const {
        if (!(std::isfinite(r_inner) && std::isfinite(r_outer)) || !(r_inner > 0.0) ||
            !(r_inner < r_outer)) {
            throw InvalidSpec("cutoff requires 0 < r_inner < r_outer");
        }
    }
};

inline CutoffSpec default_cutoff(const BodySpec& body, const Box& box) {
    CutoffSpec c;
    c.r_inner = 1.25 * body.radius;
    c.r_outer = std::min(2.0 * body.radius, 0.9 * box.wall_distance(body.center));
    c.validate();
    return c;
}

struct CutoffValue {
    double chi = 0.0, d1 = 0.0, d2 = 0.0, d3 = 0.0;
};

// Radial cutoff and its first three derivatives in rho.
inline CutoffValue cutoff(double rho, const CutoffSpec& spec) {
    spec.validate();
    if (rho <= spec.r_inner) return {1.0, 0.0, 0.0, 0.0};
    if (rho >= spec.r_outer) return {0.0, 0.0, 0.0, 0.0};
    const double w = spec.r_outer - spec.r_inner;
    const double s = (rho - spec.r_inner) / w;
    static constexpr auto c13 = detail::smoothstep_coeffs<6>();
    static constexpr auto c5 = detail::smoothstep_coeffs<2>();
    // 1 - S(s) = S(1 - s): evaluate on the half nearer zero to avoid cancellation
    const bool upper = s > 0.5;
    const double sig = upper ? 1.0 - s : s;
    const auto S = (spec.profile == CutoffProfile::quintic) ? detail::poly_derivs(c5, sig)
                                                            : detail::poly_derivs(c13, sig);
    if (upper) return {S[0], -S[1] / w, S[2] / (w * w), -S[3] / (w * w * w)};
    return {1.0 - S[0], -S[1] / w, -S[2] / (w * w), -S[3] / (w * w * w)};
}

// A = a x r / 2 - |r|^2 omega / 2 with r = x - q; curl A = a + omega x r.
inline Vec3 vector_potential(const RigidState& s, const Vec3& x) {
    const Vec3 r = x - s.q;
    return 0.5 * s.a.cross(r) - 0.5 * r.squaredNorm() * s.omega;
}

struct LambdaEval {
    Vec3 value = Vec3::Zero();
    Mat3 grad = Mat3::Zero();               // grad(i,j) = d_j Lambda_i
    Tensor3 hess = zero_value<Tensor3>();   // hess[i](j,k) = d_j d_k Lambda_i
};

// Lambda = curl(chi A), with closed-form first and second derivatives.
inline LambdaEval lambda_eval(const RigidState& st, const CutoffSpec& spec, const Vec3& x,
                              bool with_hess = true) {
    LambdaEval out;
    const Vec3 r = x - st.q;
    const double rho2 = r.squaredNorm();
    const double rho = std::sqrt(rho2);
    if (rho >= spec.r_outer) return out;
    const Mat3 P = skew(st.omega);
    const Vec3 v = st.a + st.omega.cross(r);
    if (rho <= spec.r_inner) {
        out.value = v;
        out.grad = P;
        return out;
    }
    const CutoffValue c = cutoff(rho, spec);
    const double psi1 = c.d1 / rho;
    const double psi2 = (c.d2 - c.d1 / rho) / rho2;
    const double psi3 = (c.d3 * rho2 - 3.0 * rho * c.d2 + 3.0 * c.d1) / (rho2 * rho2 * rho);

    const Vec3 cr = r.cross(st.omega);
    const double ra = r.dot(st.a);
    const Vec3 B = rho2 * st.a - ra * r - rho2 * cr;
    Mat3 dB;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            dB(i, j) = 2.0 * r[j] * st.a[i] - st.a[j] * r[i] - (i == j ? ra : 0.0) -
                       2.0 * r[j] * cr[i] + rho2 * P(i, j);

    out.value = c.chi * v + 0.5 * psi1 * B;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            out.grad(i, j) = psi1 * r[j] * v[i] + c.chi * P(i, j) + 0.5 * psi2 * r[j] * B[i] +
                             0.5 * psi1 * dB(i, j);
    if (!with_hess) return out;

    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int k = j; k < 3; ++k) {
                const double djk = (j == k) ? 1.0 : 0.0;
                const double ddB = 2.0 * djk * st.a[i] - st.a[j] * (i == k ? 1.0 : 0.0) -
                                   st.a[k] * (i == j ? 1.0 : 0.0) - 2.0 * djk * cr[i] +
                                   2.0 * r[j] * P(i, k) + 2.0 * r[k] * P(i, j);
                const double val = psi2 * r[k] * r[j] * v[i] + psi1 * djk * v[i] +
                                   psi1 * r[j] * P(i, k) + psi1 * r[k] * P(i, j) +
                                   0.5 * psi3 * r[k] * r[j] * B[i] + 0.5 * psi2 * djk * B[i] +
                                   0.5 * psi2 * r[j] * dB(i, k) + 0.5 * psi2 * r[k] * dB(i, j) +
                                   0.5 * psi1 * ddB;
                out.hess[i](j, k) = val;
                out.hess[i](k, j) = val;
            }
        }
    }
    return out;
}

inline std::pair<Vec3, Mat3> lambda_field(const RigidState& st, const CutoffSpec& spec,
                                          const Vec3& x) {
    const LambdaEval e = lambda_eval(st, spec, x, false);
    return {e.value, e.grad};
}

// Lambda bound to one rigid state.
struct ExtensionField {
    RigidState state;
    CutoffSpec spec;

    Vec3 operator()(const Vec3& x) const { return lambda_eval(state, spec, x, false).value; }
    Mat3 gradient(const Vec3& x) const { return lambda_eval(state, spec, x, false).grad; }
    LambdaEval full(const Vec3& x) const { return lambda_eval(state, spec, x, true); }
};

}  // namespace fsirb
