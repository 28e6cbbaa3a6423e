#pragma once

#include "fsirb/core/types.hpp"

#include <algorithm>

namespace fsirb {

// Axis-aligned container.
struct Box {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Ones();

    bool contains(const Vec3& x) const {
        return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
    }
    // Distance from an interior point to the nearest wall.
    double wall_distance(const Vec3& x) const {
        double d = std::min((x - lo).minCoeff(), (hi - x).minCoeff());
        return d;
    }
    Vec3 extent() const { return hi - lo; }
};

}  // namespace fsirb
