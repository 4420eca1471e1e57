/*
 * gatlas : groupwise generative tissue atlas construction
 *
 * Copyright 2026 The gatlas Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <span>
#include <vector>

#include "gatlas/volume.hpp"

namespace gatlas {

/// Corner indices and weights of a clamp-to-edge trilinear lookup. The
/// weight derivatives are the exact partials of the interpolant (zero along
/// an axis where the query was clamped).
struct TrilinearStencil {
    std::size_t idx[8];
    double w[8];
    double dw[8][3];

    TrilinearStencil(const Dims& dims, const Vec3& p, bool with_gradient = false);

    template <class Fn>
    double apply(Fn&& value_at) const
    {
        double s = 0.0;
        for (int c = 0; c < 8; ++c) s += w[c] * value_at(idx[c]);
        return s;
    }
    template <class Fn>
    Vec3 apply_gradient(Fn&& value_at) const
    {
        Vec3 g = Vec3::Zero();
        for (int c = 0; c < 8; ++c) {
            const double f = value_at(idx[c]);
            g += f * Vec3(dw[c][0], dw[c][1], dw[c][2]);
        }
        return g;
    }
};

/// Samples every channel of `field` at voxel-coordinate points. Result is
/// point-major: `out[p * channels + c]`.
std::vector<double> sample_trilinear(const VolumeGrid& field, std::span<const Vec3> coords);

/// Samples a vector field at voxel-coordinate points (clamp-to-edge).
std::vector<Vec3> sample_trilinear(const VectorField& field, std::span<const Vec3> coords);

/// Single-point lookups used on hot paths.
double sample_scalar(const std::vector<double>& data, const Dims& dims, const Vec3& p);
Vec3 sample_vector(const VectorField& field, const Vec3& p);

/// Evaluates a position map at an arbitrary point: the displacement
/// (map - identity) is interpolated with clamp-to-edge and added back.
Vec3 sample_map(const VectorField& map, const Vec3& p);

/// Central differences in the interior, one-sided at the boundary, scaled by
/// 1/spacing. One vector field per channel.
std::vector<VectorField> spatial_gradient(const VolumeGrid& field);

/// Partials of a position map at voxel `n` (central differences, one-sided at
/// faces). Axes of length one contribute the identity column.
Mat3 map_jacobian(const VectorField& map, std::size_t n);

std::vector<double> jacobian_determinants(const VectorField& map);

/// (outer o inner). Forward maps compose as outer(inner(y)); inverses as
/// inner^-1(outer^-1(x)).
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

}  // namespace gatlas
