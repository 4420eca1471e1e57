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
#include "gatlas/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gatlas {

FoldoverError::FoldoverError(std::size_t v, double j)
    : std::runtime_error("foldover: non-positive Jacobian determinant " + std::to_string(j) + " at voxel " +
                         std::to_string(v)),
      voxel(v),
      jac_det(j)
{
}

VolumeGrid::VolumeGrid(Dims dims, Spacing spacing, int channels, double fill)
    : dims_(dims), spacing_(spacing), channels_(channels)
{
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw InvalidInput("VolumeGrid: dims must be positive");
    if (channels < 1) throw InvalidInput("VolumeGrid: need at least one channel");
    for (double s : spacing)
        if (!(s > 0.0) || !std::isfinite(s)) throw InvalidInput("VolumeGrid: spacing must be positive");
    values_.assign(dims.count() * std::size_t(channels), fill);
    mask_.assign(values_.size(), 0);
}

bool VolumeGrid::any_missing() const
{
    return std::any_of(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m != 0; });
}

unsigned VolumeGrid::observed_pattern(std::size_t voxel) const
{
    unsigned bits = 0;
    for (int c = 0; c < channels_; ++c)
        if (!missing(voxel, c)) bits |= 1u << c;
    return bits;
}

void VolumeGrid::validate() const
{
    if (values_.empty()) throw InvalidInput("VolumeGrid: empty volume");
    for (double s : spacing_)
        if (!(s > 0.0)) throw InvalidInput("VolumeGrid: spacing must be positive");
    for (std::size_t n = 0; n < values_.size(); ++n)
        if (mask_[n] == 0 && !std::isfinite(values_[n]))
            throw InvalidInput("VolumeGrid: non-finite observed value at flat index " + std::to_string(n));
}

VectorField VectorField::identity(Dims d, Spacing s)
{
    VectorField f(d, s);
    for (std::size_t n = 0; n < f.size(); ++n) {
        const auto c = d.coords(n);
        f.v[n] = Vec3(c[0], c[1], c[2]);
    }
    return f;
}

double VectorField::dot(const VectorField& other) const
{
    double s = 0.0;
    for (std::size_t n = 0; n < v.size(); ++n) s += v[n].dot(other.v[n]);
    return s;
}

double VectorField::max_norm() const
{
    double m = 0.0;
    for (const auto& x : v) m = std::max(m, x.norm());
    return m;
}

DeformationField DeformationField::identity(Dims d, Spacing s)
{
    DeformationField f;
    f.forward = VectorField::identity(d, s);
    f.inverse = f.forward;
    f.jac_det.assign(d.count(), 1.0);
    return f;
}

}  // namespace gatlas
