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

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

namespace gatlas {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Raised for malformed arguments, shape mismatches and unreadable files.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a deformation loses invertibility. Carries the worst voxel.
class FoldoverError : public std::runtime_error {
public:
    FoldoverError(std::size_t voxel, double jac_det);
    std::size_t voxel;
    double jac_det;
};

/// Voxel counts per axis, x fastest.
struct Dims {
    int nx = 1;
    int ny = 1;
    int nz = 1;

    std::size_t count() const { return std::size_t(nx) * std::size_t(ny) * std::size_t(nz); }
    std::size_t index(int i, int j, int k) const
    {
        return std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k));
    }
    int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    bool operator==(const Dims&) const = default;

    /// Voxel coordinates of linear index `n`.
    std::array<int, 3> coords(std::size_t n) const
    {
        const int i = int(n % std::size_t(nx));
        const int j = int((n / std::size_t(nx)) % std::size_t(ny));
        const int k = int(n / (std::size_t(nx) * std::size_t(ny)));
        return {i, j, k};
    }
};

using Spacing = std::array<double, 3>;

/// Multi-channel scalar volume. Values are stored channel-major:
/// `values[c * N + j]`. The missing mask is authoritative; missing entries
/// are never read arithmetically.
class VolumeGrid {
public:
    VolumeGrid() = default;
    VolumeGrid(Dims dims, Spacing spacing, int channels, double fill = 0.0);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    int channels() const { return channels_; }
    std::size_t voxels() const { return dims_.count(); }
    bool empty() const { return values_.empty(); }

    double& at(std::size_t voxel, int channel) { return values_[std::size_t(channel) * voxels() + voxel]; }
    double at(std::size_t voxel, int channel) const { return values_[std::size_t(channel) * voxels() + voxel]; }

    bool missing(std::size_t voxel, int channel) const
    {
        return mask_[std::size_t(channel) * voxels() + voxel] != 0;
    }
    void set_missing(std::size_t voxel, int channel, bool m)
    {
        mask_[std::size_t(channel) * voxels() + voxel] = m ? 1 : 0;
    }
    bool any_missing() const;

    /// Bit d set when channel d is observed at the voxel.
    unsigned observed_pattern(std::size_t voxel) const;

    std::vector<double>& raw() { return values_; }
    const std::vector<double>& raw() const { return values_; }

    /// Throws InvalidInput when an invariant is broken.
    void validate() const;

private:
    Dims dims_{};
    Spacing spacing_{1.0, 1.0, 1.0};
    int channels_ = 0;
    std::vector<double> values_;
    std::vector<std::uint8_t> mask_;
};

/// Three reals per voxel on a regular grid.
struct VectorField {
    Dims dims{};
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<Vec3> v;

    VectorField() = default;
    VectorField(Dims d, Spacing s, const Vec3& fill = Vec3::Zero()) : dims(d), spacing(s), v(d.count(), fill) {}

    std::size_t size() const { return v.size(); }
    Vec3& operator[](std::size_t n) { return v[n]; }
    const Vec3& operator[](std::size_t n) const { return v[n]; }

    static VectorField identity(Dims d, Spacing s);
    double dot(const VectorField& other) const;
    double max_norm() const;
};

/// A sampled map with its inverse and Jacobian determinants. Positions are
/// stored in voxel coordinates of the grid the map lives on.
struct DeformationField {
    VectorField forward;
    VectorField inverse;
    std::vector<double> jac_det;

    static DeformationField identity(Dims d, Spacing s);
};

}  // namespace gatlas
