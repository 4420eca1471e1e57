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

#include <vector>

#include "gatlas/mixture.hpp"

namespace gatlas {

/// K-class tissue probability maps on the template grid plus the Dirichlet
/// concentration of their prior.
struct TissueAtlas {
    Dims dims{};
    Spacing spacing{1.0, 1.0, 1.0};
    RowMatrix pi;    // N_pi x K, rows on the simplex
    VectorXd alpha0;  // K entries >= 1

    int K() const { return int(pi.cols()); }
    std::size_t voxels() const { return dims.count(); }
    static TissueAtlas uniform(Dims dims, Spacing spacing, int K, double alpha0 = 1.01);
    void validate() const;
};

/// Relation between a subject grid and the template grid. The composite map
/// is xi(y) = Dt^-1 (T Ds (phi(y) - cs) + t) + ct, with Ds, Dt the spacing
/// matrices and cs, ct the grid centres in voxel units; t is in mm.
struct SpatialFrame {
    Dims subject_dims{};
    Spacing subject_spacing{1.0, 1.0, 1.0};
    Dims template_dims{};
    Spacing template_spacing{1.0, 1.0, 1.0};

    Vec3 subject_center() const;
    Vec3 template_center() const;
    Mat3 subject_scale() const;
    Mat3 template_scale() const;

    /// Subject voxel position (phi(y)) to template voxel coordinates.
    Vec3 to_template(const Mat3& T, const Vec3& t, const Vec3& y) const;
    /// Template voxel coordinates back to subject voxel coordinates.
    Vec3 to_subject(const Mat3& T, const Vec3& t, const Vec3& x) const;
    /// Dt^-1 T Ds.
    Mat3 linear_part(const Mat3& T) const;
};

/// Floored template values and the gradients of their logarithm (template
/// voxel units) at a list of points.
struct AtlasSample {
    RowMatrix pi;                // N x K, floored at kPriorFloor
    std::vector<Vec3> grad_log;  // N * K, empty if not requested
};

AtlasSample sample_atlas(const TissueAtlas& atlas, const std::vector<Vec3>& points, bool with_gradient);

/// Matching term sum_jk gamma_jk log s_jk of the warped prior s, and its
/// derivatives with respect to the template-space position of every voxel.
struct MatchingTerms {
    double value = 0.0;
    RowMatrix prior;         // s, N x K
    std::vector<Vec3> grad;  // sum_k (gamma_k - s_k) grad log pi_k
    std::vector<Mat3> hess;  // Fisher form sum_k s_k g_k g_k^T - (sum s g)(sum s g)^T
};

MatchingTerms matching_terms(const Responsibilities& gamma, const AtlasSample& sample, const VectorXd& weights,
                             bool with_derivatives);

double matching_value(const Responsibilities& gamma, const RowMatrix& prior);

}  // namespace gatlas
