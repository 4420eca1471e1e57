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
#include <string>

#include "gatlas/atlas.hpp"

namespace gatlas {

using Vector9d = Eigen::Matrix<double, 9, 1>;
using Matrix9d = Eigen::Matrix<double, 9, 9>;
using Vector12d = Eigen::Matrix<double, 12, 1>;
using Matrix12d = Eigen::Matrix<double, 12, 12>;

/// Generator p of the linear Lie algebra: 0-2 rotations about x, y, z
/// (antisymmetric), 3-5 zooms along x, y, z, 6-8 shears xy, xz, yz
/// (symmetric off-diagonal).
Mat3 affine_generator(int p);

Mat3 affine_algebra(const Vector9d& a);

/// T = exp(Q(a)).
Mat3 exp_map(const Vector9d& a);

/// dT / da_p for every generator, from the augmented block exponential
/// exp([[Q, G_p], [0, Q]]) whose upper-right block is the exact directional
/// derivative.
std::array<Mat3, 9> exp_map_derivatives(const Vector9d& a);

struct AffineParams {
    Vector9d a = Vector9d::Zero();
    Vec3 t = Vec3::Zero();
    Matrix9d prior_precision = Matrix9d::Zero();

    Mat3 matrix() const { return exp_map(a); }
    void validate() const;
    static Matrix9d default_precision(double rotation = 1e-4, double zoom = 1e-2, double shear = 1e-4);
};

/// -1/2 a^T P a (translation is unpenalized).
double affine_penalty(const AffineParams& p);

/// Everything the affine objective reads besides the parameters.
struct AffineContext {
    const Responsibilities* gamma = nullptr;
    const TissueAtlas* atlas = nullptr;
    VectorXd weights;
    const VectorField* phi = nullptr;  // subject voxel positions of the diffeomorphic part
    SpatialFrame frame;
};

std::vector<Vec3> template_points(const SpatialFrame& frame, const Mat3& T, const Vec3& t, const VectorField& phi);

/// Matching term plus affine penalty.
double affine_objective(const AffineContext& ctx, const AffineParams& p);

struct AffineDerivatives {
    double value = 0.0;
    Vector12d gradient;  // a (9) then t (3)
    Matrix12d hessian;   // positive semi-definite approximation of minus the second derivative
};

AffineDerivatives affine_grad_hess(const AffineContext& ctx, const AffineParams& p);

struct AffineUpdate {
    AffineParams params;
    double before = 0.0;
    double after = 0.0;
    bool accepted = false;
    int attempts = 0;
    double step_norm = 0.0;
};

/// One Gauss-Newton step with Levenberg backtracking (x10, up to eight times).
AffineUpdate gauss_newton_affine_update(const AffineContext& ctx, const AffineParams& p);

/// Translation aligning the intensity centroid of the subject with the
/// template centroid weighted by sum_k pi_k brightness_k.
Vec3 centroid_translation(const VolumeGrid& subject, const TissueAtlas& atlas, const VectorXd& brightness,
                          const SpatialFrame& frame);

/// World (mm, voxel 0 at the origin) 4x4 matrix from subject to template,
/// row-major text.
std::string format_affine(const SpatialFrame& frame, const AffineParams& p);

}  // namespace gatlas
