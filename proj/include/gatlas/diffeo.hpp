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

#include <complex>
#include <string>
#include <vector>

#include "gatlas/atlas.hpp"

namespace gatlas {

/// Coefficients of the regularising operator. Velocities are stored in
/// voxel units; the operator acts on the mm displacement rho = diag(h) u
/// with periodic forward differences D_a and the voxel volume as measure:
///
///   penalty = 1/2 vol sum [ l0 |rho|^2 + lm sum_a |D_a rho|^2 + lb |Lap rho|^2
///                           + mu sum_ab |E_ab|^2 + ll |div rho|^2 ],
///
/// with E_ab = (D_a rho_b + D_b rho_a) / 2.
struct OperatorSpec {
    double lambda_zero = 1e-3;
    double membrane = 0.1;
    double bending = 0.5;
    double le_mu = 0.25;
    double le_lambda = 0.125;

    void validate() const;
};

/// Low-level application with explicit level spacing, rho scale and volume
/// (multigrid levels reuse the fine-grid scale and volume).
void apply_operator(const Dims& dims, const Spacing& level_spacing, const Vec3& rho_scale, double volume,
                    const OperatorSpec& op, const std::vector<Vec3>& in, std::vector<Vec3>& out);

double penalty_energy(const VectorField& u, const OperatorSpec& op);

/// Gradient of penalty_energy: u^T apply_LtL(u) = 2 penalty_energy(u).
VectorField apply_LtL(const VectorField& u, const OperatorSpec& op);

/// Fourier symbol of the operator in rho space at frequency theta (radians
/// per voxel), including the volume factor.
Eigen::Matrix3cd operator_symbol(const Vec3& theta, const Spacing& spacing, const OperatorSpec& op);

/// Exact inverse of apply_LtL on the periodic grid (FFT, one 3x3 solve per
/// frequency). The zero frequency is dropped when lambda_zero is 0.
VectorField apply_inverse_LtL(const VectorField& m, const OperatorSpec& op);

/// Evaluates a position map whose displacement is periodic on its grid, the
/// convention used by geodesic_shoot.
Vec3 sample_periodic_map(const VectorField& map, const Vec3& p);

/// Integrates the geodesic equation from initial velocity u over unit time.
/// steps == 1 gives the small-deformation map id + u; otherwise Heun steps
/// with the momentum pushed forward along the flow. The inverse is refined
/// by Newton iteration against the forward map. Throws FoldoverError when a
/// Jacobian determinant is not positive.
DeformationField geodesic_shoot(const VectorField& u, const OperatorSpec& op, int steps = 8);

/// Matching context of one subject for the velocity objective.
struct VelocityContext {
    const Responsibilities* gamma = nullptr;
    const TissueAtlas* atlas = nullptr;
    VectorXd weights;
    SpatialFrame frame;
    Mat3 T = Mat3::Identity();
    Vec3 t = Vec3::Zero();
    OperatorSpec op;
    int steps = 8;
};

/// Matching term minus the penalty, for the deformation `phi` produced from u.
double velocity_objective(const VelocityContext& ctx, const VectorField& u, const DeformationField& phi);
double velocity_objective(const VelocityContext& ctx, const VectorField& u);

/// Cached Gauss-Newton quantities: per-voxel 3x3 blocks of the matching
/// Hessian plus the operator and damping.
struct HessianContext {
    Dims dims{};
    Spacing spacing{1.0, 1.0, 1.0};
    OperatorSpec op;
    std::vector<Mat3> blocks;
    double levenberg = 0.0;
};

struct VelocityDerivatives {
    double value = 0.0;
    VectorField gradient;  // of the objective with respect to u
    HessianContext hessian;
};

VelocityDerivatives velocity_grad(const VelocityContext& ctx, const VectorField& u, const DeformationField& phi);

/// (blocks + LtL) d; symmetric positive semi-definite.
VectorField velocity_hessian_apply(const VectorField& d, const HessianContext& h);

/// (blocks + LtL + levenberg I) d.
VectorField velocity_system_apply(const VectorField& d, const HessianContext& h);

struct VelocityUpdate {
    VectorField u;
    DeformationField phi;
    double before = 0.0;
    double after = 0.0;
    bool accepted = false;
    int halvings = 0;
    double levenberg = 1e-2;
    double step_norm = 0.0;
    bool solver_warning = false;
};

/// One damped Gauss-Newton step solved by multigrid; the step is halved up to
/// eight times on foldover or objective decrease.
VelocityUpdate gauss_newton_velocity_update(const VelocityContext& ctx, const VectorField& u,
                                            const DeformationField& phi, double levenberg = 1e-2);

}  // namespace gatlas
