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
#include <vector>

#include "gatlas/mixture.hpp"

namespace gatlas {

/// Orthonormal DCT-II values B_m(i) = sqrt((m == 0 ? 1 : 2) / n) cos(pi m (i + 1/2) / n),
/// returned as an n x order matrix.
MatrixXd dct_basis(int n, int order);

/// Basis size per axis such that the shortest period 2 FOV / m is at least
/// `min_period_mm`.
std::array<int, 3> default_bias_order(const Dims& dims, const Spacing& spacing, double min_period_mm = 60.0);

/// Multiplicative correction b = exp(sum_m c_m B_m) per channel; corrected
/// intensities are b * x. Coefficient m is laid out x fastest.
struct BiasModel {
    std::array<int, 3> order{1, 1, 1};
    std::vector<VectorXd> coeffs;  // per channel
    VectorXd prior_precision;      // diagonal, shared by channels; prior mean is zero

    int size() const { return order[0] * order[1] * order[2]; }
    int channels() const { return int(coeffs.size()); }
    void validate(const Dims& dims) const;
};

/// Zero coefficients with prior precision `strength * lambda_m^2`, lambda_m
/// the Laplacian eigenvalue of basis function m on the field of view. An
/// `order` entry of 0 selects the default for that axis.
BiasModel make_bias_model(const Dims& dims, const Spacing& spacing, int channels, double strength,
                          std::array<int, 3> order = {0, 0, 0});

/// Per-voxel basis evaluation on a grid, cached for repeated use.
class BiasBasis {
public:
    BiasBasis(const Dims& dims, const std::array<int, 3>& order);

    const Dims& dims() const { return dims_; }
    int size() const { return int(axis_[0].cols() * axis_[1].cols() * axis_[2].cols()); }
    /// Log field sum_m c_m B_m(y_j) for every voxel.
    std::vector<double> log_field(const VectorXd& c) const;
    /// Basis vector at voxel n.
    void row(std::size_t n, VectorXd& out) const;

private:
    Dims dims_;
    std::array<MatrixXd, 3> axis_;
};

BiasField evaluate_bias(const BiasModel& model, const Dims& dims);

/// -1/2 sum_d c_d^T P c_d.
double bias_prior_term(const BiasModel& model);

struct ModulatedGaussian {
    VectorXd mean;
    MatrixXd covariance;
};

/// Mean and covariance of the uncorrected intensities under correction b.
ModulatedGaussian modulated_gaussian(const VectorXd& mean, const MatrixXd& covariance, const VectorXd& b);

/// Bias-dependent part of the bound at fixed responsibilities: expected data
/// log likelihood (with volume terms) plus the coefficient prior.
double bias_objective(const VolumeGrid& data, const BiasModel& model, const Responsibilities& gamma,
                      const GaussWishartBundle& bundle);

struct BiasDerivatives {
    VectorXd gradient;  // of bias_objective with respect to one channel's coefficients
    MatrixXd hessian;   // positive semi-definite approximation of minus the second derivative
};

BiasDerivatives bias_derivatives(const VolumeGrid& data, const BiasModel& model, const Responsibilities& gamma,
                                 const GaussWishartBundle& bundle, int channel);

struct BiasUpdate {
    BiasModel model;
    double before = 0.0;
    double after = 0.0;
    bool accepted = false;
    int halvings = 0;
};

/// One damped Gauss-Newton step per channel; steps are halved up to eight
/// times until the objective does not decrease, else that channel is kept.
BiasUpdate gauss_newton_bias_update(const VolumeGrid& data, const Responsibilities& gamma,
                                    const GaussWishartBundle& bundle, const BiasModel& model,
                                    double levenberg = 1e-6);

}  // namespace gatlas
