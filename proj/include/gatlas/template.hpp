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

#include "gatlas/atlas.hpp"

namespace gatlas {

/// Responsibilities mapped into template space. N and Wsum are sums over
/// subjects; mass and weights keep the per-subject pieces the weighted
/// objective needs.
struct PushedStats {
    Dims dims{};
    RowMatrix N;     // N_pi x K: sum_i detJ gamma_ik(xi^-1)
    RowMatrix Wsum;  // N_pi x K: sum_i detJ (sum_k gamma_ik) w_ik / sum_c w_ic pi_jc
    std::vector<std::vector<double>> mass;  // per subject, sum_k detJ gamma_ik(xi^-1) per voxel
    std::vector<VectorXd> weights;          // per subject

    static PushedStats zeros(Dims dims, int K);
    int K() const { return int(N.cols()); }
    /// Appends one subject's contribution. Additions happen in call order.
    void add(const PushedStats& other);
};

/// Maps of one subject: the affine part (T, t) in `frame` and the
/// diffeomorphic part phi on the subject grid.
struct SubjectWarp {
    SpatialFrame frame;
    Mat3 T = Mat3::Identity();
    Vec3 t = Vec3::Zero();
    const DeformationField* phi = nullptr;
};

/// For each template voxel y_j, samples gamma at xi^-1(y_j) (trilinear,
/// clamp-to-edge) and weights it by det of the inverse Jacobian. Points that
/// land more than half a voxel outside the subject grid contribute nothing.
/// `atlas` supplies the previous pi used in Wsum.
PushedStats push_responsibilities(const Responsibilities& gamma, const SubjectWarp& warp, const VectorXd& weights,
                                  const TissueAtlas& atlas);

/// sum_k (alpha_k - 1) log pi_jk + log C(alpha) for every voxel.
double dirichlet_log_prior(const RowMatrix& pi, const VectorXd& alpha0);

/// Template objective at one voxel: sum_i sum_k N_ijk log(w_ik pi_k / sum_c w_ic pi_c)
/// + sum_k (alpha_k - 1) log pi_k, dropping the pi-independent w_ik terms
/// and the Dirichlet normaliser. Logs use kPriorFloor.
double template_voxel_objective(const PushedStats& stats, const VectorXd& alpha0, std::size_t j,
                                const Eigen::Ref<const VectorXd>& pi_j);

double template_objective(const PushedStats& stats, const VectorXd& alpha0, const RowMatrix& pi);

struct TemplateUpdate {
    RowMatrix pi;
    double before = 0.0;
    double after = 0.0;
    std::size_t fallback_rows = 0;  // zero denominators or non-finite values
    std::size_t retained_rows = 0;  // weighted rows kept because the objective would drop
};

/// pi_jk = (N_jk + alpha_k - 1) / (sum_k (N_jk + alpha_k) - K). A zero
/// denominator yields a uniform row.
TemplateUpdate update_template_unit_weights(const PushedStats& stats, const VectorXd& alpha0);

/// pi_bar_jk = (N_jk + alpha_k - 1) / Wsum_jk, then rows rescaled to sum to
/// one. A row is accepted only when its objective does not decrease;
/// zero-mass rows keep `previous`.
TemplateUpdate update_template_weighted(const PushedStats& stats, const VectorXd& alpha0, const RowMatrix& previous);

/// Per-class separable Gaussian smoothing (fwhm in mm, clamp-to-edge,
/// kernel truncated at four standard deviations) followed by
/// pi <- eps + (1 - K eps) pi / sum pi with eps = kPriorFloor.
RowMatrix smooth_template(const RowMatrix& pi, const Dims& dims, const Spacing& spacing, double fwhm);

/// Normalised 1-D Gaussian taps for a given fwhm in voxels; a single unit tap
/// when fwhm is zero.
std::vector<double> gaussian_kernel(double fwhm_voxels);

/// Parameters alpha0 + N_j of the Dirichlet posterior at every voxel.
RowMatrix dirichlet_posterior(const PushedStats& stats, const VectorXd& alpha0);

}  // namespace gatlas
