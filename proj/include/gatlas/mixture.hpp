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

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "gatlas/volume.hpp"

namespace gatlas {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Floor applied to template probabilities before any logarithm.
inline constexpr double kPriorFloor = 1e-6;

/// Conjugate posterior (or prior) over one class mean and precision:
/// mu | Lambda ~ N(m, (beta Lambda)^-1), Lambda ~ Wishart(W, nu).
struct GaussWishart {
    VectorXd m;
    double beta = 1.0;
    MatrixXd W;
    double nu = 1.0;

    int dim() const { return int(m.size()); }
    MatrixXd expected_precision() const { return nu * W; }
    /// E[log |Lambda|].
    double expected_logdet() const;
    void validate() const;
};

struct GaussWishartBundle {
    std::vector<GaussWishart> classes;

    int K() const { return int(classes.size()); }
    int dim() const { return classes.empty() ? 0 : classes.front().dim(); }
    void validate() const;
};

double kl_divergence(const GaussWishart& q, const GaussWishart& p);

/// Manual labels of one subject. Label 0 means unlabeled; label l >= 1 may
/// stand for several mixture classes (see LabelMap).
struct LabelData {
    std::vector<int> labels;
    double zeta = 1.0;
};

/// label_classes[l - 1] lists the mixture classes covered by manual label l.
struct LabelMap {
    std::vector<std::vector<int>> label_classes;

    static LabelMap identity(int K);
    /// log p(l | z = k) under the rater-sensitivity model.
    double log_likelihood(int label, int k, int K, double zeta) const;
    void validate(int K) const;
};

using Responsibilities = RowMatrix;  // N x K

/// w_k pi_k / sum_c w_c pi_c for each row of template values already sampled
/// at the warped voxel positions (N x K). Template values are floored first.
RowMatrix warped_prior(const RowMatrix& pi_at_voxels, const VectorXd& weights);

/// Per-class, per-missing-pattern quantities of the expected Gaussian log
/// likelihood with unobserved channels integrated against their variational
/// posterior. Pattern bit d is set when channel d is observed.
class ExpectedLikelihood {
public:
    explicit ExpectedLikelihood(const GaussWishartBundle& bundle);

    struct Terms {
        std::vector<int> obs;
        std::vector<int> hid;
        VectorXd mean_obs;
        MatrixXd precision_obs;  // nu * Schur complement of W on the observed block
        double constant = 0.0;
        VectorXd mean_hid;
        MatrixXd coupling;     // (W^hh)^-1 W^ho
        MatrixXd precision_hid;  // E[Lambda^hh] = nu W^hh
    };

    const Terms& terms(unsigned pattern, int k) const;
    int K() const { return K_; }
    int dim() const { return D_; }

    /// Expected log likelihood of the (bias-corrected) observed sub-vector.
    double log_likelihood(unsigned pattern, int k, const VectorXd& x_obs) const;

private:
    int K_;
    int D_;
    std::vector<Terms> table_;  // [pattern * K + k]
};

/// Bound contributions from the mixture part of one subject.
struct MixtureTerms {
    double data = 0.0;      // expected log likelihood incl. bias volume terms
    double prior_z = 0.0;   // E[log p(z | warped template)]
    double labels = 0.0;    // E[log p(l | z)]
    double entropy = 0.0;   // -E[log q(z)] (and the hidden-channel part is inside `data`)

    double sum() const { return data + prior_z + labels + entropy; }
};

struct EStepResult {
    Responsibilities gamma;
    MixtureTerms terms;
    std::size_t degenerate = 0;
};

/// Bias field: positive, channel-major like VolumeGrid (`b[c * N + j]`).
using BiasField = std::vector<double>;

BiasField unit_bias(const VolumeGrid& data);

/// Log of the per-class data factor at every voxel (N x K), including the
/// label factor and the bias volume term. Fully unobserved voxels get zero.
RowMatrix log_data_factor(const VolumeGrid& data, const BiasField& bias, const GaussWishartBundle& bundle,
                          const LabelData* labels = nullptr, const LabelMap* label_map = nullptr);

EStepResult e_step(const VolumeGrid& data, const BiasField& bias, const RowMatrix& prior_field,
                   const GaussWishartBundle& bundle, const LabelData* labels = nullptr,
                   const LabelMap* label_map = nullptr);

/// Mixture bound terms for a fixed responsibility matrix.
MixtureTerms mixture_terms(const VolumeGrid& data, const BiasField& bias, const RowMatrix& prior_field,
                           const GaussWishartBundle& bundle, const Responsibilities& gamma,
                           const LabelData* labels = nullptr, const LabelMap* label_map = nullptr);

/// Posterior over the unobserved channels of one voxel.
struct MissingPosterior {
    std::vector<VectorXd> mean;       // n_jk per class
    std::vector<MatrixXd> precision;  // P_k per class
};

MissingPosterior infer_missing(const VectorXd& observed, unsigned pattern, const GaussWishartBundle& bundle);

struct SufficientStats {
    std::vector<double> s0;
    std::vector<VectorXd> s1;
    std::vector<MatrixXd> S2;

    static SufficientStats zeros(int K, int D);
};

/// Observed channels contribute their bias-corrected values, hidden channels
/// their posterior means plus the posterior covariance in S2. Voxels with no
/// observed channel carry no intensity evidence and are skipped.
SufficientStats sufficient_stats(const VolumeGrid& data, const BiasField& bias, const Responsibilities& gamma,
                                 const GaussWishartBundle& posterior);

GaussWishartBundle m_step(const SufficientStats& stats, const GaussWishartBundle& prior);

/// -KL(q || p) summed over classes.
double gauss_wishart_bound(const GaussWishartBundle& posterior, const GaussWishartBundle& prior);

struct WeightUpdate {
    VectorXd weights;
    double before = 0.0;
    double after = 0.0;
    int iterations = 0;
};

/// Objective sum_jk gamma_jk log(w_k pi_jk / sum_c w_c pi_jc).
double tissue_weight_objective(const Responsibilities& gamma, const RowMatrix& pi_at_voxels, const VectorXd& w);

WeightUpdate update_tissue_weights(const Responsibilities& gamma, const RowMatrix& pi_at_voxels,
                                   const VectorXd& initial, int max_iterations = 500);

/// Moment-matched intensity hyperpriors from a set of subject posteriors.
GaussWishartBundle fit_intensity_hyperpriors(const std::vector<GaussWishartBundle>& subjects);

/// Positive-definiteness guard: adds 1e-8 trace/D to the diagonal, at most
/// three times. Returns the number of jitters applied; throws when exhausted.
int make_positive_definite(MatrixXd& W);

}  // namespace gatlas
