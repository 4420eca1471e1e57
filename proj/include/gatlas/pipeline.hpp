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
#include <stdexcept>
#include <string>
#include <vector>

#include "gatlas/affine.hpp"
#include "gatlas/bias.hpp"
#include "gatlas/config.hpp"
#include "gatlas/template.hpp"

namespace gatlas {

struct Subject {
    std::string name;
    VolumeGrid data;
    std::optional<LabelData> labels;
};

using Dataset = std::vector<Subject>;

/// Everything estimated for one subject. `phi` is always the shot map of `u`.
struct SubjectState {
    SpatialFrame frame;
    VectorXd weights;
    BiasModel bias;
    AffineParams affine;
    VectorField u;
    DeformationField phi;
    GaussWishartBundle posterior;
    Responsibilities gamma;
    double velocity_levenberg = 1e-2;
};

/// Per-subject terms of the lower bound.
struct BoundTerms {
    double data = 0.0;           // expected log likelihood with bias volume terms
    double prior_z = 0.0;        // E[log p(z | warped template)]
    double labels = 0.0;         // E[log p(l | z)]
    double entropy = 0.0;        // -E[log q(z)]
    double gauss_wishart = 0.0;  // -KL(q(mu, Lambda) || hyperprior)
    double bias_prior = 0.0;
    double affine_prior = 0.0;
    double velocity_prior = 0.0;  // minus the operator penalty

    double sum() const
    {
        return data + prior_z + labels + entropy + gauss_wishart + bias_prior + affine_prior + velocity_prior;
    }
};

struct LowerBound {
    std::vector<BoundTerms> subjects;
    double dirichlet = 0.0;  // log p(pi), normaliser included
    double total = 0.0;
};

/// Template-space positions of every subject voxel and the warped prior there.
RowMatrix subject_prior_field(const SubjectState& s, const TissueAtlas& atlas);

BoundTerms subject_bound(const Subject& subject, const SubjectState& s, const TissueAtlas& atlas,
                         const GaussWishartBundle& hyper, const ModelConfig& config);

/// Throws InvalidInput naming the term and subject when a term is not finite.
LowerBound compute_lower_bound(const Dataset& data, const std::vector<SubjectState>& states, const TissueAtlas& atlas,
                               const GaussWishartBundle& hyper, const ModelConfig& config);

struct LedgerRow {
    int iteration = 0;
    std::string family;  // mixture, weights, bias, affine, velocity, template, hyperprior
    int subject = -1;    // -1 for group-level updates
    double before = 0.0;
    double after = 0.0;
    bool accepted = true;
    std::string flags;
    double ms = 0.0;
};

struct BoundLedger {
    std::vector<LedgerRow> rows;

    std::string to_csv() const;
    /// Accepted rows satisfy after >= before - rel |before|.
    bool monotone(double rel = 1e-8) const;
};

/// Template grid: median spacing per axis, extent covering the largest field
/// of view (grids are centred on each other).
std::pair<Dims, Spacing> default_template_grid(const Dataset& data);

/// Unit weights, zero bias, identity warps and the centroid translation when
/// enabled. The posterior starts at `hyper` when given, else from per-channel
/// intensity quantiles (classes ordered by brightness).
SubjectState initial_state(const Subject& subject, const TissueAtlas& atlas, const ModelConfig& config,
                           const GaussWishartBundle* hyper = nullptr);

/// Weak intensity hyperprior centred on the pooled initial posteriors.
GaussWishartBundle initial_hyperpriors(const std::vector<SubjectState>& states);

struct FitResult {
    TissueAtlas atlas;
    GaussWishartBundle hyperpriors;
    std::vector<SubjectState> states;
    BoundLedger ledger;
    std::vector<double> sweep_bounds;  // bound before the first sweep, then after each
    int sweeps = 0;
    bool converged = false;
};

/// Optional starting point; anything left empty is initialised internally.
struct FitInit {
    std::optional<TissueAtlas> atlas;
    std::optional<GaussWishartBundle> hyperpriors;
    std::vector<SubjectState> states;
};

/// Raised when a module fails mid-fit; carries the ledger up to that point.
class FitAborted : public std::runtime_error {
public:
    FitAborted(const std::string& what, BoundLedger partial) : std::runtime_error(what), ledger(std::move(partial)) {}
    BoundLedger ledger;
};

FitResult fit_groupwise(const Dataset& data, const ModelConfig& config, const FitInit& init = {});

struct Segmentation {
    SubjectState state;
    BoundLedger ledger;
    std::vector<double> bounds;
};

/// Per-subject inner loop against a frozen atlas and hyperpriors, repeated
/// until the subject bound gains less than config.tolerance (relative) or
/// config.segment_iterations is reached.
Segmentation segment_unseen(const Subject& subject, const TissueAtlas& atlas, const GaussWishartBundle& hyper,
                            const ModelConfig& config, const SubjectState* init = nullptr);

std::vector<int> argmax_labels(const RowMatrix& probabilities);

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice_score(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

/// Per-class Dice of two label maps with values in [0, K). With
/// `best_permutation` the classes of `b` are relabelled to maximise the mean.
std::vector<double> class_dice(const std::vector<int>& a, const std::vector<int>& b, int K, bool best_permutation);

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b,
                           const std::vector<std::uint8_t>& mask = {});

}  // namespace gatlas
