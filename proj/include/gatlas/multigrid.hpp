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

#include "gatlas/diffeo.hpp"

namespace gatlas {

struct MultigridOptions {
    int max_passes = 12;
    double tolerance = 1e-8;  // on the residual norm relative to the right-hand side
    int pre_smooth = 2;
    int post_smooth = 2;
    std::size_t coarsest_voxels = 64;
};

struct MultigridResult {
    VectorField x;
    std::vector<double> residual_norms;  // initial, then after every pass
    int passes = 0;
    int slow_passes = 0;     // passes that reduced the residual by less than 10x
    bool stagnated = false;  // no improvement over three passes; x is the best iterate
};

/// Solves (blocks + LtL + levenberg I) x = rhs. The first pass is a full
/// multigrid sweep; further passes are conjugate-gradient steps
/// preconditioned by one V-cycle. Red-black block Gauss-Seidel smoothing,
/// full-weighting restriction, trilinear prolongation, Galerkin coarse
/// operators, dense solve on the coarsest grid.
MultigridResult multigrid_solve(const HessianContext& h, const VectorField& rhs, const MultigridOptions& opts = {});

}  // namespace gatlas
