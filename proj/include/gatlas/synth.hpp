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

#include <cstdint>
#include <string>
#include <vector>

#include "gatlas/pipeline.hpp"

namespace gatlas {

/// Desk-scale phantom: nested tissue shells with smoothly perturbed
/// boundaries, warped per subject, rendered with class means, a smooth
/// multiplicative bias and Gaussian noise.
struct SynthConfig {
    Dims dims{16, 16, 16};
    Spacing spacing{2.0, 2.0, 2.0};
    int classes = 3;
    int subjects = 3;
    double bias_range = 0.1;     // true field spans [1 - r, 1 + r]
    double noise_percent = 3.0;  // standard deviation relative to the brightest class mean
    double warp_amplitude = 1.0;  // max initial velocity, voxels
    double rotation_sd = 0.02;    // radians
    double zoom_sd = 0.02;        // log scale
    double translation_sd = 1.0;  // mm
    double boundary_width = 0.5;  // soft edge of the true template, voxels
    std::vector<double> class_means;  // empty: 50 + 100 k

    /// `bias20` (r = 0.1) or `bias40` (r = 0.2).
    static SynthConfig preset(const std::string& name);
    double mean(int k) const;
};

struct SynthSubject {
    VolumeGrid image;
    std::vector<int> truth;  // class per voxel
    std::vector<double> bias;  // true multiplicative field
    AffineParams affine;
    VectorField velocity;
    DeformationField phi;
};

struct SynthDataset {
    SynthConfig config;
    TissueAtlas atlas;  // ground-truth template, on the subject grid
    std::vector<SynthSubject> subjects;

    /// Fitting input; the first `labeled` subjects carry their truth as manual
    /// labels (label = class + 1) with sensitivity `zeta`.
    Dataset dataset(int labeled = 0, double zeta = 1.0) const;
};

TissueAtlas synth_atlas(const SynthConfig& config, std::uint64_t seed);

/// Renders one subject from `atlas`. Identical inputs give identical bytes.
SynthSubject synth_subject(const SynthConfig& config, const TissueAtlas& atlas, std::uint64_t seed, int index);

SynthDataset synthesize_dataset(const SynthConfig& config, std::uint64_t seed);

}  // namespace gatlas
