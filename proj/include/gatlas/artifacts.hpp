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

#include <filesystem>
#include <string>
#include <vector>

#include "gatlas/synth.hpp"

namespace gatlas {

/// Subjects named by file stem. `input` is a directory of `.mvol` / `.nii`
/// volumes (sorted by name) or a manifest file. With `labels_dir`, a volume
/// of the same file name there becomes that subject's manual labels.
Dataset load_dataset(const std::filesystem::path& input, const std::filesystem::path& labels_dir = {},
                     double zeta = 1.0);

/// Integer label volume; 0 = unlabeled.
LabelData read_labels(const std::filesystem::path& path, std::size_t voxels, double zeta);

struct WriteOptions {
    bool bias = false;
    bool warp = false;
    bool velocity = false;
};

/// Layout of `dir`:
///   atlas.mvol       K channels, the template pi
///   atlas.json       class count, alpha0, hyperpriors, configuration
///   ledger.csv       bound ledger
///   summary.json     sweep bounds, convergence, per-subject weights and affine
///   subjects/<name>_responsibilities.mvol, subjects/<name>_labels.mvol
///   optional <name>_bias.mvol (nonuniformity 1 / b per channel), <name>_warp.mvol (template
///   voxel coordinates per voxel), <name>_velocity.mvol (u in mm)
void write_fit(const std::filesystem::path& dir, const FitResult& fit, const Dataset& data, const ModelConfig& config,
               const WriteOptions& options = {});

void write_ledger(const std::filesystem::path& path, const BoundLedger& ledger);

struct TrainedAtlas {
    TissueAtlas atlas;
    GaussWishartBundle hyperpriors;
    ModelConfig config;
};

TrainedAtlas read_trained_atlas(const std::filesystem::path& dir);

/// responsibilities, labels, bias, warp and ledger of one segmented volume.
void write_segmentation(const std::filesystem::path& dir, const std::string& name, const Subject& subject,
                        const Segmentation& seg, const TissueAtlas& atlas);

/// subjects/, labels/ (class + 1), truth/ (bias, class map, atlas) and a
/// manifest listing the subjects.
void write_synth(const std::filesystem::path& dir, const SynthDataset& ds, std::uint64_t seed);

}  // namespace gatlas
