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

#include "gatlas/volume.hpp"

namespace gatlas::io {

// MVOL layout (little-endian):
//   char[4] "MVOL" | u32 version (=1) | u32 dims[3] | u32 channels |
//   f32 spacing[3] | f32 values[channels][N], x fastest, NaN = missing.

VolumeGrid read_mvol(const std::filesystem::path& path);
void write_mvol(const std::filesystem::path& path, const VolumeGrid& vol);

/// Three-channel export of a vector field (x, y, z components).
void write_mvol(const std::filesystem::path& path, const VectorField& field);

/// Single-file NIfTI-1. Datatypes int16, int32, float32 and float64 are
/// accepted; scl_slope/scl_inter are applied when slope is non-zero.
VolumeGrid read_nifti(const std::filesystem::path& path);

/// Float32 single-file NIfTI-1; channels go to the fourth dimension.
void write_nifti(const std::filesystem::path& path, const VolumeGrid& vol);

/// Dispatches on extension: `.nii` reads NIfTI, everything else MVOL.
VolumeGrid read_volume(const std::filesystem::path& path);

bool is_nifti_path(const std::filesystem::path& path);

}  // namespace gatlas::io
