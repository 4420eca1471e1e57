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
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gatlas/diffeo.hpp"

namespace gatlas {

/// Every tunable of a fit. Text form is `key = value` per line with `#`
/// comments; keys match the member names.
struct ModelConfig {
    int classes = 3;
    LabelMap label_map;  // empty: label l covers class l - 1
    OperatorSpec op;
    std::array<int, 3> bias_order{0, 0, 0};  // 0 selects the 60 mm rule per axis
    double bias_strength = 1e5;
    double alpha0 = 1.01;
    double affine_rotation = 1e-4;
    double affine_zoom = 1e-2;
    double affine_shear = 1e-4;
    double zeta = 1.0;  // rater sensitivity for labeled subjects without their own
    int max_iterations = 30;
    double tolerance = 1e-6;
    std::uint64_t seed = 1;
    int threads = 1;
    int shoot_steps = 8;
    int gn_iterations = 1;  // Gauss-Newton steps per family per sweep
    double template_fwhm = 0.0;
    double velocity_levenberg = 1e-2;
    int segment_iterations = 30;
    bool update_bias = true;
    bool update_affine = true;
    bool update_velocity = true;
    bool update_weights = true;
    bool update_template = true;
    bool update_hyperpriors = true;
    bool centroid_init = true;
    bool record_time = false;  // ledger `ms` column; zero keeps ledgers byte-stable

    LabelMap labels() const;
    void set(const std::string& key, const std::string& value);
    void validate() const;
    std::string to_text() const;

    static ModelConfig parse(const std::string& text);
    static ModelConfig load(const std::filesystem::path& path);
};

/// One manifest line: `path[,labels_path[,zeta]]`. A path may list one file
/// per channel separated by `;`, with `-` for a channel the subject lacks.
struct ManifestEntry {
    std::vector<std::string> channels;
    std::string labels;  // empty when unlabeled
    std::optional<double> zeta;
};

std::vector<ManifestEntry> parse_manifest(const std::string& text);

}  // namespace gatlas
