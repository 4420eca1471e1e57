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
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "gatlas/artifacts.hpp"
#include "gatlas/io.hpp"

namespace fs = std::filesystem;
using namespace gatlas;

namespace {

Dims parse_dims(const std::string& s)
{
    int x = 0, y = 0, z = 0;
    char c1 = 0, c2 = 0;
    std::istringstream in(s);
    if (!(in >> x >> c1 >> y >> c2 >> z) || c1 != ',' || c2 != ',' || x < 2 || y < 2 || z < 2)
        throw InvalidInput("--dims expects X,Y,Z with every entry >= 2");
    return {x, y, z};
}

std::vector<double> channel(const VolumeGrid& v, const std::string& what)
{
    if (v.channels() != 1) throw InvalidInput(what + ": expected a single-channel volume");
    std::vector<double> out(v.voxels());
    for (std::size_t j = 0; j < v.voxels(); ++j) out[j] = v.missing(j, 0) ? 0.0 : v.at(j, 0);
    return out;
}

int run_dice(const VolumeGrid& a, const VolumeGrid& b, const VolumeGrid* mask)
{
    const auto x = channel(a, "--a"), y = channel(b, "--b");
    if (a.dims() != b.dims()) throw InvalidInput("eval: --a and --b differ in dimensions");
    std::vector<double> m = mask ? channel(*mask, "--mask") : std::vector<double>(x.size(), 1.0);
    if (m.size() != x.size()) throw InvalidInput("eval: --mask differs in dimensions");
    std::set<long> labels;
    for (std::size_t j = 0; j < x.size(); ++j)
        if (m[j] != 0.0) {
            if (x[j] != 0.0) labels.insert(std::lround(x[j]));
            if (y[j] != 0.0) labels.insert(std::lround(y[j]));
        }
    if (labels.empty()) labels.insert(1);
    double mean = 0.0;
    for (long l : labels) {
        std::vector<std::uint8_t> p(x.size()), q(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
            p[j] = m[j] != 0.0 && std::lround(x[j]) == l;
            q[j] = m[j] != 0.0 && std::lround(y[j]) == l;
        }
        const double d = dice_score(p, q);
        mean += d / double(labels.size());
        std::printf("label %ld dice %.6f\n", l, d);
    }
    if (labels.size() > 1) std::printf("mean dice %.6f\n", mean);
    return 0;
}

int run_pearson(const VolumeGrid& a, const VolumeGrid& b, const VolumeGrid* mask)
{
    const auto x = channel(a, "--a"), y = channel(b, "--b");
    if (a.dims() != b.dims()) throw InvalidInput("eval: --a and --b differ in dimensions");
    std::vector<std::uint8_t> m;
    if (mask) {
        const auto w = channel(*mask, "--mask");
        if (w.size() != x.size()) throw InvalidInput("eval: --mask differs in dimensions");
        m.resize(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) m[j] = w[j] != 0.0;
    }
    std::printf("pearson %.6f\n", pearson_correlation(x, y, m));
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"gatlas: groupwise generative tissue atlas construction"};
    app.require_subcommand(1);

    // fit
    auto* fit = app.add_subcommand("fit", "build an atlas from a set of volumes");
    std::string fit_input, fit_out, fit_labels, fit_config;
    int fit_classes = 0, fit_threads = 0, fit_iterations = 0;
    double fit_zeta = 0.0;
    std::uint64_t fit_seed = 0;
    std::vector<std::string> fit_set;
    WriteOptions fit_write;
    fit->add_option("--input", fit_input, "directory of volumes or a manifest file")->required();
    fit->add_option("--classes", fit_classes, "number of tissue classes K")->check(CLI::Range(2, 64));
    fit->add_option("--out", fit_out, "output directory")->required();
    fit->add_option("--labels", fit_labels, "directory of manual label volumes (matched by file name)");
    fit->add_option("--zeta", fit_zeta, "rater sensitivity for labeled subjects");
    fit->add_option("--config", fit_config, "key = value configuration file");
    fit->add_option("--seed", fit_seed, "seed recorded with the fit");
    fit->add_option("--threads", fit_threads, "worker threads over subjects")->check(CLI::PositiveNumber);
    fit->add_option("--max-iterations", fit_iterations, "outer sweeps")->check(CLI::PositiveNumber);
    fit->add_option("--set", fit_set, "extra configuration entry key=value (repeatable)");
    fit->add_flag("--write-bias", fit_write.bias, "write estimated bias fields");
    fit->add_flag("--write-warp", fit_write.warp, "write subject-to-template maps");
    fit->add_flag("--write-velocity", fit_write.velocity, "write initial velocities");

    // segment
    auto* seg = app.add_subcommand("segment", "segment an unseen volume with a trained atlas");
    std::string seg_atlas, seg_input, seg_out;
    seg->add_option("--atlas", seg_atlas, "directory written by fit")->required();
    seg->add_option("--input", seg_input, "volume (.mvol or .nii)")->required();
    seg->add_option("--out", seg_out, "output directory")->required();

    // synth
    auto* syn = app.add_subcommand("synth", "generate a synthetic dataset with ground truth");
    std::string syn_preset = "bias20", syn_out, syn_dims = "16,16,16";
    double syn_noise = 3.0;
    int syn_subjects = 3, syn_classes = 3;
    std::uint64_t syn_seed = 1;
    syn->add_option("--preset", syn_preset, "bias20 or bias40")->check(CLI::IsMember({"bias20", "bias40"}));
    syn->add_option("--noise", syn_noise, "noise standard deviation, percent of the brightest class")
        ->check(CLI::Range(0.0, 100.0));
    syn->add_option("--subjects", syn_subjects, "subject count")->check(CLI::PositiveNumber);
    syn->add_option("--classes", syn_classes, "tissue classes")->check(CLI::Range(2, 16));
    syn->add_option("--dims", syn_dims, "grid size X,Y,Z");
    syn->add_option("--out", syn_out, "output directory")->required();
    syn->add_option("--seed", syn_seed, "random seed");

    // eval
    auto* ev = app.add_subcommand("eval", "compare two volumes");
    std::string ev_metric, ev_a, ev_b, ev_mask;
    ev->add_option("metric", ev_metric, "dice or pearson")->required()->check(CLI::IsMember({"dice", "pearson"}));
    ev->add_option("--a", ev_a, "first volume")->required();
    ev->add_option("--b", ev_b, "second volume")->required();
    ev->add_option("--mask", ev_mask, "voxels where the mask is non-zero");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*fit) {
            ModelConfig config = fit_config.empty() ? ModelConfig{} : ModelConfig::load(fit_config);
            if (fit_classes) config.classes = fit_classes;
            if (fit->count("--zeta")) config.zeta = fit_zeta;
            if (fit->count("--seed")) config.seed = fit_seed;
            if (fit_threads) config.threads = fit_threads;
            if (fit_iterations) config.max_iterations = fit_iterations;
            for (const std::string& kv : fit_set) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw InvalidInput("--set expects key=value, got '" + kv + "'");
                config.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            config.validate();
            const Dataset data = load_dataset(fit_input, fit_labels, config.zeta);
            std::cerr << "fit: " << data.size() << " subjects, K = " << config.classes << "\n";
            FitResult result;
            try {
                result = fit_groupwise(data, config);
            } catch (const FitAborted& e) {
                fs::create_directories(fit_out);
                write_ledger(fs::path(fit_out) / "ledger.csv", e.ledger);
                std::cerr << "fit aborted: " << e.what() << " (partial ledger in " << fit_out << ")\n";
                return 3;
            }
            write_fit(fit_out, result, data, config, fit_write);
            std::cerr << "fit: " << result.sweeps << " sweeps, bound " << result.sweep_bounds.back()
                      << (result.converged ? ", converged" : ", iteration limit") << "\n";
        } else if (*seg) {
            const TrainedAtlas trained = read_trained_atlas(seg_atlas);
            Subject s;
            s.name = fs::path(seg_input).stem().string();
            s.data = io::read_volume(seg_input);
            const Segmentation out = segment_unseen(s, trained.atlas, trained.hyperpriors, trained.config);
            write_segmentation(seg_out, s.name, s, out, trained.atlas);
            std::cerr << "segment: bound " << out.bounds.back() << " after " << out.bounds.size() - 1 << " sweeps\n";
        } else if (*syn) {
            SynthConfig c = SynthConfig::preset(syn_preset);
            c.noise_percent = syn_noise;
            c.subjects = syn_subjects;
            c.classes = syn_classes;
            c.dims = parse_dims(syn_dims);
            write_synth(syn_out, synthesize_dataset(c, syn_seed), syn_seed);
        } else if (*ev) {
            const VolumeGrid a = io::read_volume(ev_a), b = io::read_volume(ev_b);
            VolumeGrid mask;
            if (!ev_mask.empty()) mask = io::read_volume(ev_mask);
            const VolumeGrid* mp = ev_mask.empty() ? nullptr : &mask;
            return ev_metric == "dice" ? run_dice(a, b, mp) : run_pearson(a, b, mp);
        }
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
