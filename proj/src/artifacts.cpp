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
#include "gatlas/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gatlas/io.hpp"

namespace gatlas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p)
{
    std::ifstream f(p);
    if (!f) throw InvalidInput("cannot open " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream f(p, std::ios::binary);
    if (!f) throw InvalidInput("cannot write " + p.string());
    f << text;
    if (!f) throw InvalidInput("write failed for " + p.string());
}

bool is_volume_file(const fs::path& p)
{
    return fs::is_regular_file(p) && (p.extension() == ".mvol" || io::is_nifti_path(p));
}

std::string stem_of(const fs::path& p)
{
    std::string s = p.filename().string();
    for (const char* ext : {".mvol", ".nii"})
        if (s.size() > std::strlen(ext) && s.ends_with(ext)) return s.substr(0, s.size() - std::strlen(ext));
    return s;
}

fs::path resolve(const fs::path& base, const std::string& p)
{
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

// Channels listed separately in a manifest; `-` marks one missing throughout.
VolumeGrid assemble_channels(const std::vector<std::string>& channels, const fs::path& base)
{
    std::vector<VolumeGrid> parts(channels.size());
    const VolumeGrid* shape = nullptr;
    for (std::size_t c = 0; c < channels.size(); ++c) {
        if (channels[c] == "-") continue;
        parts[c] = io::read_volume(resolve(base, channels[c]));
        if (shape && (parts[c].dims() != shape->dims()))
            throw InvalidInput("manifest: channel " + channels[c] + " has different dimensions");
        if (!shape) shape = &parts[c];
    }
    int D = 0;
    for (std::size_t c = 0; c < channels.size(); ++c) D += channels[c] == "-" ? 1 : parts[c].channels();
    VolumeGrid out(shape->dims(), shape->spacing(), D);
    int d = 0;
    for (std::size_t c = 0; c < channels.size(); ++c) {
        if (channels[c] == "-") {
            for (std::size_t j = 0; j < out.voxels(); ++j) out.set_missing(j, d, true);
            ++d;
            continue;
        }
        for (int e = 0; e < parts[c].channels(); ++e, ++d)
            for (std::size_t j = 0; j < out.voxels(); ++j) {
                out.at(j, d) = parts[c].at(j, e);
                out.set_missing(j, d, parts[c].missing(j, e));
            }
    }
    return out;
}

VolumeGrid matrix_volume(const RowMatrix& m, const Dims& dims, const Spacing& spacing)
{
    VolumeGrid v(dims, spacing, int(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k)
        for (Eigen::Index j = 0; j < m.rows(); ++j) v.at(std::size_t(j), int(k)) = m(j, k);
    return v;
}

VolumeGrid label_volume(const RowMatrix& gamma, const Dims& dims, const Spacing& spacing)
{
    const std::vector<int> z = argmax_labels(gamma);
    VolumeGrid v(dims, spacing, 1);
    for (std::size_t j = 0; j < z.size(); ++j) v.at(j, 0) = z[j] + 1;
    return v;
}

// The model corrects with b; files hold the nonuniformity 1 / b, which is
// directly comparable with a multiplicative ground truth.
VolumeGrid bias_volume(const SubjectState& s)
{
    const BiasField b = evaluate_bias(s.bias, s.frame.subject_dims);
    const int D = s.bias.channels();
    VolumeGrid v(s.frame.subject_dims, s.frame.subject_spacing, D);
    for (std::size_t n = 0; n < b.size(); ++n) v.raw()[n] = 1.0 / b[n];
    return v;
}

VolumeGrid warp_volume(const SubjectState& s)
{
    const auto pts = template_points(s.frame, s.affine.matrix(), s.affine.t, s.phi.forward);
    VolumeGrid v(s.frame.subject_dims, s.frame.subject_spacing, 3);
    for (std::size_t j = 0; j < pts.size(); ++j)
        for (int a = 0; a < 3; ++a) v.at(j, a) = pts[j](a);
    return v;
}

json matrix_json(const MatrixXd& m)
{
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

MatrixXd matrix_from(const json& j)
{
    const Eigen::Index R = Eigen::Index(j.size());
    const Eigen::Index C = R ? Eigen::Index(j.at(0).size()) : 0;
    MatrixXd m(R, C);
    for (Eigen::Index r = 0; r < R; ++r) {
        if (Eigen::Index(j.at(std::size_t(r)).size()) != C) throw InvalidInput("atlas.json: ragged matrix");
        for (Eigen::Index c = 0; c < C; ++c) m(r, c) = j.at(std::size_t(r)).at(std::size_t(c)).get<double>();
    }
    return m;
}

json vector_json(const VectorXd& v)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

VectorXd vector_from(const json& j)
{
    VectorXd v(Eigen::Index(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(Eigen::Index(i)) = j.at(i).get<double>();
    return v;
}

json hyper_json(const GaussWishartBundle& h)
{
    json a = json::array();
    for (const auto& g : h.classes)
        a.push_back({{"m", vector_json(g.m)}, {"beta", g.beta}, {"W", matrix_json(g.W)}, {"nu", g.nu}});
    return a;
}

std::string subject_name(const Subject& s, std::size_t i)
{
    return s.name.empty() ? "subject" + std::to_string(i) : s.name;
}

}  // namespace

LabelData read_labels(const fs::path& path, std::size_t voxels, double zeta)
{
    const VolumeGrid v = io::read_volume(path);
    if (v.voxels() != voxels || v.channels() != 1)
        throw InvalidInput("labels " + path.string() + ": expected one channel with " + std::to_string(voxels) + " voxels");
    LabelData l;
    l.zeta = zeta;
    l.labels.resize(voxels);
    for (std::size_t j = 0; j < voxels; ++j) {
        const double x = v.missing(j, 0) ? 0.0 : v.at(j, 0);
        if (x < 0.0 || std::abs(x - std::round(x)) > 1e-3)
            throw InvalidInput("labels " + path.string() + ": non-integer or negative label at voxel " + std::to_string(j));
        l.labels[j] = int(std::lround(x));
    }
    return l;
}

Dataset load_dataset(const fs::path& input, const fs::path& labels_dir, double zeta)
{
    Dataset out;
    const auto attach = [&](Subject& s, const fs::path& label_path, double z) {
        if (fs::exists(label_path)) s.labels = read_labels(label_path, s.data.voxels(), z);
    };
    if (fs::is_directory(input)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(input))
            if (is_volume_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw InvalidInput("no .mvol or .nii volumes in " + input.string());
        for (const auto& f : files) {
            Subject s;
            s.name = stem_of(f);
            s.data = io::read_volume(f);
            if (!labels_dir.empty()) attach(s, labels_dir / f.filename(), zeta);
            out.push_back(std::move(s));
        }
        return out;
    }
    const fs::path base = input.parent_path();
    for (const ManifestEntry& e : parse_manifest(read_text(input))) {
        Subject s;
        const auto first = std::find_if(e.channels.begin(), e.channels.end(), [](const auto& c) { return c != "-"; });
        s.name = stem_of(fs::path(*first));
        s.data = assemble_channels(e.channels, base);
        const double z = e.zeta.value_or(zeta);
        if (!e.labels.empty()) {
            const fs::path p = resolve(base, e.labels);
            if (!fs::exists(p)) throw InvalidInput("manifest: label file " + p.string() + " not found");
            s.labels = read_labels(p, s.data.voxels(), z);
        } else if (!labels_dir.empty()) {
            attach(s, labels_dir / fs::path(*first).filename(), z);
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw InvalidInput("manifest " + input.string() + " lists no subjects");
    return out;
}

void write_ledger(const fs::path& path, const BoundLedger& ledger) { write_text(path, ledger.to_csv()); }

void write_fit(const fs::path& dir, const FitResult& fit, const Dataset& data, const ModelConfig& config,
               const WriteOptions& options)
{
    fs::create_directories(dir / "subjects");
    io::write_mvol(dir / "atlas.mvol", matrix_volume(fit.atlas.pi, fit.atlas.dims, fit.atlas.spacing));
    const json meta = {{"format", "gatlas-atlas"},
                       {"version", 1},
                       {"classes", fit.atlas.K()},
                       {"alpha0", vector_json(fit.atlas.alpha0)},
                       {"hyperpriors", hyper_json(fit.hyperpriors)},
                       {"config", config.to_text()}};
    write_text(dir / "atlas.json", meta.dump(2) + "\n");
    write_ledger(dir / "ledger.csv", fit.ledger);

    json subjects = json::array();
    for (std::size_t i = 0; i < fit.states.size(); ++i) {
        const SubjectState& s = fit.states[i];
        const std::string name = subject_name(data[i], i);
        const fs::path stem = dir / "subjects" / name;
        io::write_mvol(stem.string() + "_responsibilities.mvol",
                       matrix_volume(s.gamma, s.frame.subject_dims, s.frame.subject_spacing));
        io::write_mvol(stem.string() + "_labels.mvol", label_volume(s.gamma, s.frame.subject_dims, s.frame.subject_spacing));
        if (options.bias) io::write_mvol(stem.string() + "_bias.mvol", bias_volume(s));
        if (options.warp) io::write_mvol(stem.string() + "_warp.mvol", warp_volume(s));
        if (options.velocity) io::write_mvol(stem.string() + "_velocity.mvol", s.u);
        subjects.push_back({{"name", name},
                            {"weights", vector_json(s.weights)},
                            {"affine", vector_json(s.affine.a)},
                            {"translation", vector_json(s.affine.t)}});
    }
    const json summary = {{"sweeps", fit.sweeps},
                          {"converged", fit.converged},
                          {"sweep_bounds", fit.sweep_bounds},
                          {"subjects", subjects}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
}

TrainedAtlas read_trained_atlas(const fs::path& dir)
{
    json meta;
    try {
        meta = json::parse(read_text(dir / "atlas.json"));
    } catch (const json::exception& e) {
        throw InvalidInput("atlas.json: " + std::string(e.what()));
    }
    TrainedAtlas t;
    try {
        if (meta.at("format") != "gatlas-atlas") throw InvalidInput("atlas.json: unknown format");
        t.config = ModelConfig::parse(meta.at("config").get<std::string>());
        const VolumeGrid pi = io::read_mvol(dir / "atlas.mvol");
        const int K = meta.at("classes").get<int>();
        if (pi.channels() != K) throw InvalidInput("atlas.mvol: channel count differs from atlas.json");
        t.atlas.dims = pi.dims();
        t.atlas.spacing = pi.spacing();
        t.atlas.pi = RowMatrix(Eigen::Index(pi.voxels()), K);
        for (int k = 0; k < K; ++k)
            for (std::size_t j = 0; j < pi.voxels(); ++j) t.atlas.pi(Eigen::Index(j), k) = pi.at(j, k);
        // float32 storage: renormalise the rows.
        for (Eigen::Index j = 0; j < t.atlas.pi.rows(); ++j) t.atlas.pi.row(j) /= t.atlas.pi.row(j).sum();
        t.atlas.alpha0 = vector_from(meta.at("alpha0"));
        for (const auto& g : meta.at("hyperpriors")) {
            GaussWishart gw;
            gw.m = vector_from(g.at("m"));
            gw.beta = g.at("beta").get<double>();
            gw.W = matrix_from(g.at("W"));
            gw.nu = g.at("nu").get<double>();
            t.hyperpriors.classes.push_back(gw);
        }
    } catch (const json::exception& e) {
        throw InvalidInput("atlas.json: " + std::string(e.what()));
    }
    t.atlas.validate();
    t.hyperpriors.validate();
    if (t.hyperpriors.K() != t.atlas.K()) throw InvalidInput("atlas.json: hyperprior count differs from the atlas");
    return t;
}

void write_segmentation(const fs::path& dir, const std::string& name, const Subject& subject, const Segmentation& seg,
                        const TissueAtlas&)
{
    fs::create_directories(dir);
    const SubjectState& s = seg.state;
    const fs::path stem = dir / name;
    const Dims& d = subject.data.dims();
    io::write_mvol(stem.string() + "_responsibilities.mvol", matrix_volume(s.gamma, d, subject.data.spacing()));
    io::write_mvol(stem.string() + "_labels.mvol", label_volume(s.gamma, d, subject.data.spacing()));
    io::write_mvol(stem.string() + "_bias.mvol", bias_volume(s));
    io::write_mvol(stem.string() + "_warp.mvol", warp_volume(s));
    write_ledger(dir / (name + "_ledger.csv"), seg.ledger);
}

void write_synth(const fs::path& dir, const SynthDataset& ds, std::uint64_t seed)
{
    for (const char* sub : {"subjects", "labels", "truth"}) fs::create_directories(dir / sub);
    const SynthConfig& c = ds.config;
    io::write_mvol(dir / "truth" / "atlas.mvol", matrix_volume(ds.atlas.pi, ds.atlas.dims, ds.atlas.spacing));
    std::ostringstream manifest;
    for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
        const SynthSubject& s = ds.subjects[i];
        char buf[32];
        std::snprintf(buf, sizeof buf, "subject%02zu", i);
        const std::string name = buf;
        io::write_mvol(dir / "subjects" / (name + ".mvol"), s.image);
        VolumeGrid labels(c.dims, c.spacing, 1), bias(c.dims, c.spacing, 1);
        for (std::size_t j = 0; j < s.truth.size(); ++j) {
            labels.at(j, 0) = s.truth[j] + 1;
            bias.at(j, 0) = s.bias[j];
        }
        io::write_mvol(dir / "labels" / (name + ".mvol"), labels);
        io::write_mvol(dir / "truth" / (name + "_bias.mvol"), bias);
        io::write_mvol(dir / "truth" / (name + "_velocity.mvol"), s.velocity);
        manifest << "subjects/" << name << ".mvol\n";
    }
    write_text(dir / "manifest.txt", manifest.str());
    json means = json::array();
    for (int k = 0; k < c.classes; ++k) means.push_back(c.mean(k));
    const json meta = {{"seed", seed},
                       {"dims", {c.dims.nx, c.dims.ny, c.dims.nz}},
                       {"spacing", c.spacing},
                       {"classes", c.classes},
                       {"subjects", c.subjects},
                       {"bias_range", c.bias_range},
                       {"noise_percent", c.noise_percent},
                       {"warp_amplitude", c.warp_amplitude},
                       {"class_means", means}};
    write_text(dir / "synth.json", meta.dump(2) + "\n");
}

}  // namespace gatlas
