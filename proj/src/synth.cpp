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
#include "gatlas/synth.hpp"

#include <cmath>
#include <numbers>

#include "gatlas/diffeo.hpp"
#include "gatlas/rng.hpp"

namespace gatlas {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// Sum of random plane sine waves with 1..kmax cycles per field of view.
std::vector<double> smooth_scalar(const Dims& d, CounterRng& rng, int modes, int kmax)
{
    std::vector<double> f(d.count(), 0.0);
    for (int m = 0; m < modes; ++m) {
        double k[3], ph[3];
        for (int a = 0; a < 3; ++a) {
            k[a] = 1 + int(kmax * rng.uniform());
            ph[a] = kTau * rng.uniform();
        }
        const double amp = rng.normal();
        for (std::size_t n = 0; n < d.count(); ++n) {
            const auto q = d.coords(n);
            double arg = 0.0;
            for (int a = 0; a < 3; ++a) arg += kTau * k[a] * q[std::size_t(a)] / d[a] + ph[a] / 3.0;
            f[n] += amp * std::sin(arg);
        }
    }
    return f;
}

double max_abs(const std::vector<double>& f)
{
    double m = 0.0;
    for (double x : f) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

SynthConfig SynthConfig::preset(const std::string& name)
{
    SynthConfig c;
    if (name == "bias20") c.bias_range = 0.1;
    else if (name == "bias40") c.bias_range = 0.2;
    else throw InvalidInput("unknown synth preset '" + name + "' (expected bias20 or bias40)");
    return c;
}

double SynthConfig::mean(int k) const
{
    if (!class_means.empty()) return class_means.at(std::size_t(k));
    return 50.0 + 100.0 * k;
}

TissueAtlas synth_atlas(const SynthConfig& c, std::uint64_t seed)
{
    if (c.classes < 2) throw InvalidInput("synth: at least two classes");
    const Dims& d = c.dims;
    const int K = c.classes;
    TissueAtlas atlas = TissueAtlas::uniform(d, c.spacing, K);
    const double half = (d.nx + d.ny + d.nz) / 6.0;
    const double width = c.boundary_width / half;

    std::vector<double> r(d.count());
    for (std::size_t n = 0; n < d.count(); ++n) {
        const auto q = d.coords(n);
        double s = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double p = (q[std::size_t(a)] - 0.5 * (d[a] - 1)) / (0.5 * d[a]);
            s += p * p;
        }
        r[n] = std::sqrt(s);
    }
    // steps[b][n]: soft indicator of lying inside boundary b (b = 1..K-1).
    std::vector<std::vector<double>> steps(static_cast<std::size_t>(K));
    for (int b = 1; b < K; ++b) {
        CounterRng rng(seed, 1000 + std::uint64_t(b));
        std::vector<double> delta = smooth_scalar(d, rng, 4, 3);
        const double m = max_abs(delta);
        const double level = 0.95 - 0.3 * (b - 1) / std::max(K - 2, 1);
        steps[std::size_t(b)].resize(d.count());
        for (std::size_t n = 0; n < d.count(); ++n) {
            const double dl = m > 0.0 ? 0.05 * delta[n] / m : 0.0;
            steps[std::size_t(b)][n] = 1.0 / (1.0 + std::exp(-(level + dl - r[n]) / width));
        }
    }
    for (std::size_t n = 0; n < d.count(); ++n) {
        auto row = atlas.pi.row(Eigen::Index(n));
        for (int k = 0; k < K; ++k) {
            const double inside = k == 0 ? 1.0 : steps[std::size_t(k)][n];
            const double next = k + 1 < K ? steps[std::size_t(k + 1)][n] : 0.0;
            row(k) = std::max(inside - next, 0.0);
        }
        row /= row.sum();
    }
    return atlas;
}

SynthSubject synth_subject(const SynthConfig& c, const TissueAtlas& atlas, std::uint64_t seed, int index)
{
    const Dims& d = c.dims;
    const std::size_t N = d.count();
    const std::uint64_t base = 16 * (std::uint64_t(index) + 1);
    SynthSubject s;

    CounterRng vr(seed, base + 0);
    s.velocity = VectorField(d, c.spacing);
    for (int a = 0; a < 3; ++a) {
        const std::vector<double> f = smooth_scalar(d, vr, 4, 2);
        for (std::size_t n = 0; n < N; ++n) s.velocity.v[n](a) = f[n];
    }
    if (const double m = s.velocity.max_norm(); m > 0.0)
        for (auto& x : s.velocity.v) x *= c.warp_amplitude / m;
    s.phi = geodesic_shoot(s.velocity, OperatorSpec{});

    CounterRng ar(seed, base + 1);
    for (int p = 0; p < 3; ++p) s.affine.a(p) = c.rotation_sd * ar.normal();
    for (int p = 3; p < 6; ++p) s.affine.a(p) = c.zoom_sd * ar.normal();
    for (int a = 0; a < 3; ++a) s.affine.t(a) = c.translation_sd * ar.normal();
    s.affine.prior_precision = AffineParams::default_precision();

    const SpatialFrame frame{d, c.spacing, atlas.dims, atlas.spacing};
    const auto pts = template_points(frame, s.affine.matrix(), s.affine.t, s.phi.forward);
    const RowMatrix pi = sample_atlas(atlas, pts, false).pi;
    s.truth = argmax_labels(pi);

    // Zero-mean cosine field at the default bias resolution, scaled onto the range.
    std::array<int, 3> order = default_bias_order(d, c.spacing);
    for (int& o : order) o = std::max(o, 2);
    BiasModel bm;
    bm.order = order;
    bm.coeffs.assign(1, VectorXd::Zero(order[0] * order[1] * order[2]));
    CounterRng br(seed, base + 2);
    for (int m = 1; m < bm.size(); ++m) {
        const int mx = m % order[0], my = (m / order[0]) % order[1], mz = m / (order[0] * order[1]);
        bm.coeffs[0](m) = br.normal() / (1.0 + mx * mx + my * my + mz * mz);
    }
    const std::vector<double> f = BiasBasis(d, order).log_field(bm.coeffs[0]);
    const double fm = max_abs(f);
    s.bias.resize(N);
    for (std::size_t n = 0; n < N; ++n) s.bias[n] = 1.0 + (fm > 0.0 ? c.bias_range * f[n] / fm : 0.0);

    double brightest = 0.0;
    for (int k = 0; k < c.classes; ++k) brightest = std::max(brightest, std::abs(c.mean(k)));
    const double sigma = c.noise_percent / 100.0 * brightest;
    CounterRng nr(seed, base + 3);
    s.image = VolumeGrid(d, c.spacing, 1);
    for (std::size_t n = 0; n < N; ++n) {
        const double noise = sigma > 0.0 ? sigma * nr.normal() : 0.0;
        s.image.at(n, 0) = s.bias[n] * c.mean(s.truth[n]) + noise;
    }
    return s;
}

SynthDataset synthesize_dataset(const SynthConfig& config, std::uint64_t seed)
{
    if (config.subjects < 1) throw InvalidInput("synth: at least one subject");
    if (!config.class_means.empty() && int(config.class_means.size()) != config.classes)
        throw InvalidInput("synth: one mean per class required");
    if (!(config.bias_range >= 0.0 && config.bias_range < 1.0)) throw InvalidInput("synth: bias range must be in [0, 1)");
    SynthDataset ds;
    ds.config = config;
    ds.atlas = synth_atlas(config, seed);
    for (int i = 0; i < config.subjects; ++i) ds.subjects.push_back(synth_subject(config, ds.atlas, seed, i));
    return ds;
}

Dataset SynthDataset::dataset(int labeled, double zeta) const
{
    Dataset out;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        Subject s;
        s.name = "subject" + std::to_string(i);
        s.data = subjects[i].image;
        if (int(i) < labeled) {
            LabelData l;
            l.zeta = zeta;
            for (int z : subjects[i].truth) l.labels.push_back(z + 1);
            s.labels = std::move(l);
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace gatlas
