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
#include "gatlas/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "gatlas/diffeo.hpp"

namespace gatlas {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results are written
// by index, so scheduling never changes them; the lowest-index failure is
// rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn)
{
    std::vector<std::exception_ptr> errors(n);
    const std::size_t workers = std::min<std::size_t>(std::size_t(std::max(threads, 1)), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string subject_context(const Subject& s, std::size_t i)
{
    return "subject " + std::to_string(i) + (s.name.empty() ? "" : " (" + s.name + ")");
}

const LabelData* labels_of(const Subject& s) { return s.labels ? &*s.labels : nullptr; }

double quantile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = std::size_t(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct KMeansInit {
    std::vector<VectorXd> means;
    std::vector<VectorXd> precision;  // diagonal
};

// Lloyd iterations on the observed intensities, seeded evenly across the
// 1%..99% intensity range of every channel. Missing entries are left out of distances
// and means. Classes come out ordered by the first channel.
KMeansInit kmeans_intensities(const VolumeGrid& v, int K)
{
    const int D = v.channels();
    const std::size_t N = v.voxels();
    KMeansInit km;
    km.means.assign(std::size_t(K), VectorXd::Zero(D));
    VectorXd spread(D);
    for (int d = 0; d < D; ++d) {
        std::vector<double> x;
        for (std::size_t j = 0; j < N; ++j)
            if (!v.missing(j, d)) x.push_back(v.at(j, d));
        if (x.size() < 2) throw InvalidInput("initial_state: channel " + std::to_string(d) + " has no observations");
        const double lo = quantile(x, 0.01), hi = quantile(x, 0.99);
        for (int k = 0; k < K; ++k) km.means[std::size_t(k)](d) = lo + (k + 0.5) / K * (hi - lo);
        spread(d) = std::max(quantile(x, 0.95) - quantile(x, 0.05), 1e-6 * (std::abs(x.front()) + 1.0));
    }
    std::vector<int> assign(N, -1);
    const auto nearest = [&](std::size_t j) {
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) {
            double dist = 0.0;
            for (int d = 0; d < D; ++d)
                if (!v.missing(j, d)) {
                    const double r = (v.at(j, d) - km.means[std::size_t(k)](d)) / spread(d);
                    dist += r * r;
                }
            if (dist < bd) bd = dist, best = k;
        }
        return best;
    };
    for (int it = 0; it < 50; ++it) {
        bool changed = false;
        for (std::size_t j = 0; j < N; ++j) {
            const int k = nearest(j);
            changed = changed || k != assign[j];
            assign[j] = k;
        }
        if (!changed) break;
        for (int k = 0; k < K; ++k)
            for (int d = 0; d < D; ++d) {
                double sum = 0.0, n = 0.0;
                for (std::size_t j = 0; j < N; ++j)
                    if (assign[j] == k && !v.missing(j, d)) sum += v.at(j, d), n += 1.0;
                if (n > 0.0) km.means[std::size_t(k)](d) = sum / n;
            }
    }
    std::vector<int> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return km.means[std::size_t(a)](0) < km.means[std::size_t(b)](0);
    });
    KMeansInit out;
    for (int k : order) {
        VectorXd var = VectorXd::Zero(D), n = VectorXd::Zero(D);
        for (std::size_t j = 0; j < N; ++j)
            if (assign[j] == k)
                for (int d = 0; d < D; ++d)
                    if (!v.missing(j, d)) {
                        const double r = v.at(j, d) - km.means[std::size_t(k)](d);
                        var(d) += r * r;
                        n(d) += 1.0;
                    }
        VectorXd prec(D);
        for (int d = 0; d < D; ++d) {
            // Floor at a tenth of the quantile-based width so a tight cluster
            // does not start out overconfident.
            const double floor = spread(d) / (20.0 * K);
            const double sd = std::max(n(d) > 1.0 ? std::sqrt(var(d) / n(d)) : spread(d) / (2.0 * K), floor);
            prec(d) = 1.0 / (sd * sd);
        }
        out.means.push_back(km.means[std::size_t(k)]);
        out.precision.push_back(prec);
    }
    return out;
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) { return std::chrono::duration<double, std::milli>(Clock::now() - start).count(); }

// One pass of the per-subject inner loop. Each family is applied to a copy of
// the state; the copy replaces the state only when the subject bound does not
// drop (the updates are constructed to increase it, this is the guard).
// Returned rows carry subject-local bound values.
std::vector<LedgerRow> subject_sweep(const Subject& subject, SubjectState& state, const TissueAtlas& atlas,
                                     const GaussWishartBundle& hyper, const ModelConfig& config, int iteration,
                                     int index)
{
    std::vector<LedgerRow> rows;
    const LabelMap map = config.labels();
    const LabelData* labels = labels_of(subject);
    double current = subject_bound(subject, state, atlas, hyper, config).sum();

    const auto family = [&](const std::string& name, const std::function<std::string(SubjectState&)>& update) {
        const auto start = Clock::now();
        SubjectState trial = state;
        std::string flags = update(trial);
        const double after = subject_bound(subject, trial, atlas, hyper, config).sum();
        LedgerRow row{iteration, name, index, current, after, true, std::move(flags), 0.0};
        if (!std::isfinite(after)) throw InvalidInput(name + " update produced a non-finite bound");
        if (after < current - 1e-12 * std::abs(current)) {
            row.accepted = false;
            row.flags += row.flags.empty() ? "reverted" : ";reverted";
            // Damping state is not part of the model; keep its adaptation.
            state.velocity_levenberg = trial.velocity_levenberg;
        } else {
            state = std::move(trial);
            current = after;
        }
        if (config.record_time) row.ms = elapsed_ms(start);
        rows.push_back(std::move(row));
    };

    family("mixture", [&](SubjectState& s) {
        const EStepResult e = e_step(subject.data, evaluate_bias(s.bias, subject.data.dims()),
                                     subject_prior_field(s, atlas), s.posterior, labels, &map);
        s.gamma = e.gamma;
        return "estep" + (e.degenerate ? ";degenerate=" + std::to_string(e.degenerate) : std::string());
    });
    family("mixture", [&](SubjectState& s) {
        const BiasField b = evaluate_bias(s.bias, subject.data.dims());
        s.posterior = m_step(sufficient_stats(subject.data, b, s.gamma, s.posterior), hyper);
        return std::string("mstep");
    });
    if (config.update_weights)
        family("weights", [&](SubjectState& s) {
            const auto pts = template_points(s.frame, s.affine.matrix(), s.affine.t, s.phi.forward);
            const WeightUpdate w = update_tissue_weights(s.gamma, sample_atlas(atlas, pts, false).pi, s.weights);
            s.weights = w.weights;
            return "iterations=" + std::to_string(w.iterations);
        });
    for (int it = 0; it < config.gn_iterations; ++it) {
        if (config.update_bias)
            family("bias", [&](SubjectState& s) {
                const BiasUpdate u = gauss_newton_bias_update(subject.data, s.gamma, s.posterior, s.bias);
                s.bias = u.model;
                return "halvings=" + std::to_string(u.halvings) + (u.accepted ? "" : ";kept");
            });
        if (config.update_affine)
            family("affine", [&](SubjectState& s) {
                AffineContext ctx{&s.gamma, &atlas, s.weights, &s.phi.forward, s.frame};
                const AffineUpdate u = gauss_newton_affine_update(ctx, s.affine);
                s.affine = u.params;
                return "attempts=" + std::to_string(u.attempts) + (u.accepted ? "" : ";kept");
            });
        if (config.update_velocity)
            family("velocity", [&](SubjectState& s) {
                VelocityContext ctx{&s.gamma, &atlas, s.weights, s.frame, s.affine.matrix(), s.affine.t, config.op,
                                    config.shoot_steps};
                VelocityUpdate u = gauss_newton_velocity_update(ctx, s.u, s.phi, s.velocity_levenberg);
                s.u = std::move(u.u);
                s.phi = std::move(u.phi);
                s.velocity_levenberg = u.levenberg;
                std::string f = "halvings=" + std::to_string(u.halvings);
                if (!u.accepted) f += ";kept";
                if (u.solver_warning) f += ";solver_warning";
                return f;
            });
    }
    return rows;
}

std::string csv_number(double x)
{
    std::ostringstream s;
    s.precision(17);
    s << x;
    return s.str();
}

}  // namespace

RowMatrix subject_prior_field(const SubjectState& s, const TissueAtlas& atlas)
{
    const auto pts = template_points(s.frame, s.affine.matrix(), s.affine.t, s.phi.forward);
    return warped_prior(sample_atlas(atlas, pts, false).pi, s.weights);
}

BoundTerms subject_bound(const Subject& subject, const SubjectState& s, const TissueAtlas& atlas,
                         const GaussWishartBundle& hyper, const ModelConfig& config)
{
    const LabelMap map = config.labels();
    const MixtureTerms m = mixture_terms(subject.data, evaluate_bias(s.bias, subject.data.dims()),
                                         subject_prior_field(s, atlas), s.posterior, s.gamma, labels_of(subject), &map);
    BoundTerms t;
    t.data = m.data;
    t.prior_z = m.prior_z;
    t.labels = m.labels;
    t.entropy = m.entropy;
    t.gauss_wishart = gauss_wishart_bound(s.posterior, hyper);
    t.bias_prior = bias_prior_term(s.bias);
    t.affine_prior = affine_penalty(s.affine);
    t.velocity_prior = -penalty_energy(s.u, config.op);
    return t;
}

LowerBound compute_lower_bound(const Dataset& data, const std::vector<SubjectState>& states, const TissueAtlas& atlas,
                               const GaussWishartBundle& hyper, const ModelConfig& config)
{
    if (data.size() != states.size()) throw InvalidInput("compute_lower_bound: one state per subject required");
    LowerBound lb;
    lb.subjects.resize(data.size());
    parallel_for(data.size(), config.threads,
                 [&](std::size_t i) {
                     try {
                         lb.subjects[i] = subject_bound(data[i], states[i], atlas, hyper, config);
                     } catch (const InvalidInput& e) {
                         throw InvalidInput(subject_context(data[i], i) + ": " + e.what());
                     }
                 });
    const auto check = [](double v, const std::string& term, const std::string& who) {
        if (!std::isfinite(v)) throw InvalidInput("lower bound term '" + term + "' is not finite for " + who);
    };
    for (std::size_t i = 0; i < data.size(); ++i) {
        const BoundTerms& t = lb.subjects[i];
        const std::string who = subject_context(data[i], i);
        check(t.data, "data", who);
        check(t.prior_z, "prior_z", who);
        check(t.labels, "labels", who);
        check(t.entropy, "entropy", who);
        check(t.gauss_wishart, "gauss_wishart", who);
        check(t.bias_prior, "bias_prior", who);
        check(t.affine_prior, "affine_prior", who);
        check(t.velocity_prior, "velocity_prior", who);
        lb.total += t.sum();
    }
    lb.dirichlet = dirichlet_log_prior(atlas.pi, atlas.alpha0);
    check(lb.dirichlet, "dirichlet", "the template");
    lb.total += lb.dirichlet;
    return lb;
}

std::string BoundLedger::to_csv() const
{
    std::ostringstream s;
    s << "iteration,family,subject,before,after,accepted,flags,ms\n";
    for (const auto& r : rows)
        s << r.iteration << ',' << r.family << ',' << r.subject << ',' << csv_number(r.before) << ','
          << csv_number(r.after) << ',' << (r.accepted ? 1 : 0) << ',' << r.flags << ',' << csv_number(r.ms) << '\n';
    return s.str();
}

bool BoundLedger::monotone(double rel) const
{
    return std::all_of(rows.begin(), rows.end(), [&](const LedgerRow& r) {
        return !r.accepted || r.after >= r.before - rel * std::abs(r.before);
    });
}

std::pair<Dims, Spacing> default_template_grid(const Dataset& data)
{
    if (data.empty()) throw InvalidInput("default_template_grid: empty dataset");
    Spacing h{};
    for (int a = 0; a < 3; ++a) {
        std::vector<double> v;
        for (const auto& s : data) v.push_back(s.data.spacing()[std::size_t(a)]);
        std::sort(v.begin(), v.end());
        h[std::size_t(a)] = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    }
    int n[3] = {1, 1, 1};
    for (const auto& s : data)
        for (int a = 0; a < 3; ++a) {
            const double fov = s.data.dims()[a] * s.data.spacing()[std::size_t(a)];
            n[a] = std::max(n[a], int(std::ceil(fov / h[std::size_t(a)] - 1e-9)));
        }
    return {Dims{n[0], n[1], n[2]}, h};
}

SubjectState initial_state(const Subject& subject, const TissueAtlas& atlas, const ModelConfig& config,
                           const GaussWishartBundle* hyper)
{
    const VolumeGrid& v = subject.data;
    v.validate();
    const int K = config.classes;
    const int D = v.channels();
    if (atlas.K() != K) throw InvalidInput("initial_state: atlas class count differs from the configuration");
    SubjectState s;
    s.frame = SpatialFrame{v.dims(), v.spacing(), atlas.dims, atlas.spacing};
    s.weights = VectorXd::Ones(K);
    s.bias = make_bias_model(v.dims(), v.spacing(), D, config.bias_strength, config.bias_order);
    s.affine.prior_precision =
        AffineParams::default_precision(config.affine_rotation, config.affine_zoom, config.affine_shear);
    s.u = VectorField(v.dims(), v.spacing());
    s.phi = DeformationField::identity(v.dims(), v.spacing());
    s.velocity_levenberg = config.velocity_levenberg;
    s.gamma = Responsibilities::Constant(Eigen::Index(v.voxels()), K, 1.0 / K);
    if (subject.labels) {
        // Start labeled voxels on the rater likelihood so the label term is finite.
        const LabelMap map = config.labels();
        const LabelData& l = *subject.labels;
        if (l.labels.size() != v.voxels()) throw InvalidInput("initial_state: label volume size mismatch");
        for (std::size_t j = 0; j < v.voxels(); ++j) {
            if (l.labels[j] <= 0) continue;
            auto row = s.gamma.row(Eigen::Index(j));
            for (int k = 0; k < K; ++k) row(k) = std::exp(map.log_likelihood(l.labels[j], k, K, l.zeta));
            row /= row.sum();
        }
    }

    if (hyper) {
        if (hyper->K() != K || hyper->dim() != D)
            throw InvalidInput("initial_state: hyperpriors have " + std::to_string(hyper->dim()) + " channels, volume has " +
                               std::to_string(D));
        s.posterior = *hyper;
    } else {
        s.posterior.classes.resize(std::size_t(K));
        const KMeansInit km = kmeans_intensities(v, K);
        const double nu = D + 2.0;
        for (int k = 0; k < K; ++k) {
            GaussWishart& g = s.posterior.classes[std::size_t(k)];
            g.m = km.means[std::size_t(k)];
            g.beta = 1.0;
            g.nu = nu;
            g.W = MatrixXd(km.precision[std::size_t(k)].asDiagonal()) / nu;
        }
    }
    if (config.centroid_init && config.update_affine) {
        VectorXd brightness(K);
        for (int k = 0; k < K; ++k) brightness(k) = s.posterior.classes[std::size_t(k)].m(0);
        s.affine.t = centroid_translation(v, atlas, brightness, s.frame);
    }
    return s;
}

GaussWishartBundle initial_hyperpriors(const std::vector<SubjectState>& states)
{
    if (states.empty()) throw InvalidInput("initial_hyperpriors: no subjects");
    GaussWishartBundle h = states.front().posterior;
    const int D = h.dim();
    const double M = double(states.size());
    for (int k = 0; k < h.K(); ++k) {
        VectorXd m = VectorXd::Zero(D);
        MatrixXd P = MatrixXd::Zero(D, D);
        for (const auto& s : states) {
            m += s.posterior.classes[std::size_t(k)].m / M;
            P += s.posterior.classes[std::size_t(k)].expected_precision() / M;
        }
        GaussWishart& g = h.classes[std::size_t(k)];
        g.m = m;
        g.beta = 1e-2;
        g.nu = D + 1.0;
        g.W = P / g.nu;
    }
    return h;
}

FitResult fit_groupwise(const Dataset& data, const ModelConfig& config, const FitInit& init)
{
    config.validate();
    if (data.empty()) throw InvalidInput("fit_groupwise: no subjects");
    const int D = data.front().data.channels();
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i].data.validate();
        if (data[i].data.channels() != D)
            throw InvalidInput(subject_context(data[i], i) + ": channel count differs from the first subject");
        if (data[i].labels && data[i].labels->labels.size() != data[i].data.voxels())
            throw InvalidInput(subject_context(data[i], i) + ": label volume size mismatch");
    }

    FitResult r;
    if (init.atlas) {
        r.atlas = *init.atlas;
    } else {
        const auto [dims, spacing] = default_template_grid(data);
        r.atlas = TissueAtlas::uniform(dims, spacing, config.classes, config.alpha0);
    }
    r.atlas.validate();

    if (!init.states.empty()) {
        if (init.states.size() != data.size()) throw InvalidInput("fit_groupwise: initial states do not match subjects");
        r.states = init.states;
    } else {
        r.states.resize(data.size());
        parallel_for(data.size(), config.threads, [&](std::size_t i) {
            r.states[i] = initial_state(data[i], r.atlas, config, init.hyperpriors ? &*init.hyperpriors : nullptr);
        });
        // Centroid translations are re-centred so the template frame sits at the
        // mean subject position rather than at an arbitrary grid point.
        if (config.centroid_init && config.update_affine) {
            Vec3 mean = Vec3::Zero();
            for (const auto& s : r.states) mean += s.affine.t / double(r.states.size());
            for (auto& s : r.states) s.affine.t -= mean;
        }
    }
    r.hyperpriors = init.hyperpriors ? *init.hyperpriors : initial_hyperpriors(r.states);

    const auto fail = [&](const std::exception& e) -> FitAborted { return FitAborted(e.what(), r.ledger); };

    try {
        LowerBound lb = compute_lower_bound(data, r.states, r.atlas, r.hyperpriors, config);
        r.sweep_bounds.push_back(lb.total);
        std::vector<double> subject_values(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) subject_values[i] = lb.subjects[i].sum();
        double dirichlet = lb.dirichlet;

        for (int it = 1; it <= config.max_iterations; ++it) {
            const double sweep_start = r.sweep_bounds.back();

            std::vector<std::vector<LedgerRow>> rows(data.size());
            parallel_for(data.size(), config.threads, [&](std::size_t i) {
                try {
                    rows[i] = subject_sweep(data[i], r.states[i], r.atlas, r.hyperpriors, config, it, int(i));
                } catch (const std::exception& e) {
                    throw InvalidInput(subject_context(data[i], i) + ": " + e.what());
                }
            });
            // Subjects are independent given the template and hyperpriors, so the
            // total after each row is what a sequential sweep would have seen.
            double others = dirichlet + std::accumulate(subject_values.begin(), subject_values.end(), 0.0);
            for (std::size_t i = 0; i < data.size(); ++i) {
                others -= subject_values[i];
                for (LedgerRow& row : rows[i]) {
                    row.before += others;
                    row.after += others;
                    r.ledger.rows.push_back(row);
                }
                subject_values[i] = subject_bound(data[i], r.states[i], r.atlas, r.hyperpriors, config).sum();
                others += subject_values[i];
            }

            if (config.update_template) {
                const auto start = Clock::now();
                lb = compute_lower_bound(data, r.states, r.atlas, r.hyperpriors, config);
                std::vector<PushedStats> parts(data.size());
                parallel_for(data.size(), config.threads, [&](std::size_t i) {
                    const SubjectState& s = r.states[i];
                    parts[i] = push_responsibilities(s.gamma, SubjectWarp{s.frame, s.affine.matrix(), s.affine.t, &s.phi},
                                                     s.weights, r.atlas);
                });
                PushedStats stats = PushedStats::zeros(r.atlas.dims, r.atlas.K());
                for (const auto& p : parts) stats.add(p);
                const TemplateUpdate u = config.update_weights
                                             ? update_template_weighted(stats, r.atlas.alpha0, r.atlas.pi)
                                             : update_template_unit_weights(stats, r.atlas.alpha0);
                const RowMatrix target = smooth_template(u.pi, r.atlas.dims, r.atlas.spacing, config.template_fwhm);

                // The update maximises the template-space objective; the bound is
                // evaluated in subject space, so the step is backtracked along the
                // segment towards the previous template until it does not drop.
                LedgerRow row{it, "template", -1, lb.total, lb.total, false, "", 0.0};
                double step = 1.0;
                int halvings = 0;
                for (; halvings <= 8; ++halvings, step *= 0.5) {
                    TissueAtlas trial = r.atlas;
                    trial.pi = (1.0 - step) * r.atlas.pi + step * target;
                    const LowerBound tb = compute_lower_bound(data, r.states, trial, r.hyperpriors, config);
                    if (tb.total >= lb.total) {
                        r.atlas = std::move(trial);
                        row.after = tb.total;
                        row.accepted = true;
                        for (std::size_t i = 0; i < data.size(); ++i) subject_values[i] = tb.subjects[i].sum();
                        dirichlet = tb.dirichlet;
                        break;
                    }
                }
                row.flags = "halvings=" + std::to_string(std::min(halvings, 8)) + ";fallback_rows=" +
                            std::to_string(u.fallback_rows) + ";retained_rows=" + std::to_string(u.retained_rows);
                if (!row.accepted) row.flags += ";kept";
                if (config.record_time) row.ms = elapsed_ms(start);
                r.ledger.rows.push_back(row);
            }

            if (config.update_hyperpriors && data.size() >= 2) {
                const auto start = Clock::now();
                std::vector<GaussWishartBundle> posts;
                for (const auto& s : r.states) posts.push_back(s.posterior);
                const GaussWishartBundle cand = fit_intensity_hyperpriors(posts);
                double before = 0.0, after = 0.0;
                for (const auto& p : posts) {
                    before += gauss_wishart_bound(p, r.hyperpriors);
                    after += gauss_wishart_bound(p, cand);
                }
                const double total = dirichlet + std::accumulate(subject_values.begin(), subject_values.end(), 0.0);
                LedgerRow row{it, "hyperprior", -1, total, total, false, "", 0.0};
                if (std::isfinite(after) && after >= before) {
                    r.hyperpriors = cand;
                    row.after = total - before + after;
                    row.accepted = true;
                    for (std::size_t i = 0; i < data.size(); ++i)
                        subject_values[i] = subject_bound(data[i], r.states[i], r.atlas, r.hyperpriors, config).sum();
                } else {
                    row.flags = "kept";
                }
                if (config.record_time) row.ms = elapsed_ms(start);
                r.ledger.rows.push_back(row);
            }

            lb = compute_lower_bound(data, r.states, r.atlas, r.hyperpriors, config);
            r.sweep_bounds.push_back(lb.total);
            r.sweeps = it;
            if (std::abs(lb.total - sweep_start) < config.tolerance * std::abs(sweep_start)) {
                r.converged = true;
                break;
            }
        }
    } catch (const FitAborted&) {
        throw;
    } catch (const std::exception& e) {
        throw fail(e);
    }
    return r;
}

Segmentation segment_unseen(const Subject& subject, const TissueAtlas& atlas, const GaussWishartBundle& hyper,
                            const ModelConfig& config, const SubjectState* init)
{
    config.validate();
    subject.data.validate();
    if (subject.data.channels() != hyper.dim())
        throw InvalidInput("segment_unseen: volume has " + std::to_string(subject.data.channels()) +
                           " channels but the hyperpriors expect " + std::to_string(hyper.dim()) +
                           "; declare absent channels as missing instead");
    if (atlas.K() != config.classes) throw InvalidInput("segment_unseen: atlas class count differs from the configuration");
    Segmentation out;
    out.state = init ? *init : initial_state(subject, atlas, config, &hyper);
    double last = subject_bound(subject, out.state, atlas, hyper, config).sum();
    out.bounds.push_back(last);
    const LabelMap map = config.labels();
    for (int it = 1; it <= config.segment_iterations; ++it) {
        auto rows = subject_sweep(subject, out.state, atlas, hyper, config, it, 0);
        out.ledger.rows.insert(out.ledger.rows.end(), rows.begin(), rows.end());
        const double now = subject_bound(subject, out.state, atlas, hyper, config).sum();
        out.bounds.push_back(now);
        const bool done = std::abs(now - last) < config.tolerance * std::abs(last);
        last = now;
        if (done) break;
    }
    // Final responsibilities consistent with the final bias and warp.
    const EStepResult e = e_step(subject.data, evaluate_bias(out.state.bias, subject.data.dims()),
                                 subject_prior_field(out.state, atlas), out.state.posterior, labels_of(subject), &map);
    out.state.gamma = e.gamma;
    out.bounds.push_back(subject_bound(subject, out.state, atlas, hyper, config).sum());
    return out;
}

std::vector<int> argmax_labels(const RowMatrix& p)
{
    std::vector<int> out(std::size_t(p.rows()));
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
        Eigen::Index k = 0;
        p.row(j).maxCoeff(&k);
        out[std::size_t(j)] = int(k);
    }
    return out;
}

double dice_score(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b)
{
    if (a.size() != b.size()) throw InvalidInput("dice_score: size mismatch");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        na += a[j] != 0;
        nb += b[j] != 0;
        both += (a[j] != 0) && (b[j] != 0);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(both) / double(na + nb);
}

std::vector<double> class_dice(const std::vector<int>& a, const std::vector<int>& b, int K, bool best_permutation)
{
    if (a.size() != b.size()) throw InvalidInput("class_dice: size mismatch");
    const auto dice_for = [&](const std::vector<int>& perm) {
        std::vector<double> d(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k) {
            std::vector<std::uint8_t> ma(a.size()), mb(b.size());
            for (std::size_t j = 0; j < a.size(); ++j) {
                ma[j] = a[j] == k;
                mb[j] = b[j] >= 0 && b[j] < K && perm[std::size_t(b[j])] == k;
            }
            d[std::size_t(k)] = dice_score(ma, mb);
        }
        return d;
    };
    std::vector<int> perm(static_cast<std::size_t>(K));
    std::iota(perm.begin(), perm.end(), 0);
    if (!best_permutation || K > 8) return dice_for(perm);
    std::vector<double> best;
    double best_mean = -1.0;
    do {
        const auto d = dice_for(perm);
        const double m = std::accumulate(d.begin(), d.end(), 0.0) / K;
        if (m > best_mean) best_mean = m, best = d;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b, const std::vector<std::uint8_t>& mask)
{
    if (a.size() != b.size() || (!mask.empty() && mask.size() != a.size()))
        throw InvalidInput("pearson_correlation: size mismatch");
    double n = 0.0, ma = 0.0, mb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        if (mask.empty() || mask[j]) n += 1.0, ma += a[j], mb += b[j];
    if (n < 2.0) throw InvalidInput("pearson_correlation: fewer than two voxels");
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        if (mask.empty() || mask[j]) {
            sab += (a[j] - ma) * (b[j] - mb);
            saa += (a[j] - ma) * (a[j] - ma);
            sbb += (b[j] - mb) * (b[j] - mb);
        }
    if (!(saa > 0.0) || !(sbb > 0.0)) throw InvalidInput("pearson_correlation: zero variance");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace gatlas
