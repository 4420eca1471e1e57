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
#include "gatlas/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <boost/math/special_functions/digamma.hpp>

namespace gatlas {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_det_spd(const MatrixXd& A)
{
    Eigen::LLT<MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw InvalidInput("matrix is not positive definite");
    const MatrixXd& L = llt.matrixL();
    double s = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) s += std::log(L(i, i));
    return 2.0 * s;
}

// log of the multivariate gamma function Gamma_D(x).
double log_multigamma(double x, int D)
{
    double s = 0.25 * D * (D - 1) * std::log(std::numbers::pi);
    for (int d = 1; d <= D; ++d) s += std::lgamma(x + 0.5 * (1 - d));
    return s;
}

double log_wishart_norm(const MatrixXd& W, double nu)
{
    const int D = int(W.rows());
    return -0.5 * nu * log_det_spd(W) - 0.5 * nu * D * std::numbers::ln2 - log_multigamma(0.5 * nu, D);
}

MatrixXd sub(const MatrixXd& A, const std::vector<int>& rows, const std::vector<int>& cols)
{
    MatrixXd S(rows.size(), cols.size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) S(Eigen::Index(r), Eigen::Index(c)) = A(rows[r], cols[c]);
    return S;
}

VectorXd sub(const VectorXd& v, const std::vector<int>& idx)
{
    VectorXd s(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) s(Eigen::Index(r)) = v(idx[r]);
    return s;
}

struct LogFactors {
    RowMatrix loglik;  // includes bias volume term
    RowMatrix label;   // log p(l | z); zero when unlabeled
    std::vector<unsigned> pattern;
};

LogFactors compute_log_factors(const VolumeGrid& data, const BiasField& bias, const GaussWishartBundle& bundle,
                               const LabelData* labels, const LabelMap* label_map)
{
    const int K = bundle.K();
    const int D = data.channels();
    if (bundle.dim() != D) throw InvalidInput("e_step: channel count does not match the intensity model");
    const std::size_t N = data.voxels();
    if (bias.size() != N * std::size_t(D)) throw InvalidInput("e_step: bias field size mismatch");
    const ExpectedLikelihood el(bundle);
    LogFactors f;
    f.loglik = RowMatrix::Zero(Eigen::Index(N), K);
    f.label = RowMatrix::Zero(Eigen::Index(N), K);
    f.pattern.resize(N);
    VectorXd x(D);
    for (std::size_t j = 0; j < N; ++j) {
        const unsigned pat = data.observed_pattern(j);
        f.pattern[j] = pat;
        if (pat == 0) continue;
        const auto& obs = el.terms(pat, 0).obs;
        x.resize(Eigen::Index(obs.size()));
        double log_vol = 0.0;
        for (std::size_t r = 0; r < obs.size(); ++r) {
            const double b = bias[std::size_t(obs[r]) * N + j];
            x(Eigen::Index(r)) = b * data.at(j, obs[r]);
            log_vol += std::log(b);
        }
        for (int k = 0; k < K; ++k) f.loglik(Eigen::Index(j), k) = el.log_likelihood(pat, k, x) + log_vol;
    }
    if (labels != nullptr) {
        if (labels->labels.size() != N) throw InvalidInput("e_step: label volume size mismatch");
        const LabelMap identity = LabelMap::identity(K);
        const LabelMap& map = label_map != nullptr ? *label_map : identity;
        for (std::size_t j = 0; j < N; ++j) {
            const int l = labels->labels[j];
            if (l <= 0) continue;
            for (int k = 0; k < K; ++k) f.label(Eigen::Index(j), k) = map.log_likelihood(l, k, K, labels->zeta);
        }
    }
    return f;
}

MixtureTerms terms_from_factors(const LogFactors& f, const RowMatrix& prior_field, const Responsibilities& gamma)
{
    MixtureTerms t;
    const Eigen::Index N = gamma.rows();
    const Eigen::Index K = gamma.cols();
    for (Eigen::Index j = 0; j < N; ++j)
        for (Eigen::Index k = 0; k < K; ++k) {
            const double g = gamma(j, k);
            if (g <= 0.0) continue;
            t.data += g * f.loglik(j, k);
            t.prior_z += g * std::log(prior_field(j, k));
            t.labels += g * f.label(j, k);
            t.entropy -= g * std::log(g);
        }
    return t;
}

}  // namespace

double GaussWishart::expected_logdet() const
{
    const int D = dim();
    double s = D * std::numbers::ln2 + log_det_spd(W);
    for (int d = 1; d <= D; ++d) s += boost::math::digamma(0.5 * (nu + 1 - d));
    return s;
}

void GaussWishart::validate() const
{
    const int D = dim();
    if (D < 1) throw InvalidInput("GaussWishart: empty mean");
    if (W.rows() != D || W.cols() != D) throw InvalidInput("GaussWishart: scale matrix shape mismatch");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidInput("GaussWishart: beta must be positive");
    if (!(nu > D - 1) || !std::isfinite(nu)) throw InvalidInput("GaussWishart: nu must exceed D - 1");
    if (!m.allFinite() || !W.allFinite()) throw InvalidInput("GaussWishart: non-finite parameters");
    if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + W.cwiseAbs().maxCoeff()))
        throw InvalidInput("GaussWishart: scale matrix not symmetric");
    Eigen::LLT<MatrixXd> llt(W);
    if (llt.info() != Eigen::Success) throw InvalidInput("GaussWishart: scale matrix not positive definite");
}

void GaussWishartBundle::validate() const
{
    if (classes.empty()) throw InvalidInput("GaussWishartBundle: no classes");
    for (const auto& c : classes) {
        c.validate();
        if (c.dim() != dim()) throw InvalidInput("GaussWishartBundle: inconsistent dimensions");
    }
}

double kl_divergence(const GaussWishart& q, const GaussWishart& p)
{
    const int D = q.dim();
    const double elog = q.expected_logdet();
    const VectorXd dm = q.m - p.m;
    const double mean_part = 0.5 * D * std::log(q.beta / p.beta) - 0.5 * D + 0.5 * p.beta * D / q.beta +
                             0.5 * p.beta * q.nu * dm.dot(q.W * dm);
    const MatrixXd W0inv = p.W.inverse();
    const double wishart_part = log_wishart_norm(q.W, q.nu) - log_wishart_norm(p.W, p.nu) +
                                0.5 * (q.nu - p.nu) * elog - 0.5 * q.nu * D + 0.5 * q.nu * (W0inv * q.W).trace();
    return mean_part + wishart_part;
}

LabelMap LabelMap::identity(int K)
{
    LabelMap m;
    for (int k = 0; k < K; ++k) m.label_classes.push_back({k});
    return m;
}

double LabelMap::log_likelihood(int label, int k, int K, double zeta) const
{
    const auto& cls = label_classes.at(std::size_t(label - 1));
    const bool member = std::find(cls.begin(), cls.end(), k) != cls.end();
    if (member) return std::log(zeta);
    const double other = (1.0 - zeta) / double(K - 1);
    return other > 0.0 ? std::log(other) : kNegInf;
}

void LabelMap::validate(int K) const
{
    for (const auto& cls : label_classes) {
        if (cls.empty()) throw InvalidInput("LabelMap: a manual label maps to no class");
        for (int k : cls)
            if (k < 0 || k >= K) throw InvalidInput("LabelMap: class index out of range");
    }
}

RowMatrix warped_prior(const RowMatrix& pi_at_voxels, const VectorXd& weights)
{
    const Eigen::Index K = pi_at_voxels.cols();
    if (weights.size() != K) throw InvalidInput("warped_prior: weight count mismatch");
    if ((weights.array() <= 0.0).any()) throw InvalidInput("warped_prior: weights must be positive");
    RowMatrix out(pi_at_voxels.rows(), K);
    for (Eigen::Index j = 0; j < pi_at_voxels.rows(); ++j) {
        double den = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) {
            out(j, k) = weights(k) * std::max(pi_at_voxels(j, k), kPriorFloor);
            den += out(j, k);
        }
        out.row(j) /= den;
    }
    return out;
}

ExpectedLikelihood::ExpectedLikelihood(const GaussWishartBundle& bundle) : K_(bundle.K()), D_(bundle.dim())
{
    if (D_ < 1 || D_ > 16) throw InvalidInput("ExpectedLikelihood: unsupported channel count");
    const unsigned patterns = 1u << D_;
    table_.resize(std::size_t(patterns) * std::size_t(K_));
    for (unsigned pat = 1; pat < patterns; ++pat) {
        std::vector<int> obs, hid;
        for (int d = 0; d < D_; ++d) (pat & (1u << d) ? obs : hid).push_back(d);
        for (int k = 0; k < K_; ++k) {
            const GaussWishart& g = bundle.classes[std::size_t(k)];
            Terms t;
            t.obs = obs;
            t.hid = hid;
            t.mean_obs = sub(g.m, obs);
            const double elog = g.expected_logdet();
            const MatrixXd Woo = sub(g.W, obs, obs);
            if (hid.empty()) {
                t.precision_obs = g.nu * Woo;
                t.constant = 0.5 * elog - 0.5 * D_ * kLog2Pi - 0.5 * D_ / g.beta;
            } else {
                const MatrixXd Whh = sub(g.W, hid, hid);
                const MatrixXd Who = sub(g.W, hid, obs);
                const Eigen::LLT<MatrixXd> llt(Whh);
                t.coupling = llt.solve(Who);
                t.precision_obs = g.nu * (Woo - Who.transpose() * t.coupling);
                t.mean_hid = sub(g.m, hid);
                t.precision_hid = g.nu * Whh;
                t.constant = 0.5 * (elog - log_det_spd(t.precision_hid)) - 0.5 * double(obs.size()) * kLog2Pi -
                             0.5 * D_ / g.beta;
            }
            table_[std::size_t(pat) * std::size_t(K_) + std::size_t(k)] = std::move(t);
        }
    }
}

const ExpectedLikelihood::Terms& ExpectedLikelihood::terms(unsigned pattern, int k) const
{
    if (pattern == 0) throw InvalidInput("ExpectedLikelihood: voxel has no observed channel");
    return table_[std::size_t(pattern) * std::size_t(K_) + std::size_t(k)];
}

double ExpectedLikelihood::log_likelihood(unsigned pattern, int k, const VectorXd& x_obs) const
{
    const Terms& t = terms(pattern, k);
    const VectorXd r = x_obs - t.mean_obs;
    return t.constant - 0.5 * r.dot(t.precision_obs * r);
}

BiasField unit_bias(const VolumeGrid& data) { return BiasField(data.voxels() * std::size_t(data.channels()), 1.0); }

RowMatrix log_data_factor(const VolumeGrid& data, const BiasField& bias, const GaussWishartBundle& bundle,
                          const LabelData* labels, const LabelMap* label_map)
{
    const LogFactors f = compute_log_factors(data, bias, bundle, labels, label_map);
    return f.loglik + f.label;
}

EStepResult e_step(const VolumeGrid& data, const BiasField& bias, const RowMatrix& prior_field,
                   const GaussWishartBundle& bundle, const LabelData* labels, const LabelMap* label_map)
{
    const LogFactors f = compute_log_factors(data, bias, bundle, labels, label_map);
    const Eigen::Index N = f.loglik.rows();
    const Eigen::Index K = f.loglik.cols();
    if (prior_field.rows() != N || prior_field.cols() != K) throw InvalidInput("e_step: prior field shape mismatch");
    EStepResult res;
    res.gamma.resize(N, K);
    std::vector<double> logit(static_cast<std::size_t>(K));
    for (Eigen::Index j = 0; j < N; ++j) {
        double mx = kNegInf;
        for (Eigen::Index k = 0; k < K; ++k) {
            logit[std::size_t(k)] = f.loglik(j, k) + f.label(j, k) + std::log(prior_field(j, k));
            mx = std::max(mx, logit[std::size_t(k)]);
        }
        if (!std::isfinite(mx)) {
            res.gamma.row(j).setConstant(1.0 / double(K));
            ++res.degenerate;
            continue;
        }
        double den = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) {
            const double e = std::exp(logit[std::size_t(k)] - mx);
            res.gamma(j, k) = e;
            den += e;
        }
        res.gamma.row(j) /= den;
    }
    res.terms = terms_from_factors(f, prior_field, res.gamma);
    return res;
}

MixtureTerms mixture_terms(const VolumeGrid& data, const BiasField& bias, const RowMatrix& prior_field,
                           const GaussWishartBundle& bundle, const Responsibilities& gamma, const LabelData* labels,
                           const LabelMap* label_map)
{
    const LogFactors f = compute_log_factors(data, bias, bundle, labels, label_map);
    return terms_from_factors(f, prior_field, gamma);
}

MissingPosterior infer_missing(const VectorXd& observed, unsigned pattern, const GaussWishartBundle& bundle)
{
    if (pattern == 0) throw InvalidInput("infer_missing: no observed channel at this voxel");
    const ExpectedLikelihood el(bundle);
    MissingPosterior mp;
    for (int k = 0; k < bundle.K(); ++k) {
        const auto& t = el.terms(pattern, k);
        if (observed.size() != Eigen::Index(t.obs.size()))
            throw InvalidInput("infer_missing: observed vector does not match the pattern");
        if (t.hid.empty()) {
            mp.mean.emplace_back();
            mp.precision.emplace_back();
            continue;
        }
        mp.mean.push_back(t.mean_hid - t.coupling * (observed - t.mean_obs));
        mp.precision.push_back(t.precision_hid);
    }
    return mp;
}

SufficientStats SufficientStats::zeros(int K, int D)
{
    SufficientStats s;
    s.s0.assign(std::size_t(K), 0.0);
    s.s1.assign(std::size_t(K), VectorXd::Zero(D));
    s.S2.assign(std::size_t(K), MatrixXd::Zero(D, D));
    return s;
}

SufficientStats sufficient_stats(const VolumeGrid& data, const BiasField& bias, const Responsibilities& gamma,
                                 const GaussWishartBundle& posterior)
{
    const int K = posterior.K();
    const int D = data.channels();
    const std::size_t N = data.voxels();
    if (gamma.rows() != Eigen::Index(N) || gamma.cols() != K)
        throw InvalidInput("sufficient_stats: responsibility shape mismatch");
    const ExpectedLikelihood el(posterior);
    SufficientStats st = SufficientStats::zeros(K, D);

    // Hidden-block covariances depend only on (pattern, class).
    const unsigned patterns = 1u << D;
    std::vector<MatrixXd> hidden_cov(std::size_t(patterns) * std::size_t(K));
    for (unsigned pat = 1; pat < patterns; ++pat)
        for (int k = 0; k < K; ++k) {
            const auto& t = el.terms(pat, k);
            MatrixXd C = MatrixXd::Zero(D, D);
            if (!t.hid.empty()) {
                const MatrixXd Pinv = t.precision_hid.inverse();
                for (std::size_t a = 0; a < t.hid.size(); ++a)
                    for (std::size_t b = 0; b < t.hid.size(); ++b)
                        C(t.hid[a], t.hid[b]) = Pinv(Eigen::Index(a), Eigen::Index(b));
            }
            hidden_cov[std::size_t(pat) * std::size_t(K) + std::size_t(k)] = std::move(C);
        }

    VectorXd xo, x(D);
    for (std::size_t j = 0; j < N; ++j) {
        const unsigned pat = data.observed_pattern(j);
        if (pat == 0) continue;
        const auto& t0 = el.terms(pat, 0);
        xo.resize(Eigen::Index(t0.obs.size()));
        for (std::size_t r = 0; r < t0.obs.size(); ++r)
            xo(Eigen::Index(r)) = bias[std::size_t(t0.obs[r]) * N + j] * data.at(j, t0.obs[r]);
        for (int k = 0; k < K; ++k) {
            const double g = gamma(Eigen::Index(j), k);
            if (g == 0.0) continue;
            const auto& t = el.terms(pat, k);
            for (std::size_t r = 0; r < t.obs.size(); ++r) x(t.obs[r]) = xo(Eigen::Index(r));
            if (!t.hid.empty()) {
                const VectorXd n = t.mean_hid - t.coupling * (xo - t.mean_obs);
                for (std::size_t r = 0; r < t.hid.size(); ++r) x(t.hid[r]) = n(Eigen::Index(r));
            }
            st.s0[std::size_t(k)] += g;
            st.s1[std::size_t(k)] += g * x;
            st.S2[std::size_t(k)] += g * (x * x.transpose());
            if (!t.hid.empty()) st.S2[std::size_t(k)] += g * hidden_cov[std::size_t(pat) * std::size_t(K) + std::size_t(k)];
        }
    }
    return st;
}

int make_positive_definite(MatrixXd& W)
{
    W = 0.5 * (W + W.transpose());
    const double jitter = 1e-8 * W.trace() / double(W.rows());
    for (int attempt = 0; attempt <= 3; ++attempt) {
        Eigen::LLT<MatrixXd> llt(W);
        if (llt.info() == Eigen::Success) return attempt;
        if (attempt == 3) break;
        W.diagonal().array() += std::abs(jitter) > 0.0 ? std::abs(jitter) : 1e-12;
    }
    throw InvalidInput("scale matrix is not positive definite after jitter");
}

GaussWishartBundle m_step(const SufficientStats& stats, const GaussWishartBundle& prior)
{
    GaussWishartBundle post = prior;
    for (int k = 0; k < prior.K(); ++k) {
        const GaussWishart& p = prior.classes[std::size_t(k)];
        const double s0 = stats.s0[std::size_t(k)];
        if (s0 < 1e-12) continue;
        const VectorXd& s1 = stats.s1[std::size_t(k)];
        const MatrixXd& S2 = stats.S2[std::size_t(k)];
        GaussWishart& q = post.classes[std::size_t(k)];
        q.beta = p.beta + s0;
        q.m = (p.beta * p.m + s1) / q.beta;
        q.nu = p.nu + s0;
        const VectorXd xbar = s1 / s0;
        const VectorXd d = xbar - p.m;
        MatrixXd Winv = p.W.inverse() + (S2 - s1 * s1.transpose() / s0) + (p.beta * s0 / q.beta) * (d * d.transpose());
        Winv = 0.5 * (Winv + Winv.transpose());
        make_positive_definite(Winv);
        q.W = Winv.inverse();
        q.W = 0.5 * (q.W + q.W.transpose());
        make_positive_definite(q.W);
    }
    return post;
}

double gauss_wishart_bound(const GaussWishartBundle& posterior, const GaussWishartBundle& prior)
{
    double s = 0.0;
    for (int k = 0; k < posterior.K(); ++k)
        s -= kl_divergence(posterior.classes[std::size_t(k)], prior.classes[std::size_t(k)]);
    return s;
}

double tissue_weight_objective(const Responsibilities& gamma, const RowMatrix& pi_at_voxels, const VectorXd& w)
{
    const RowMatrix s = warped_prior(pi_at_voxels, w);
    double f = 0.0;
    for (Eigen::Index j = 0; j < gamma.rows(); ++j)
        for (Eigen::Index k = 0; k < gamma.cols(); ++k)
            if (gamma(j, k) > 0.0) f += gamma(j, k) * std::log(s(j, k));
    return f;
}

WeightUpdate update_tissue_weights(const Responsibilities& gamma, const RowMatrix& pi_at_voxels,
                                   const VectorXd& initial, int max_iterations)
{
    const Eigen::Index K = gamma.cols();
    const Eigen::Index N = gamma.rows();
    if (pi_at_voxels.rows() != N || pi_at_voxels.cols() != K || initial.size() != K)
        throw InvalidInput("update_tissue_weights: shape mismatch");
    RowMatrix pi = pi_at_voxels;
    for (Eigen::Index j = 0; j < N; ++j)
        for (Eigen::Index k = 0; k < K; ++k) pi(j, k) = std::max(pi(j, k), kPriorFloor);
    const VectorXd mass = gamma.colwise().sum().transpose();

    WeightUpdate out;
    out.before = tissue_weight_objective(gamma, pi, initial);
    VectorXd w = initial;
    for (int it = 0; it < max_iterations; ++it) {
        VectorXd den = VectorXd::Zero(K);
        for (Eigen::Index j = 0; j < N; ++j) {
            const double s = pi.row(j).dot(w);
            den += pi.row(j).transpose() / s;
        }
        VectorXd next(K);
        for (Eigen::Index k = 0; k < K; ++k) next(k) = std::max(mass(k) / den(k), 1e-6);
        next *= double(K) / next.sum();
        const double change = ((next - w).array().abs() / w.array()).maxCoeff();
        w = next;
        out.iterations = it + 1;
        if (change < 1e-6) break;
    }
    out.weights = w;
    out.after = tissue_weight_objective(gamma, pi, w);
    return out;
}

GaussWishartBundle fit_intensity_hyperpriors(const std::vector<GaussWishartBundle>& subjects)
{
    constexpr double kCap = 1e6;
    if (subjects.size() < 2) throw InvalidInput("fit_intensity_hyperpriors: need at least two subjects");
    const int K = subjects.front().K();
    const int D = subjects.front().dim();
    const double M = double(subjects.size());
    GaussWishartBundle prior = subjects.front();
    for (int k = 0; k < K; ++k) {
        VectorXd mean = VectorXd::Zero(D);
        MatrixXd prec = MatrixXd::Zero(D, D);
        for (const auto& s : subjects) {
            const auto& c = s.classes[std::size_t(k)];
            mean += c.m / M;
            prec += c.expected_precision() / M;
        }
        double mean_var = 0.0;
        VectorXd prec_var = VectorXd::Zero(D);
        for (const auto& s : subjects) {
            const auto& c = s.classes[std::size_t(k)];
            mean_var += (c.m - mean).squaredNorm() / (M - 1.0);
            const MatrixXd E = c.expected_precision();
            for (int d = 0; d < D; ++d) prec_var(d) += (E(d, d) - prec(d, d)) * (E(d, d) - prec(d, d)) / (M - 1.0);
        }
        // Wishart diagonal entries satisfy Var = 2 E^2 / nu.
        double nu = 0.0;
        for (int d = 0; d < D; ++d)
            nu += (prec_var(d) > 0.0 ? 2.0 * prec(d, d) * prec(d, d) / prec_var(d) : kCap) / double(D);
        nu = std::clamp(nu, double(D) + 2.0, kCap);

        GaussWishart& p = prior.classes[std::size_t(k)];
        p.m = mean;
        p.nu = nu;
        p.W = prec / nu;
        make_positive_definite(p.W);
        // Prior predictive covariance of the mean is W^-1 / (beta (nu - D - 1)).
        const double expected_cov_trace = p.W.inverse().trace() / (nu - D - 1.0);
        p.beta = mean_var > 0.0 ? std::clamp(expected_cov_trace / mean_var, 1e-6, kCap) : kCap;
    }
    return prior;
}

}  // namespace gatlas
