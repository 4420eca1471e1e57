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
#include "gatlas/template.hpp"

#include <cmath>

#include "gatlas/diffeo.hpp"
#include "gatlas/geometry.hpp"

namespace gatlas {

namespace {

double safe_log(double p) { return std::log(std::max(p, kPriorFloor)); }

bool inside(const Dims& d, const Vec3& y)
{
    for (int a = 0; a < 3; ++a)
        if (y(a) < -0.5 || y(a) > d[a] - 0.5) return false;
    return true;
}

}  // namespace

PushedStats PushedStats::zeros(Dims dims, int K)
{
    PushedStats s;
    s.dims = dims;
    s.N = RowMatrix::Zero(Eigen::Index(dims.count()), K);
    s.Wsum = RowMatrix::Zero(Eigen::Index(dims.count()), K);
    return s;
}

void PushedStats::add(const PushedStats& other)
{
    if (!(other.dims == dims) || other.K() != K()) throw InvalidInput("PushedStats: shape mismatch");
    N += other.N;
    Wsum += other.Wsum;
    mass.insert(mass.end(), other.mass.begin(), other.mass.end());
    weights.insert(weights.end(), other.weights.begin(), other.weights.end());
}

PushedStats push_responsibilities(const Responsibilities& gamma, const SubjectWarp& warp, const VectorXd& weights,
                                  const TissueAtlas& atlas)
{
    const SpatialFrame& f = warp.frame;
    const int K = atlas.K();
    if (gamma.cols() != K || weights.size() != K) throw InvalidInput("push_responsibilities: class count mismatch");
    if (gamma.rows() != Eigen::Index(f.subject_dims.count())) throw InvalidInput("push_responsibilities: gamma rows");
    if (!(f.template_dims == atlas.dims)) throw InvalidInput("push_responsibilities: template grid mismatch");
    if (warp.phi && warp.phi->forward.dims != f.subject_dims)
        throw InvalidInput("push_responsibilities: deformation grid mismatch");

    PushedStats s = PushedStats::zeros(atlas.dims, K);
    std::vector<double> mass(atlas.voxels(), 0.0);
    const double affine_det = f.linear_part(warp.T).determinant();
    if (!(affine_det > 0.0)) throw FoldoverError(0, affine_det);

    for (std::size_t j = 0; j < atlas.voxels(); ++j) {
        const auto q = atlas.dims.coords(j);
        const Vec3 x(q[0], q[1], q[2]);
        Vec3 y = f.to_subject(warp.T, warp.t, x);
        double jac = affine_det;
        if (warp.phi) {
            y = sample_periodic_map(warp.phi->inverse, y);
            if (!inside(f.subject_dims, y)) continue;
            const double jd = sample_scalar(warp.phi->jac_det, f.subject_dims, y);
            if (!(jd > 0.0)) throw FoldoverError(j, jd);
            jac *= jd;
        } else if (!inside(f.subject_dims, y)) {
            continue;
        }
        const double detinv = 1.0 / jac;
        const TrilinearStencil st(f.subject_dims, y);
        const auto row = atlas.pi.row(Eigen::Index(j));
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += weights(k) * std::max(row(k), kPriorFloor);
        double total = 0.0;
        for (int k = 0; k < K; ++k) {
            const double g = detinv * st.apply([&](std::size_t n) { return gamma(Eigen::Index(n), k); });
            s.N(Eigen::Index(j), k) = g;
            total += g;
        }
        mass[j] = total;
        for (int k = 0; k < K; ++k) s.Wsum(Eigen::Index(j), k) = total * weights(k) / denom;
    }
    s.mass.push_back(std::move(mass));
    s.weights.push_back(weights);
    return s;
}

double dirichlet_log_prior(const RowMatrix& pi, const VectorXd& alpha0)
{
    double logC = std::lgamma(alpha0.sum());
    for (Eigen::Index k = 0; k < alpha0.size(); ++k) logC -= std::lgamma(alpha0(k));
    double s = double(pi.rows()) * logC;
    for (Eigen::Index j = 0; j < pi.rows(); ++j)
        for (Eigen::Index k = 0; k < pi.cols(); ++k) s += (alpha0(k) - 1.0) * safe_log(pi(j, k));
    return s;
}

double template_voxel_objective(const PushedStats& stats, const VectorXd& alpha0, std::size_t j,
                                const Eigen::Ref<const VectorXd>& pi_j)
{
    const int K = stats.K();
    const auto jj = Eigen::Index(j);
    double f = 0.0;
    for (int k = 0; k < K; ++k) f += (stats.N(jj, k) + alpha0(k) - 1.0) * safe_log(pi_j(k));
    for (std::size_t i = 0; i < stats.mass.size(); ++i) {
        const double m = stats.mass[i][j];
        if (m == 0.0) continue;
        double d = 0.0;
        for (int k = 0; k < K; ++k) d += stats.weights[i](k) * std::max(pi_j(k), kPriorFloor);
        f -= m * std::log(d);
    }
    return f;
}

double template_objective(const PushedStats& stats, const VectorXd& alpha0, const RowMatrix& pi)
{
    double f = 0.0;
    for (Eigen::Index j = 0; j < pi.rows(); ++j)
        f += template_voxel_objective(stats, alpha0, std::size_t(j), pi.row(j).transpose());
    return f;
}

TemplateUpdate update_template_unit_weights(const PushedStats& stats, const VectorXd& alpha0)
{
    const int K = stats.K();
    if (alpha0.size() != K || (alpha0.array() < 1.0).any()) throw InvalidInput("template update: alpha0 must be >= 1");
    TemplateUpdate u;
    u.pi.resize(stats.N.rows(), K);
    for (Eigen::Index j = 0; j < stats.N.rows(); ++j) {
        const double den = (stats.N.row(j).transpose() + alpha0).sum() - double(K);
        if (!(den > 0.0) || !std::isfinite(den)) {
            u.pi.row(j).setConstant(1.0 / K);
            ++u.fallback_rows;
            continue;
        }
        for (int k = 0; k < K; ++k) u.pi(j, k) = (stats.N(j, k) + alpha0(k) - 1.0) / den;
    }
    return u;
}

TemplateUpdate update_template_weighted(const PushedStats& stats, const VectorXd& alpha0, const RowMatrix& previous)
{
    const int K = stats.K();
    if (alpha0.size() != K || (alpha0.array() < 1.0).any()) throw InvalidInput("template update: alpha0 must be >= 1");
    if (previous.rows() != stats.N.rows() || previous.cols() != K) throw InvalidInput("template update: shape mismatch");
    TemplateUpdate u;
    u.pi = previous;
    VectorXd bar(K);
    for (Eigen::Index j = 0; j < stats.N.rows(); ++j) {
        const auto jj = std::size_t(j);
        const VectorXd old = previous.row(j).transpose();
        const double before = template_voxel_objective(stats, alpha0, jj, old);
        u.before += before;
        bool ok = stats.Wsum.row(j).minCoeff() > 0.0;
        if (ok) {
            for (int k = 0; k < K; ++k) bar(k) = (stats.N(j, k) + alpha0(k) - 1.0) / stats.Wsum(j, k);
            const double s = bar.sum();
            ok = std::isfinite(s) && s > 0.0 && bar.allFinite();
            if (ok) bar /= s;
            else ++u.fallback_rows;
        }
        if (!ok) {
            u.after += before;
            continue;
        }
        const double after = template_voxel_objective(stats, alpha0, jj, bar);
        // Rounding slack so the exact unit-weight maximiser is never rejected.
        if (after >= before - 1e-13 * (1.0 + std::abs(before))) {
            u.pi.row(j) = bar.transpose();
            u.after += after;
        } else {
            ++u.retained_rows;
            u.after += before;
        }
    }
    return u;
}

std::vector<double> gaussian_kernel(double fwhm_voxels)
{
    if (!(fwhm_voxels > 0.0)) return {1.0};
    const double sigma = fwhm_voxels / std::sqrt(8.0 * std::log(2.0));
    const int r = std::max(1, int(std::ceil(4.0 * sigma)));
    std::vector<double> w(std::size_t(2 * r + 1));
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += w[std::size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : w) x /= s;
    return w;
}

RowMatrix smooth_template(const RowMatrix& pi, const Dims& dims, const Spacing& spacing, double fwhm)
{
    if (fwhm < 0.0) throw InvalidInput("smooth_template: negative fwhm");
    if (pi.rows() != Eigen::Index(dims.count())) throw InvalidInput("smooth_template: shape mismatch");
    RowMatrix out = pi;
    if (fwhm > 0.0) {
        RowMatrix tmp(pi.rows(), pi.cols());
        for (int a = 0; a < 3; ++a) {
            const std::vector<double> w = gaussian_kernel(fwhm / spacing[std::size_t(a)]);
            const int r = int(w.size() / 2);
            if (r == 0 || dims[a] == 1) continue;
            for (std::size_t n = 0; n < dims.count(); ++n) {
                auto q = dims.coords(n);
                tmp.row(Eigen::Index(n)).setZero();
                const int c = q[std::size_t(a)];
                for (int o = -r; o <= r; ++o) {
                    q[std::size_t(a)] = std::clamp(c + o, 0, dims[a] - 1);
                    tmp.row(Eigen::Index(n)) += w[std::size_t(o + r)] * out.row(Eigen::Index(dims.index(q[0], q[1], q[2])));
                }
            }
            out.swap(tmp);
        }
    }
    const double K = double(pi.cols());
    for (Eigen::Index j = 0; j < out.rows(); ++j) {
        out.row(j) = out.row(j).cwiseMax(0.0);
        const double s = out.row(j).sum();
        if (s > 0.0) out.row(j) = (kPriorFloor + (1.0 - K * kPriorFloor) / s * out.row(j).array()).matrix();
        else out.row(j).setConstant(1.0 / K);
    }
    return out;
}

RowMatrix dirichlet_posterior(const PushedStats& stats, const VectorXd& alpha0)
{
    return stats.N.rowwise() + alpha0.transpose();
}

}  // namespace gatlas
