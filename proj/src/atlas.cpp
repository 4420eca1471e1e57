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
#include "gatlas/atlas.hpp"

#include <cmath>

#include "gatlas/geometry.hpp"

namespace gatlas {

TissueAtlas TissueAtlas::uniform(Dims dims, Spacing spacing, int K, double alpha0)
{
    TissueAtlas a;
    a.dims = dims;
    a.spacing = spacing;
    a.pi = RowMatrix::Constant(Eigen::Index(dims.count()), K, 1.0 / double(K));
    a.alpha0 = VectorXd::Constant(K, alpha0);
    return a;
}

void TissueAtlas::validate() const
{
    if (pi.rows() != Eigen::Index(dims.count()) || pi.cols() < 1) throw InvalidInput("TissueAtlas: shape mismatch");
    if (alpha0.size() != pi.cols()) throw InvalidInput("TissueAtlas: alpha0 size mismatch");
    if ((alpha0.array() < 1.0).any()) throw InvalidInput("TissueAtlas: alpha0 entries must be >= 1");
    if (!pi.allFinite() || (pi.array() < 0.0).any()) throw InvalidInput("TissueAtlas: negative or non-finite entries");
    if (((pi.rowwise().sum().array() - 1.0).abs() > 1e-9).any()) throw InvalidInput("TissueAtlas: rows off the simplex");
}

Vec3 SpatialFrame::subject_center() const
{
    return Vec3(0.5 * (subject_dims.nx - 1), 0.5 * (subject_dims.ny - 1), 0.5 * (subject_dims.nz - 1));
}

Vec3 SpatialFrame::template_center() const
{
    return Vec3(0.5 * (template_dims.nx - 1), 0.5 * (template_dims.ny - 1), 0.5 * (template_dims.nz - 1));
}

Mat3 SpatialFrame::subject_scale() const
{
    return Vec3(subject_spacing[0], subject_spacing[1], subject_spacing[2]).asDiagonal();
}

Mat3 SpatialFrame::template_scale() const
{
    return Vec3(template_spacing[0], template_spacing[1], template_spacing[2]).asDiagonal();
}

Vec3 SpatialFrame::to_template(const Mat3& T, const Vec3& t, const Vec3& y) const
{
    const Vec3 mm = T * (subject_scale() * (y - subject_center())) + t;
    return template_scale().inverse() * mm + template_center();
}

Vec3 SpatialFrame::to_subject(const Mat3& T, const Vec3& t, const Vec3& x) const
{
    const Vec3 mm = T.inverse() * (template_scale() * (x - template_center()) - t);
    return subject_scale().inverse() * mm + subject_center();
}

Mat3 SpatialFrame::linear_part(const Mat3& T) const { return template_scale().inverse() * T * subject_scale(); }

AtlasSample sample_atlas(const TissueAtlas& atlas, const std::vector<Vec3>& points, bool with_gradient)
{
    const int K = atlas.K();
    AtlasSample s;
    s.pi.resize(Eigen::Index(points.size()), K);
    if (with_gradient) s.grad_log.assign(points.size() * std::size_t(K), Vec3::Zero());
    for (std::size_t n = 0; n < points.size(); ++n) {
        const TrilinearStencil st(atlas.dims, points[n], with_gradient);
        for (int k = 0; k < K; ++k) {
            auto at = [&](std::size_t i) { return atlas.pi(Eigen::Index(i), k); };
            const double v = st.apply(at);
            if (v > kPriorFloor) {
                s.pi(Eigen::Index(n), k) = v;
                if (with_gradient) s.grad_log[n * std::size_t(K) + std::size_t(k)] = st.apply_gradient(at) / v;
            } else {
                s.pi(Eigen::Index(n), k) = kPriorFloor;
            }
        }
    }
    return s;
}

double matching_value(const Responsibilities& gamma, const RowMatrix& prior)
{
    double v = 0.0;
    for (Eigen::Index j = 0; j < gamma.rows(); ++j)
        for (Eigen::Index k = 0; k < gamma.cols(); ++k)
            if (gamma(j, k) > 0.0) v += gamma(j, k) * std::log(prior(j, k));
    return v;
}

MatchingTerms matching_terms(const Responsibilities& gamma, const AtlasSample& sample, const VectorXd& weights,
                             bool with_derivatives)
{
    const Eigen::Index N = gamma.rows();
    const int K = int(gamma.cols());
    if (sample.pi.rows() != N || sample.pi.cols() != K) throw InvalidInput("matching_terms: shape mismatch");
    MatchingTerms m;
    m.prior = warped_prior(sample.pi, weights);
    m.value = matching_value(gamma, m.prior);
    if (!with_derivatives) return m;
    if (sample.grad_log.size() != std::size_t(N) * std::size_t(K))
        throw InvalidInput("matching_terms: gradients were not sampled");
    m.grad.assign(std::size_t(N), Vec3::Zero());
    m.hess.assign(std::size_t(N), Mat3::Zero());
    for (Eigen::Index j = 0; j < N; ++j) {
        Vec3 g = Vec3::Zero(), mean = Vec3::Zero();
        Mat3 second = Mat3::Zero();
        for (int k = 0; k < K; ++k) {
            const Vec3& gk = sample.grad_log[std::size_t(j) * std::size_t(K) + std::size_t(k)];
            const double s = m.prior(j, k);
            g += (gamma(j, k) - s) * gk;
            mean += s * gk;
            second += s * gk * gk.transpose();
        }
        m.grad[std::size_t(j)] = g;
        m.hess[std::size_t(j)] = second - mean * mean.transpose();
    }
    return m;
}

}  // namespace gatlas
