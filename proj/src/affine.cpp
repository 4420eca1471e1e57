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
#include "gatlas/affine.hpp"

#include <cmath>
#include <cstdio>

#include <Eigen/Cholesky>
#include <unsupported/Eigen/MatrixFunctions>

namespace gatlas {

Mat3 affine_generator(int p)
{
    Mat3 G = Mat3::Zero();
    switch (p) {
    case 0: G(1, 2) = -1; G(2, 1) = 1; break;
    case 1: G(0, 2) = 1; G(2, 0) = -1; break;
    case 2: G(0, 1) = -1; G(1, 0) = 1; break;
    case 3: G(0, 0) = 1; break;
    case 4: G(1, 1) = 1; break;
    case 5: G(2, 2) = 1; break;
    case 6: G(0, 1) = G(1, 0) = 1; break;
    case 7: G(0, 2) = G(2, 0) = 1; break;
    case 8: G(1, 2) = G(2, 1) = 1; break;
    default: throw InvalidInput("affine_generator: index out of range");
    }
    return G;
}

Mat3 affine_algebra(const Vector9d& a)
{
    Mat3 Q = Mat3::Zero();
    for (int p = 0; p < 9; ++p) Q += a(p) * affine_generator(p);
    return Q;
}

Mat3 exp_map(const Vector9d& a)
{
    if (!a.allFinite()) throw InvalidInput("exp_map: non-finite parameters");
    const Mat3 Q = affine_algebra(a);
    return Q.exp();
}

std::array<Mat3, 9> exp_map_derivatives(const Vector9d& a)
{
    const Mat3 Q = affine_algebra(a);
    std::array<Mat3, 9> d;
    Eigen::Matrix<double, 6, 6> M = Eigen::Matrix<double, 6, 6>::Zero();
    M.topLeftCorner<3, 3>() = Q;
    M.bottomRightCorner<3, 3>() = Q;
    for (int p = 0; p < 9; ++p) {
        M.topRightCorner<3, 3>() = affine_generator(p);
        const Eigen::Matrix<double, 6, 6> E = M.exp();
        d[std::size_t(p)] = E.topRightCorner<3, 3>();
    }
    return d;
}

void AffineParams::validate() const
{
    if (!a.allFinite() || !t.allFinite() || !prior_precision.allFinite())
        throw InvalidInput("AffineParams: non-finite entries");
    if ((prior_precision - prior_precision.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw InvalidInput("AffineParams: prior precision not symmetric");
    const Eigen::SelfAdjointEigenSolver<Matrix9d> es(prior_precision);
    if (es.eigenvalues().minCoeff() < -1e-12) throw InvalidInput("AffineParams: prior precision not PSD");
}

Matrix9d AffineParams::default_precision(double rotation, double zoom, double shear)
{
    Vector9d d;
    d << rotation, rotation, rotation, zoom, zoom, zoom, shear, shear, shear;
    return d.asDiagonal();
}

double affine_penalty(const AffineParams& p) { return -0.5 * p.a.dot(p.prior_precision * p.a); }

std::vector<Vec3> template_points(const SpatialFrame& frame, const Mat3& T, const Vec3& t, const VectorField& phi)
{
    std::vector<Vec3> pts(phi.size());
    for (std::size_t n = 0; n < phi.size(); ++n) pts[n] = frame.to_template(T, t, phi.v[n]);
    return pts;
}

double affine_objective(const AffineContext& ctx, const AffineParams& p)
{
    const auto pts = template_points(ctx.frame, p.matrix(), p.t, *ctx.phi);
    const AtlasSample s = sample_atlas(*ctx.atlas, pts, false);
    return matching_value(*ctx.gamma, warped_prior(s.pi, ctx.weights)) + affine_penalty(p);
}

AffineDerivatives affine_grad_hess(const AffineContext& ctx, const AffineParams& p)
{
    const Mat3 T = p.matrix();
    const auto dT = exp_map_derivatives(p.a);
    const auto pts = template_points(ctx.frame, T, p.t, *ctx.phi);
    const AtlasSample s = sample_atlas(*ctx.atlas, pts, true);
    const MatchingTerms m = matching_terms(*ctx.gamma, s, ctx.weights, true);

    const Mat3 Dt_inv = ctx.frame.template_scale().inverse();
    const Mat3 Ds = ctx.frame.subject_scale();
    const Vec3 cs = ctx.frame.subject_center();
    std::array<Mat3, 9> dxi;  // Dt^-1 dT/da_p
    for (int q = 0; q < 9; ++q) dxi[std::size_t(q)] = Dt_inv * dT[std::size_t(q)];

    AffineDerivatives out;
    out.value = m.value + affine_penalty(p);
    out.gradient.setZero();
    out.hessian.setZero();
    Eigen::Matrix<double, 3, 12> J;
    J.rightCols<3>() = Dt_inv;
    for (std::size_t n = 0; n < pts.size(); ++n) {
        const Vec3 q = Ds * (ctx.phi->v[n] - cs);
        for (int r = 0; r < 9; ++r) J.col(r) = dxi[std::size_t(r)] * q;
        out.gradient += J.transpose() * m.grad[n];
        out.hessian += J.transpose() * m.hess[n] * J;
    }
    out.gradient.head<9>() -= p.prior_precision * p.a;
    out.hessian.topLeftCorner<9, 9>() += p.prior_precision;
    out.hessian = 0.5 * (out.hessian + out.hessian.transpose()).eval();
    return out;
}

AffineUpdate gauss_newton_affine_update(const AffineContext& ctx, const AffineParams& p)
{
    AffineUpdate res;
    res.params = p;
    const AffineDerivatives d = affine_grad_hess(ctx, p);
    res.before = d.value;
    res.after = d.value;
    // Damping is scaled per parameter so rotations (radians) and
    // translations (mm) are treated alike.
    const Vector12d scale = d.hessian.diagonal().cwiseMax(1e-12 * d.hessian.diagonal().maxCoeff()).cwiseMax(1e-12);
    double lambda = 1e-6;
    for (int attempt = 0; attempt <= 8; ++attempt, lambda *= 10.0) {
        Matrix12d H = d.hessian;
        H.diagonal() += lambda * scale;
        const Eigen::LDLT<Matrix12d> ldlt(H);
        const Vector12d step = ldlt.solve(d.gradient);
        res.attempts = attempt + 1;
        if (!step.allFinite()) continue;
        AffineParams trial = p;
        trial.a += step.head<9>();
        trial.t += step.tail<3>();
        const double value = affine_objective(ctx, trial);
        if (std::isfinite(value) && value >= res.before) {
            res.params = trial;
            res.after = value;
            res.accepted = true;
            res.step_norm = step.norm();
            break;
        }
    }
    return res;
}

Vec3 centroid_translation(const VolumeGrid& subject, const TissueAtlas& atlas, const VectorXd& brightness,
                          const SpatialFrame& frame)
{
    const int K = atlas.K();
    if (brightness.size() != K) throw InvalidInput("centroid_translation: brightness size mismatch");
    const Mat3 Ds = frame.subject_scale();
    const Mat3 Dt = frame.template_scale();
    const Vec3 cs = frame.subject_center();
    const Vec3 ct = frame.template_center();

    Vec3 sub = Vec3::Zero();
    double sw = 0.0;
    for (std::size_t j = 0; j < subject.voxels(); ++j) {
        double v = 0.0;
        for (int c = 0; c < subject.channels(); ++c)
            if (!subject.missing(j, c)) v += std::max(subject.at(j, c), 0.0);
        const auto q = subject.dims().coords(j);
        sub += v * (Ds * (Vec3(q[0], q[1], q[2]) - cs));
        sw += v;
    }
    if (sw > 0.0) sub /= sw;

    Vec3 tpl = Vec3::Zero();
    double tw = 0.0;
    for (std::size_t j = 0; j < atlas.voxels(); ++j) {
        const double v = std::max(atlas.pi.row(Eigen::Index(j)).dot(brightness), 0.0);
        const auto q = atlas.dims.coords(j);
        tpl += v * (Dt * (Vec3(q[0], q[1], q[2]) - ct));
        tw += v;
    }
    if (tw > 0.0) tpl /= tw;
    return tpl - sub;
}

std::string format_affine(const SpatialFrame& frame, const AffineParams& p)
{
    const Mat3 T = p.matrix();
    const Vec3 cs = frame.subject_scale() * frame.subject_center();
    const Vec3 ct = frame.template_scale() * frame.template_center();
    const Vec3 off = p.t + ct - T * cs;
    std::string out;
    char buf[128];
    for (int r = 0; r < 3; ++r) {
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g\n", T(r, 0), T(r, 1), T(r, 2), off(r));
        out += buf;
    }
    out += "0 0 0 1\n";
    return out;
}

}  // namespace gatlas
