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
#include "gatlas/bias.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>

namespace gatlas {

MatrixXd dct_basis(int n, int order)
{
    if (n < 1 || order < 1 || order > n) throw InvalidInput("dct_basis: order must lie in [1, n]");
    MatrixXd B(n, order);
    for (int m = 0; m < order; ++m) {
        const double s = std::sqrt((m == 0 ? 1.0 : 2.0) / double(n));
        for (int i = 0; i < n; ++i) B(i, m) = s * std::cos(std::numbers::pi * m * (i + 0.5) / double(n));
    }
    return B;
}

std::array<int, 3> default_bias_order(const Dims& dims, const Spacing& spacing, double min_period_mm)
{
    std::array<int, 3> order{};
    for (int a = 0; a < 3; ++a) {
        const double fov = dims[a] * spacing[std::size_t(a)];
        const int mmax = int(std::floor(2.0 * fov / min_period_mm + 1e-9));
        order[std::size_t(a)] = std::clamp(mmax + 1, 1, dims[a]);
    }
    return order;
}

void BiasModel::validate(const Dims& dims) const
{
    for (int a = 0; a < 3; ++a)
        if (order[std::size_t(a)] < 1 || order[std::size_t(a)] > dims[a])
            throw InvalidInput("BiasModel: basis order must lie in [1, dims]");
    if (prior_precision.size() != size()) throw InvalidInput("BiasModel: prior precision size mismatch");
    if ((prior_precision.array() < 0.0).any()) throw InvalidInput("BiasModel: negative prior precision");
    for (const auto& c : coeffs) {
        if (c.size() != size()) throw InvalidInput("BiasModel: coefficient count mismatch");
        if (!c.allFinite()) throw InvalidInput("BiasModel: non-finite coefficients");
    }
}

BiasModel make_bias_model(const Dims& dims, const Spacing& spacing, int channels, double strength,
                          std::array<int, 3> order)
{
    const auto def = default_bias_order(dims, spacing);
    BiasModel m;
    for (int a = 0; a < 3; ++a)
        m.order[std::size_t(a)] = order[std::size_t(a)] > 0 ? order[std::size_t(a)] : def[std::size_t(a)];
    m.coeffs.assign(std::size_t(channels), VectorXd::Zero(m.size()));
    m.prior_precision.resize(m.size());
    int idx = 0;
    for (int k = 0; k < m.order[2]; ++k)
        for (int j = 0; j < m.order[1]; ++j)
            for (int i = 0; i < m.order[0]; ++i, ++idx) {
                const int f[3] = {i, j, k};
                double lambda = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double w = std::numbers::pi * f[a] / (dims[a] * spacing[std::size_t(a)]);
                    lambda += w * w;
                }
                m.prior_precision(idx) = strength * lambda * lambda;
            }
    m.validate(dims);
    return m;
}

BiasBasis::BiasBasis(const Dims& dims, const std::array<int, 3>& order) : dims_(dims)
{
    for (int a = 0; a < 3; ++a) axis_[std::size_t(a)] = dct_basis(dims[a], order[std::size_t(a)]);
}

std::vector<double> BiasBasis::log_field(const VectorXd& c) const
{
    const int m0 = int(axis_[0].cols()), m1 = int(axis_[1].cols()), m2 = int(axis_[2].cols());
    if (c.size() != m0 * m1 * m2) throw InvalidInput("BiasBasis: coefficient count mismatch");
    // Separable evaluation: contract z, then y, then x.
    const int nx = dims_.nx, ny = dims_.ny, nz = dims_.nz;
    std::vector<double> t1(std::size_t(m0) * m1 * nz, 0.0);
    for (int kz = 0; kz < nz; ++kz)
        for (int b = 0; b < m1; ++b)
            for (int a = 0; a < m0; ++a) {
                double s = 0.0;
                for (int g = 0; g < m2; ++g) s += c(a + m0 * (b + m1 * g)) * axis_[2](kz, g);
                t1[std::size_t(a) + std::size_t(m0) * (std::size_t(b) + std::size_t(m1) * std::size_t(kz))] = s;
            }
    std::vector<double> t2(std::size_t(m0) * ny * nz, 0.0);
    for (int kz = 0; kz < nz; ++kz)
        for (int ky = 0; ky < ny; ++ky)
            for (int a = 0; a < m0; ++a) {
                double s = 0.0;
                for (int b = 0; b < m1; ++b)
                    s += t1[std::size_t(a) + std::size_t(m0) * (std::size_t(b) + std::size_t(m1) * std::size_t(kz))] *
                         axis_[1](ky, b);
                t2[std::size_t(a) + std::size_t(m0) * (std::size_t(ky) + std::size_t(ny) * std::size_t(kz))] = s;
            }
    std::vector<double> out(dims_.count());
    for (int kz = 0; kz < nz; ++kz)
        for (int ky = 0; ky < ny; ++ky)
            for (int kx = 0; kx < nx; ++kx) {
                double s = 0.0;
                for (int a = 0; a < m0; ++a)
                    s += t2[std::size_t(a) + std::size_t(m0) * (std::size_t(ky) + std::size_t(ny) * std::size_t(kz))] *
                         axis_[0](kx, a);
                out[dims_.index(kx, ky, kz)] = s;
            }
    return out;
}

void BiasBasis::row(std::size_t n, VectorXd& out) const
{
    const auto q = dims_.coords(n);
    const int m0 = int(axis_[0].cols()), m1 = int(axis_[1].cols()), m2 = int(axis_[2].cols());
    out.resize(m0 * m1 * m2);
    int idx = 0;
    for (int g = 0; g < m2; ++g)
        for (int b = 0; b < m1; ++b) {
            const double yz = axis_[1](q[1], b) * axis_[2](q[2], g);
            for (int a = 0; a < m0; ++a) out(idx++) = axis_[0](q[0], a) * yz;
        }
}

BiasField evaluate_bias(const BiasModel& model, const Dims& dims)
{
    model.validate(dims);
    const BiasBasis basis(dims, model.order);
    const std::size_t N = dims.count();
    BiasField b(N * std::size_t(model.channels()));
    for (int c = 0; c < model.channels(); ++c) {
        const auto lf = basis.log_field(model.coeffs[std::size_t(c)]);
        for (std::size_t j = 0; j < N; ++j) b[std::size_t(c) * N + j] = std::exp(lf[j]);
    }
    return b;
}

double bias_prior_term(const BiasModel& model)
{
    double s = 0.0;
    for (const auto& c : model.coeffs) s -= 0.5 * c.dot(model.prior_precision.cwiseProduct(c));
    return s;
}

ModulatedGaussian modulated_gaussian(const VectorXd& mean, const MatrixXd& covariance, const VectorXd& b)
{
    if ((b.array() <= 0.0).any() || !b.allFinite()) throw InvalidInput("modulated_gaussian: bias must be positive");
    const VectorXd inv = b.cwiseInverse();
    return {inv.cwiseProduct(mean), inv.asDiagonal() * covariance * inv.asDiagonal()};
}

double bias_objective(const VolumeGrid& data, const BiasModel& model, const Responsibilities& gamma,
                      const GaussWishartBundle& bundle)
{
    const BiasField b = evaluate_bias(model, data.dims());
    const RowMatrix flat = RowMatrix::Constant(gamma.rows(), gamma.cols(), 1.0 / double(gamma.cols()));
    return mixture_terms(data, b, flat, bundle, gamma).data + bias_prior_term(model);
}

BiasDerivatives bias_derivatives(const VolumeGrid& data, const BiasModel& model, const Responsibilities& gamma,
                                 const GaussWishartBundle& bundle, int channel)
{
    const std::size_t N = data.voxels();
    const int K = bundle.K();
    const BiasField b = evaluate_bias(model, data.dims());
    const BiasBasis basis(data.dims(), model.order);
    const ExpectedLikelihood el(bundle);
    const int M = model.size();

    BiasDerivatives out;
    out.gradient = VectorXd::Zero(M);
    out.hessian = MatrixXd::Zero(M, M);
    VectorXd row, x;
    for (std::size_t j = 0; j < N; ++j) {
        if (data.missing(j, channel)) continue;
        const unsigned pat = data.observed_pattern(j);
        const auto& obs = el.terms(pat, 0).obs;
        x.resize(Eigen::Index(obs.size()));
        int r = -1;
        for (std::size_t q = 0; q < obs.size(); ++q) {
            x(Eigen::Index(q)) = b[std::size_t(obs[q]) * N + j] * data.at(j, obs[q]);
            if (obs[q] == channel) r = int(q);
        }
        const double xr = x(r);
        double grad = 1.0;  // volume term d log b / d log b
        double curv = 0.0;
        for (int k = 0; k < K; ++k) {
            const double g = gamma(Eigen::Index(j), k);
            if (g == 0.0) continue;
            const auto& t = el.terms(pat, k);
            const double sd = t.precision_obs.row(r).dot(x - t.mean_obs);
            grad -= g * sd * xr;
            curv += g * (t.precision_obs(r, r) * xr * xr + std::max(0.0, sd * xr));
        }
        basis.row(j, row);
        out.gradient += grad * row;
        out.hessian.selfadjointView<Eigen::Lower>().rankUpdate(row, curv);
    }
    out.hessian = out.hessian.selfadjointView<Eigen::Lower>();
    const VectorXd& c = model.coeffs[std::size_t(channel)];
    out.gradient -= model.prior_precision.cwiseProduct(c);
    out.hessian.diagonal() += model.prior_precision;
    return out;
}

BiasUpdate gauss_newton_bias_update(const VolumeGrid& data, const Responsibilities& gamma,
                                    const GaussWishartBundle& bundle, const BiasModel& model, double levenberg)
{
    BiasUpdate res;
    res.model = model;
    res.before = bias_objective(data, model, gamma, bundle);
    double current = res.before;
    for (int c = 0; c < model.channels(); ++c) {
        const BiasDerivatives d = bias_derivatives(data, res.model, gamma, bundle, c);
        const double scale = std::max(d.hessian.diagonal().maxCoeff(), 1e-12);
        VectorXd step;
        for (double lambda = levenberg; ; lambda *= 10.0) {
            MatrixXd H = d.hessian;
            H.diagonal().array() += lambda * scale;
            Eigen::LLT<MatrixXd> llt(H);
            if (llt.info() == Eigen::Success) {
                step = llt.solve(d.gradient);
                if (step.allFinite()) break;
            }
            if (lambda > 1e6) throw InvalidInput("gauss_newton_bias_update: Hessian could not be regularised");
        }
        const VectorXd base = res.model.coeffs[std::size_t(c)];
        bool ok = false;
        for (int h = 0; h <= 8; ++h) {
            res.model.coeffs[std::size_t(c)] = base + std::ldexp(1.0, -h) * step;
            const double value = bias_objective(data, res.model, gamma, bundle);
            if (std::isfinite(value) && value >= current) {
                current = value;
                res.halvings += h;
                ok = true;
                break;
            }
        }
        if (!ok) res.model.coeffs[std::size_t(c)] = base;
        res.accepted = res.accepted || ok;
    }
    res.after = current;
    return res;
}

}  // namespace gatlas
