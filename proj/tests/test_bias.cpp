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
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>

#include "gatlas/bias.hpp"
#include "test_support.hpp"

using namespace gatlas;

namespace {

double log_gauss(const VectorXd& x, const VectorXd& mu, const MatrixXd& S)
{
    const int D = int(x.size());
    const VectorXd r = x - mu;
    return -0.5 * D * std::log(2 * M_PI) - 0.5 * std::log(S.determinant()) - 0.5 * r.dot(S.inverse() * r);
}

// Two-class single-channel phantom with a smooth multiplicative bias.
struct Phantom {
    VolumeGrid data;
    GaussWishartBundle bundle;
    Responsibilities gamma;
};

Phantom make_phantom(Dims d, double noise, std::uint64_t seed, double bias_amp)
{
    Phantom p{VolumeGrid(d, {2, 2, 2}, 1), {}, {}};
    CounterRng rng(seed);
    const std::size_t N = d.count();
    p.gamma = RowMatrix::Zero(Eigen::Index(N), 2);
    for (std::size_t j = 0; j < N; ++j) {
        const auto q = d.coords(j);
        const int cls = (q[0] + q[1] + q[2]) % 3 == 0 ? 1 : 0;
        const double mean = cls ? 100.0 : 50.0;
        const double nonuni = 1.0 + bias_amp * std::cos(M_PI * (q[0] + 0.5) / d.nx);
        p.data.at(j, 0) = nonuni * (mean + noise * rng.normal());
        p.gamma(Eigen::Index(j), cls) = 1.0;
    }
    for (double m : {50.0, 100.0}) {
        const double var = noise * noise + 1e-6;
        p.bundle.classes.push_back({VectorXd::Constant(1, m), 1e3, MatrixXd::Constant(1, 1, 1.0 / (var * 1e3)), 1e3});
    }
    return p;
}

}  // namespace

TEST_CASE("DCT basis is orthonormal and the default order respects the period rule")
{
    const MatrixXd B = dct_basis(9, 5);
    CHECK((B.transpose() * B - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);
    const auto o = default_bias_order({32, 32, 16}, {2, 2, 2});
    CHECK(o[0] == 3);  // 64 mm FOV: m <= 2
    CHECK(o[2] == 2);  // 32 mm FOV: m <= 1
    CHECK_THROWS_AS(dct_basis(3, 4), InvalidInput);
}

TEST_CASE("evaluate_bias: zero, constant and direct-loop oracle")
{
    const Dims d{8, 8, 8};
    BiasModel m = make_bias_model(d, {1, 1, 1}, 1, 1.0, {3, 2, 4});
    for (double b : evaluate_bias(m, d)) CHECK(b == 1.0);

    m.coeffs[0](0) = 0.8;
    const double b0 = std::exp(0.8 / std::sqrt(512.0));
    for (double b : evaluate_bias(m, d)) CHECK(std::abs(b - b0) < 1e-14);

    CounterRng rng(3);
    for (int i = 0; i < m.size(); ++i) m.coeffs[0](i) = rng.normal();
    const BiasField b = evaluate_bias(m, d);
    const MatrixXd Bx = dct_basis(8, 3), By = dct_basis(8, 2), Bz = dct_basis(8, 4);
    double worst = 0.0;
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                double s = 0.0;
                for (int c = 0; c < 4; ++c)
                    for (int bb = 0; bb < 2; ++bb)
                        for (int a = 0; a < 3; ++a) s += m.coeffs[0](a + 3 * (bb + 2 * c)) * Bx(x, a) * By(y, bb) * Bz(z, c);
                worst = std::max(worst, std::abs(b[d.index(x, y, z)] - std::exp(s)));
            }
    CHECK(worst < 1e-12);

    m.coeffs[0](1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(evaluate_bias(m, d), InvalidInput);
}

TEST_CASE("modulated Gaussian identities")
{
    VectorXd mu(3);
    mu << 4.0, 1.0, -2.0;
    MatrixXd S(3, 3);
    S << 2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5;
    const auto same = modulated_gaussian(mu, S, VectorXd::Ones(3));
    CHECK((same.mean - mu).norm() == 0.0);
    const auto half = modulated_gaussian(mu, S, VectorXd::Constant(3, 2.0));
    CHECK(half.mean(0) == 2.0);
    CHECK((half.covariance - S / 4.0).norm() < 1e-15);

    VectorXd b(3), x(3);
    b << 1.3, 0.7, 1.1;
    x << 3.0, 0.5, -1.0;
    const auto mg = modulated_gaussian(mu, S, b);
    const double lhs = log_gauss(x, mg.mean, mg.covariance);
    const double rhs = log_gauss(b.cwiseProduct(x), mu, S) + b.array().log().sum();
    CHECK(std::abs(lhs - rhs) < 1e-10);
    CHECK_THROWS_AS(modulated_gaussian(mu, S, VectorXd::Constant(3, -1.0)), InvalidInput);
}

TEST_CASE("bias gradient matches central finite differences")
{
    Phantom p = make_phantom({8, 8, 8}, 5.0, 17, 0.1);
    // Two observed channels with one partly missing, so the Schur path is exercised.
    VolumeGrid two(p.data.dims(), p.data.spacing(), 2);
    for (std::size_t j = 0; j < two.voxels(); ++j) {
        two.at(j, 0) = p.data.at(j, 0);
        two.at(j, 1) = 0.5 * p.data.at(j, 0) + 3.0;
        if (j % 7 == 0) two.set_missing(j, 1, true);
    }
    GaussWishartBundle bundle;
    for (int k = 0; k < 2; ++k) {
        MatrixXd W(2, 2);
        W << 0.02, 0.004, 0.004, 0.03;
        bundle.classes.push_back({Eigen::Vector2d(50.0 + 50 * k, 28.0 + 25 * k), 10.0, W, 12.0});
    }
    RowMatrix gamma = p.gamma;
    for (Eigen::Index j = 0; j < gamma.rows(); ++j) gamma.row(j) = 0.8 * gamma.row(j).array() + 0.1;

    BiasModel m = make_bias_model(two.dims(), two.spacing(), 2, 1e5, {3, 3, 3});
    CounterRng rng(8);
    for (auto& c : m.coeffs)
        for (int i = 0; i < c.size(); ++i) c(i) = 0.05 * rng.normal();

    for (int ch = 0; ch < 2; ++ch) {
        const BiasDerivatives d = bias_derivatives(two, m, gamma, bundle, ch);
        double worst = 0.0;
        for (int i = 0; i < m.size(); ++i) {
            auto f = [&](double v) {
                BiasModel t = m;
                t.coeffs[std::size_t(ch)](i) = v;
                return bias_objective(two, t, gamma, bundle);
            };
            const double fd = gatlas::testing::central_difference(f, m.coeffs[std::size_t(ch)](i), 1e-5);
            worst = std::max(worst, std::abs(fd - d.gradient(i)) / std::max(1.0, d.gradient.cwiseAbs().maxCoeff()));
        }
        CHECK(worst < 1e-4);
        const Eigen::SelfAdjointEigenSolver<MatrixXd> es(d.hessian);
        CHECK(es.eigenvalues().minCoeff() > -1e-8);
    }
}

TEST_CASE("bias update at the optimum barely moves and each update never decreases the objective")
{
    Phantom p = make_phantom({12, 12, 12}, 4.0, 23, 0.0);
    // Fit the intensity posterior at b = 1 first.
    GaussWishartBundle prior = p.bundle;
    for (auto& c : prior.classes) {
        c.beta = 1e-3;
        c.nu = 2.0;
        c.W = MatrixXd::Constant(1, 1, 1.0 / (2.0 * 16.0));
    }
    const auto fitted = m_step(sufficient_stats(p.data, unit_bias(p.data), p.gamma, prior), prior);
    BiasModel m = make_bias_model(p.data.dims(), p.data.spacing(), 1, 1e6);
    const auto up = gauss_newton_bias_update(p.data, p.gamma, fitted, m);
    CHECK(up.after >= up.before);
    // Coefficients are on an orthonormal basis; compare the log field itself.
    double drift = 0.0;
    for (double b : evaluate_bias(up.model, p.data.dims())) drift = std::max(drift, std::abs(std::log(b)));
    CHECK(drift < 1e-3);

    Phantom q = make_phantom({12, 12, 12}, 2.0, 24, 0.1);
    BiasModel mq = make_bias_model(q.data.dims(), q.data.spacing(), 1, 1e3, {3, 1, 1});
    double last = bias_objective(q.data, mq, q.gamma, q.bundle);
    for (int it = 0; it < 4; ++it) {
        const auto u = gauss_newton_bias_update(q.data, q.gamma, q.bundle, mq);
        CHECK(u.after >= last);
        last = u.after;
        mq = u.model;
    }
    // The recovered correction undoes the cosine nonuniformity along x.
    const BiasField b = evaluate_bias(mq, q.data.dims());
    const Dims d = q.data.dims();
    const double left = b[d.index(0, 5, 5)] * (1.0 + 0.1 * std::cos(M_PI * 0.5 / 12));
    const double right = b[d.index(11, 5, 5)] * (1.0 + 0.1 * std::cos(M_PI * 11.5 / 12));
    CHECK(std::abs(left / right - 1.0) < 0.03);
}

TEST_CASE("single voxel, single class: Gauss-Newton reaches the closed-form optimum")
{
    VolumeGrid v({1, 1, 1}, {1, 1, 1}, 1);
    v.at(0, 0) = 3.0;
    GaussWishartBundle b;
    const double m = 5.0, nu = 4.0, W = 0.5, beta = 2.0;
    b.classes.push_back({VectorXd::Constant(1, m), beta, MatrixXd::Constant(1, 1, W), nu});
    RowMatrix g = RowMatrix::Ones(1, 1);
    BiasModel model = make_bias_model(v.dims(), v.spacing(), 1, 0.0);
    CHECK(model.size() == 1);
    for (int it = 0; it < 50; ++it) model = gauss_newton_bias_update(v, g, b, model).model;
    // Stationarity of -nu W (y - m) y / 2 + log y in y = b x.
    const double y = 0.5 * (m + std::sqrt(m * m + 4.0 / (nu * W)));
    CHECK(std::abs(model.coeffs[0](0) - std::log(y / 3.0)) < 1e-6);
}
