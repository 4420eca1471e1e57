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

#include <random>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>

#include "gatlas/mixture.hpp"
#include "test_support.hpp"

using namespace gatlas;

namespace {

GaussWishart make_gw(VectorXd m, double beta, MatrixXd W, double nu) { return {std::move(m), beta, std::move(W), nu}; }

GaussWishartBundle random_bundle(int K, int D, std::uint64_t seed)
{
    CounterRng rng(seed);
    GaussWishartBundle b;
    for (int k = 0; k < K; ++k) {
        VectorXd m(D);
        for (int d = 0; d < D; ++d) m(d) = 3.0 * k + rng.normal();
        MatrixXd A(D, D);
        for (int i = 0; i < D; ++i)
            for (int j = 0; j < D; ++j) A(i, j) = 0.3 * rng.normal();
        MatrixXd W = A * A.transpose() + MatrixXd::Identity(D, D) * 0.5;
        b.classes.push_back(make_gw(m, 2.0 + rng.uniform(), W, D + 3.0 + rng.uniform()));
    }
    return b;
}

VolumeGrid two_class_data(int N, int D, std::uint64_t seed)
{
    VolumeGrid v({N, 1, 1}, {1, 1, 1}, D);
    CounterRng rng(seed);
    for (int j = 0; j < N; ++j)
        for (int d = 0; d < D; ++d) v.at(std::size_t(j), d) = (j % 2 ? 3.0 : 0.0) + 0.7 * rng.normal() + 0.2 * d;
    return v;
}

RowMatrix uniform_prior(std::size_t N, int K) { return RowMatrix::Constant(Eigen::Index(N), K, 1.0 / K); }

// Textbook full-data expected log-likelihood.
double elog_gauss_full(const GaussWishart& g, const VectorXd& x)
{
    const int D = g.dim();
    double elog = D * std::log(2.0) + std::log(g.W.determinant());
    for (int d = 1; d <= D; ++d) elog += boost::math::digamma(0.5 * (g.nu + 1 - d));
    return 0.5 * elog - 0.5 * D * std::log(2 * M_PI) - 0.5 * D / g.beta - 0.5 * g.nu * (x - g.m).dot(g.W * (x - g.m));
}

// Standard VBEM for a fully observed mixture, written from the textbook
// update equations without any of the library's helpers.
struct PlainVbem {
    std::vector<GaussWishart> prior, post;
    RowMatrix gamma;

    void e_step(const std::vector<VectorXd>& x, const RowMatrix& pz)
    {
        const int K = int(post.size());
        gamma.resize(Eigen::Index(x.size()), K);
        for (std::size_t j = 0; j < x.size(); ++j) {
            VectorXd lg(K);
            for (int k = 0; k < K; ++k) lg(k) = elog_gauss_full(post[std::size_t(k)], x[j]) + std::log(pz(Eigen::Index(j), k));
            lg.array() -= lg.maxCoeff();
            lg = lg.array().exp();
            gamma.row(Eigen::Index(j)) = lg.transpose() / lg.sum();
        }
    }
    void m_step(const std::vector<VectorXd>& x)
    {
        for (std::size_t k = 0; k < post.size(); ++k) {
            const auto& p = prior[k];
            double Nk = 0.0;
            VectorXd xbar = VectorXd::Zero(p.dim());
            for (std::size_t j = 0; j < x.size(); ++j) {
                Nk += gamma(Eigen::Index(j), Eigen::Index(k));
                xbar += gamma(Eigen::Index(j), Eigen::Index(k)) * x[j];
            }
            xbar /= Nk;
            MatrixXd S = MatrixXd::Zero(p.dim(), p.dim());
            for (std::size_t j = 0; j < x.size(); ++j)
                S += gamma(Eigen::Index(j), Eigen::Index(k)) * (x[j] - xbar) * (x[j] - xbar).transpose();
            auto& q = post[k];
            q.beta = p.beta + Nk;
            q.m = (p.beta * p.m + Nk * xbar) / q.beta;
            q.nu = p.nu + Nk;
            const MatrixXd Winv =
                p.W.inverse() + S + (p.beta * Nk / (p.beta + Nk)) * (xbar - p.m) * (xbar - p.m).transpose();
            q.W = Winv.inverse();
        }
    }
};

}  // namespace

TEST_CASE("warped_prior examples")
{
    RowMatrix pi(1, 2);
    pi << 0.3, 0.7;
    VectorXd w(2);
    w << 2.0, 1.0;
    const RowMatrix s = warped_prior(pi, w);
    CHECK(s(0, 0) == doctest::Approx(0.6 / 1.3).epsilon(1e-14));
    CHECK(s(0, 1) == doctest::Approx(0.7 / 1.3).epsilon(1e-14));

    const RowMatrix u = warped_prior(uniform_prior(4, 3), VectorXd::Ones(3));
    CHECK((u.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

    RowMatrix r(3, 3);
    r << 0.2, 0.3, 0.5, 0.9, 0.05, 0.05, 0.0, 0.0, 1.0;
    const RowMatrix a = warped_prior(r, VectorXd::Ones(3));
    const RowMatrix b = warped_prior(r, VectorXd::Constant(3, 7.5));
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(a(2, 0) > 0.0);  // template floor keeps the log finite
}

TEST_CASE("expected log-likelihood matches the textbook formula and the missing-data identity")
{
    const GaussWishartBundle b = random_bundle(2, 3, 7);
    const ExpectedLikelihood el(b);
    VectorXd x(3);
    x << 0.4, -1.2, 2.0;
    for (int k = 0; k < 2; ++k)
        CHECK(std::abs(el.log_likelihood(0b111, k, x) - elog_gauss_full(b.classes[std::size_t(k)], x)) < 1e-10);

    // Channel 1 hidden: the collapsed term equals E_q(h)[E log N(o, h)] + H[q(h)]
    // with q(h) Gaussian at (n, P^-1).
    const unsigned pat = 0b101;
    VectorXd o(2);
    o << x(0), x(2);
    const MissingPosterior mp = infer_missing(o, pat, b);
    for (int k = 0; k < 2; ++k) {
        const auto& g = b.classes[std::size_t(k)];
        VectorXd full = x;
        full(1) = mp.mean[std::size_t(k)](0);
        const double P = mp.precision[std::size_t(k)](0, 0);
        const double extra = -0.5 * g.nu * g.W(1, 1) / P;
        const double entropy = 0.5 * std::log(2 * M_PI * M_E / P);
        const double oracle = elog_gauss_full(g, full) + extra + entropy;
        CHECK(std::abs(el.log_likelihood(pat, k, o) - oracle) < 1e-10);
    }
}

TEST_CASE("e_step: uniform, hard-label and boundary-label cases")
{
    const VolumeGrid v = two_class_data(6, 1, 3);
    GaussWishartBundle same;
    for (int k = 0; k < 3; ++k)
        same.classes.push_back(make_gw(VectorXd::Constant(1, 1.0), 1.0, MatrixXd::Identity(1, 1), 2.0));
    const auto r = e_step(v, unit_bias(v), uniform_prior(6, 3), same);
    CHECK((r.gamma.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-14);

    const GaussWishartBundle b = random_bundle(3, 1, 4);
    LabelData lab{std::vector<int>(6, 0), 1.0};
    lab.labels[2] = 2;
    const auto hard = e_step(v, unit_bias(v), uniform_prior(6, 3), b, &lab);
    CHECK(hard.gamma(2, 1) == 1.0);
    CHECK(hard.gamma(2, 0) == 0.0);
    CHECK(((hard.gamma.rowwise().sum().array() - 1.0).abs() < 1e-9).all());

    std::fill(lab.labels.begin(), lab.labels.end(), 1);
    lab.zeta = 1.0 / 3.0;
    const auto flat = e_step(v, unit_bias(v), uniform_prior(6, 3), b, &lab);
    const auto none = e_step(v, unit_bias(v), uniform_prior(6, 3), b);
    CHECK((flat.gamma - none.gamma).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("e_step with a multi-class label restricts mass to the covered classes")
{
    const VolumeGrid v = two_class_data(4, 1, 9);
    const GaussWishartBundle b = random_bundle(3, 1, 10);
    LabelMap map;
    map.label_classes = {{0}, {1, 2}};
    LabelData lab{{2, 2, 0, 1}, 1.0};
    const auto r = e_step(v, unit_bias(v), uniform_prior(4, 3), b, &lab, &map);
    CHECK(r.gamma(0, 0) == 0.0);
    CHECK(r.gamma(0, 1) + r.gamma(0, 2) == doctest::Approx(1.0));
    CHECK(r.gamma(3, 0) == 1.0);
}

TEST_CASE("infer_missing: coupling, zero innovation and scalar conditional oracle")
{
    GaussWishartBundle b;
    MatrixXd W(2, 2);
    W << 2.0, 0.0, 0.0, 0.5;
    b.classes.push_back(make_gw((VectorXd(2) << 1.0, 4.0).finished(), 1.0, W, 4.0));
    const auto block = infer_missing(VectorXd::Constant(1, 17.0), 0b01, b);
    CHECK(block.mean[0](0) == doctest::Approx(4.0));

    W << 2.0, 0.6, 0.6, 0.5;
    b.classes[0].W = W;
    const auto zero = infer_missing(VectorXd::Constant(1, 1.0), 0b01, b);
    CHECK(std::abs(zero.mean[0](0) - 4.0) < 1e-15);

    // Conditional Gaussian in scalar form: E[h | o] = m_h - (L_ho / L_hh)(o - m_o), prec L_hh.
    const double o = 2.5;
    const double Lhh = 4.0 * 0.5, Lho = 4.0 * 0.6;
    const auto mp = infer_missing(VectorXd::Constant(1, o), 0b01, b);
    CHECK(std::abs(mp.mean[0](0) - (4.0 - Lho / Lhh * (o - 1.0))) < 1e-10);
    CHECK(std::abs(mp.precision[0](0, 0) - Lhh) < 1e-10);

    CHECK_THROWS_AS(infer_missing(VectorXd(), 0, b), InvalidInput);
}

TEST_CASE("sufficient statistics: reduction, single voxel and direct summation with a missing channel")
{
    const GaussWishartBundle b = random_bundle(2, 2, 21);
    VolumeGrid one({1, 1, 1}, {1, 1, 1}, 2);
    one.at(0, 0) = 1.5;
    one.at(0, 1) = -2.0;
    RowMatrix g(1, 2);
    g << 1.0, 0.0;
    const auto s1 = sufficient_stats(one, unit_bias(one), g, b);
    CHECK(s1.s0[0] == 1.0);
    CHECK((s1.s1[0] - Eigen::Vector2d(1.5, -2.0)).norm() < 1e-15);
    CHECK((s1.S2[0] - Eigen::Vector2d(1.5, -2.0) * Eigen::Vector2d(1.5, -2.0).transpose()).norm() < 1e-14);

    VolumeGrid v = two_class_data(10, 2, 22);
    CounterRng rng(5);
    RowMatrix gamma(10, 2);
    for (int j = 0; j < 10; ++j) {
        gamma(j, 0) = rng.uniform();
        gamma(j, 1) = 1.0 - gamma(j, 0);
    }
    const auto full = sufficient_stats(v, unit_bias(v), gamma, b);
    for (int k = 0; k < 2; ++k) {
        VectorXd s = VectorXd::Zero(2);
        MatrixXd S = MatrixXd::Zero(2, 2);
        for (int j = 0; j < 10; ++j) {
            const Eigen::Vector2d x(v.at(std::size_t(j), 0), v.at(std::size_t(j), 1));
            s += gamma(j, k) * x;
            S += gamma(j, k) * x * x.transpose();
        }
        CHECK((full.s1[std::size_t(k)] - s).norm() < 1e-12);
        CHECK((full.S2[std::size_t(k)] - S).norm() < 1e-12);
    }

    for (int j = 0; j < 10; j += 3) v.set_missing(std::size_t(j), 1, true);
    const auto miss = sufficient_stats(v, unit_bias(v), gamma, b);
    for (int k = 0; k < 2; ++k) {
        const auto& c = b.classes[std::size_t(k)];
        VectorXd s = VectorXd::Zero(2);
        MatrixXd S = MatrixXd::Zero(2, 2);
        for (int j = 0; j < 10; ++j) {
            Eigen::Vector2d x(v.at(std::size_t(j), 0), v.at(std::size_t(j), 1));
            MatrixXd extra = MatrixXd::Zero(2, 2);
            if (v.missing(std::size_t(j), 1)) {
                const double Lhh = c.nu * c.W(1, 1), Lho = c.nu * c.W(1, 0);
                x(1) = c.m(1) + (Lho / Lhh) * (c.m(0) - x(0));
                extra(1, 1) = 1.0 / Lhh;
            }
            s += gamma(j, k) * x;
            S += gamma(j, k) * (x * x.transpose() + extra);
        }
        CHECK((miss.s1[std::size_t(k)] - s).norm() < 1e-12);
        CHECK((miss.S2[std::size_t(k)] - S).norm() < 1e-12);
    }
}

TEST_CASE("m_step: zero evidence, single point and large-sample limit")
{
    GaussWishartBundle prior;
    prior.classes.push_back(make_gw(VectorXd::Zero(1), 1.0, MatrixXd::Identity(1, 1), 2.0));
    auto st = SufficientStats::zeros(1, 1);
    const auto same = m_step(st, prior);
    CHECK(same.classes[0].m(0) == 0.0);
    CHECK(same.classes[0].W(0, 0) == 1.0);
    CHECK(same.classes[0].nu == 2.0);
    CHECK(same.classes[0].beta == 1.0);

    st.s0[0] = 1.0;
    st.s1[0](0) = 3.0;
    st.S2[0](0, 0) = 9.0;
    CHECK(m_step(st, prior).classes[0].m(0) == doctest::Approx(1.5));

    std::mt19937_64 gen(1);
    std::normal_distribution<double> nd(0.0, 1e-3);
    st = SufficientStats::zeros(1, 1);
    for (int i = 0; i < 10000; ++i) {
        const double x = 5.0 + nd(gen);
        st.s0[0] += 1.0;
        st.s1[0](0) += x;
        st.S2[0](0, 0) += x * x;
    }
    CHECK(std::abs(m_step(st, prior).classes[0].m(0) - 5.0) < 1e-2);
}

TEST_CASE("KL divergence is zero on itself and positive otherwise")
{
    const GaussWishartBundle a = random_bundle(2, 3, 31);
    const GaussWishartBundle b = random_bundle(2, 3, 32);
    CHECK(std::abs(kl_divergence(a.classes[0], a.classes[0])) < 1e-10);
    CHECK(kl_divergence(a.classes[0], b.classes[0]) > 0.0);
    CHECK(kl_divergence(a.classes[1], b.classes[1]) > 0.0);
}

TEST_CASE("VBEM iterations never decrease the mixture bound")
{
    const VolumeGrid v = two_class_data(60, 2, 41);
    const RowMatrix pz = uniform_prior(60, 2);
    GaussWishartBundle prior = random_bundle(2, 2, 42);
    GaussWishartBundle post = prior;
    double last = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < 15; ++it) {
        const auto e = e_step(v, unit_bias(v), pz, post);
        const double after_e = e.terms.sum() + gauss_wishart_bound(post, prior);
        CHECK(after_e >= last - 1e-8 * std::abs(after_e));
        post = m_step(sufficient_stats(v, unit_bias(v), e.gamma, post), prior);
        const double after_m =
            mixture_terms(v, unit_bias(v), pz, post, e.gamma).sum() + gauss_wishart_bound(post, prior);
        CHECK(after_m >= after_e - 1e-8 * std::abs(after_e));
        last = after_m;
    }
}

TEST_CASE("missing-data pathway equals plain VBEM when nothing is missing")
{
    const VolumeGrid v = two_class_data(40, 2, 51);
    std::vector<VectorXd> x;
    for (std::size_t j = 0; j < v.voxels(); ++j) x.push_back(Eigen::Vector2d(v.at(j, 0), v.at(j, 1)));
    const RowMatrix pz = uniform_prior(40, 2);
    GaussWishartBundle prior = random_bundle(2, 2, 52);
    GaussWishartBundle post = prior;
    PlainVbem ref{prior.classes, prior.classes, {}};
    for (int it = 0; it < 10; ++it) {
        const auto e = e_step(v, unit_bias(v), pz, post);
        ref.e_step(x, pz);
        CHECK((e.gamma - ref.gamma).cwiseAbs().maxCoeff() < 1e-10);
        post = m_step(sufficient_stats(v, unit_bias(v), e.gamma, post), prior);
        ref.m_step(x);
    }
}

TEST_CASE("tissue weights: fixed point, line-search oracle and direction")
{
    RowMatrix pi(3, 2);
    pi << 0.2, 0.8, 0.6, 0.4, 0.5, 0.5;
    const RowMatrix s = warped_prior(pi, VectorXd::Ones(2));
    const auto fp = update_tissue_weights(s, pi, VectorXd::Ones(2));
    CHECK((fp.weights - VectorXd::Ones(2)).cwiseAbs().maxCoeff() < 1e-6);

    RowMatrix g(3, 2);
    g << 0.7, 0.3, 0.9, 0.1, 0.4, 0.6;
    const auto up = update_tissue_weights(g, pi, VectorXd::Ones(2));
    CHECK(up.after >= up.before);
    CHECK(up.weights.sum() == doctest::Approx(2.0));

    // Golden-section search on r = w1 / w2 with w1 + w2 = 2.
    auto f = [&](double lr) {
        const double r = std::exp(lr);
        VectorXd w(2);
        w << 2.0 * r / (1 + r), 2.0 / (1 + r);
        return tissue_weight_objective(g, pi, w);
    };
    double a = -10, b = 10;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int i = 0; i < 200; ++i) {
        const double c = b - phi * (b - a), d = a + phi * (b - a);
        (f(c) > f(d) ? b : a) = (f(c) > f(d) ? d : c);
    }
    const double ratio = std::exp(0.5 * (a + b));
    CHECK(std::abs(up.weights(0) / up.weights(1) - ratio) < 1e-4 * ratio);

    RowMatrix g2 = g;
    for (int j = 0; j < 3; ++j) {
        g2(j, 0) = std::min(1.0, 2.0 * g(j, 0));
        g2(j, 1) = 1.0 - g2(j, 0);
    }
    CHECK(update_tissue_weights(g2, pi, VectorXd::Ones(2)).weights(0) > up.weights(0));

    RowMatrix empty(3, 2);
    empty << 1, 0, 1, 0, 1, 0;
    CHECK(update_tissue_weights(empty, pi, VectorXd::Ones(2)).weights(1) > 0.0);
}

TEST_CASE("hyperprior fitting by moment matching")
{
    const GaussWishartBundle one = random_bundle(2, 2, 61);
    const auto same = fit_intensity_hyperpriors({one, one, one});
    CHECK((same.classes[0].m - one.classes[0].m).norm() < 1e-12);
    CHECK(same.classes[0].beta == doctest::Approx(1e6));

    GaussWishartBundle a, b;
    a.classes.push_back(make_gw(VectorXd::Constant(1, 0.0), 1, MatrixXd::Identity(1, 1), 5));
    b.classes.push_back(make_gw(VectorXd::Constant(1, 2.0), 1, MatrixXd::Identity(1, 1) * 1.2, 5));
    CHECK(fit_intensity_hyperpriors({a, b}).classes[0].m(0) == doctest::Approx(1.0));

    // Monte-Carlo prior predictive variance of the mean vs the sample variance.
    std::vector<GaussWishartBundle> subjects;
    CounterRng rng(62);
    for (int i = 0; i < 5; ++i) {
        GaussWishartBundle s;
        MatrixXd W(2, 2);
        W << 1.0 + 0.2 * rng.uniform(), 0.1, 0.1, 0.8 + 0.2 * rng.uniform();
        s.classes.push_back(make_gw(Eigen::Vector2d(rng.normal(), 1.0 + rng.normal()), 50, W, 40 + 5 * rng.uniform()));
        subjects.push_back(s);
    }
    const auto p = fit_intensity_hyperpriors(subjects).classes[0];
    double sample = 0.0;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& s : subjects) mean += s.classes[0].m / 5.0;
    for (const auto& s : subjects) sample += (s.classes[0].m - mean).squaredNorm() / 4.0;

    std::mt19937_64 gen(7);
    std::normal_distribution<double> nd;
    const Eigen::LLT<MatrixXd> Lw(p.W);
    const int draws = 200000;
    double acc = 0.0;
    for (int t = 0; t < draws; ++t) {
        // Bartlett decomposition of Wishart(W, nu).
        std::chi_squared_distribution<double> c1(p.nu), c2(p.nu - 1.0);
        Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
        A(0, 0) = std::sqrt(c1(gen));
        A(1, 1) = std::sqrt(c2(gen));
        A(1, 0) = nd(gen);
        const MatrixXd LA = MatrixXd(Lw.matrixL()) * A;
        const MatrixXd Lambda = LA * LA.transpose();
        const MatrixXd cov = (p.beta * Lambda).inverse();
        const Eigen::LLT<MatrixXd> Lc(cov);
        const VectorXd z = MatrixXd(Lc.matrixL()) * Eigen::Vector2d(nd(gen), nd(gen));
        acc += z.squaredNorm();
    }
    CHECK(std::abs(acc / draws - sample) < 0.05 * sample);
}

TEST_CASE("positive-definiteness guard")
{
    MatrixXd ok = MatrixXd::Identity(2, 2);
    CHECK(make_positive_definite(ok) == 0);
    MatrixXd singular(2, 2);
    singular << 1.0, 1.0, 1.0, 1.0;
    CHECK(make_positive_definite(singular) >= 1);
    MatrixXd bad(2, 2);
    bad << 1.0, 0.0, 0.0, -1.0;
    CHECK_THROWS_AS(make_positive_definite(bad), InvalidInput);
}
