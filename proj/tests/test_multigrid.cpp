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

#include "gatlas/multigrid.hpp"
#include "test_support.hpp"

using namespace gatlas;

namespace {

HessianContext random_context(Dims d, Spacing h, std::uint64_t seed, OperatorSpec op = {})
{
    HessianContext c;
    c.dims = d;
    c.spacing = h;
    c.op = op;
    c.levenberg = 1e-2;
    CounterRng rng(seed);
    c.blocks.resize(d.count());
    for (auto& B : c.blocks) {
        Eigen::Matrix<double, 3, 2> G;
        for (int i = 0; i < 6; ++i) G(i % 3, i / 3) = rng.normal();
        B = 0.5 * G * G.transpose();
    }
    return c;
}

VectorField random_rhs(Dims d, Spacing h, std::uint64_t seed)
{
    VectorField r(d, h);
    CounterRng rng(seed);
    for (auto& x : r.v) x = Vec3(rng.normal(), rng.normal(), rng.normal());
    return r;
}

// Dense matrix of the system operator built column by column.
Eigen::MatrixXd dense_system(const HessianContext& c)
{
    const std::size_t N = c.dims.count();
    Eigen::MatrixXd A(3 * N, 3 * N);
    for (std::size_t col = 0; col < 3 * N; ++col) {
        VectorField e(c.dims, c.spacing);
        e.v[col / 3](int(col % 3)) = 1.0;
        const VectorField y = velocity_system_apply(e, c);
        for (std::size_t n = 0; n < N; ++n) A.block<3, 1>(Eigen::Index(3 * n), Eigen::Index(col)) = y.v[n];
    }
    return A;
}

}  // namespace

TEST_CASE("zero right-hand side gives zero")
{
    const HessianContext c = random_context({8, 8, 8}, {1, 1, 1}, 1);
    const MultigridResult r = multigrid_solve(c, VectorField({8, 8, 8}, {1, 1, 1}));
    CHECK(r.x.max_norm() == 0.0);
}

TEST_CASE("pointwise operator is solved exactly")
{
    const Dims d{8, 8, 8};
    HessianContext c = random_context(d, {1, 1, 1}, 2, OperatorSpec{0.5, 0, 0, 0, 0});
    CounterRng rng(3);
    for (auto& B : c.blocks) B = Vec3(rng.uniform(), rng.uniform(), rng.uniform()).asDiagonal();
    const VectorField b = random_rhs(d, {1, 1, 1}, 4);
    const MultigridResult r = multigrid_solve(c, b);
    double err = 0.0;
    for (std::size_t n = 0; n < b.size(); ++n)
        for (int k = 0; k < 3; ++k)
            err = std::max(err, std::abs(r.x.v[n](k) - b.v[n](k) / (0.5 + c.levenberg + c.blocks[n](k, k))));
    CHECK(err < 1e-12);
}

TEST_CASE("multigrid agrees with a dense solve")
{
    const Dims d{6, 6, 6};
    const Spacing h{1.0, 1.5, 2.0};
    const HessianContext c = random_context(d, h, 5);
    const VectorField b = random_rhs(d, h, 6);
    const Eigen::MatrixXd A = dense_system(c);
    CHECK((A - A.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    Eigen::VectorXd rhs(3 * b.size());
    for (std::size_t n = 0; n < b.size(); ++n) rhs.segment<3>(Eigen::Index(3 * n)) = b.v[n];
    const Eigen::VectorXd x = A.ldlt().solve(rhs);
    const MultigridResult r = multigrid_solve(c, b);
    double err = 0.0;
    for (std::size_t n = 0; n < b.size(); ++n) err += (r.x.v[n] - x.segment<3>(Eigen::Index(3 * n))).squaredNorm();
    CHECK(std::sqrt(err) < 1e-3 * x.norm());
}

TEST_CASE("each pass reduces the residual tenfold on a second-order operator")
{
    const Dims d{16, 16, 16};
    HessianContext c = random_context(d, {2, 2, 2}, 7, OperatorSpec{1e-3, 0.1, 0.0, 0.0, 0.0});
    for (auto& B : c.blocks) B.setZero();
    const MultigridResult r = multigrid_solve(c, random_rhs(d, {2, 2, 2}, 8));
    CHECK(r.slow_passes == 0);
    CHECK_FALSE(r.stagnated);
    CHECK(r.residual_norms.back() < 1e-8 * r.residual_norms.front());
}

TEST_CASE("default regularisation with smooth matching blocks converges steadily")
{
    // Blocks shaped like the Gauss-Newton ones: outer products of a smoothly
    // varying template gradient.
    MultigridOptions opts;
    opts.max_passes = 25;
    for (const Spacing h : {Spacing{1, 1, 1}, Spacing{2, 2, 2}}) {
        const Dims d{16, 16, 16};
        HessianContext c = random_context(d, h, 7);
        for (std::size_t n = 0; n < d.count(); ++n) {
            const auto q = d.coords(n);
            const Vec3 g(std::sin(0.4 * q[0]) + 0.2, std::cos(0.3 * q[1]), 0.5 * std::sin(0.2 * (q[0] + q[2])));
            c.blocks[n] = 2.0 * g * g.transpose();
        }
        const MultigridResult r = multigrid_solve(c, random_rhs(d, h, 8), opts);
        for (std::size_t p = 1; p < r.residual_norms.size(); ++p) CHECK(r.residual_norms[p] < 0.5 * r.residual_norms[p - 1]);
        CHECK(r.residual_norms[1] < 0.2 * r.residual_norms[0]);
        CHECK_FALSE(r.stagnated);
        CHECK(r.residual_norms.back() < 1e-8 * r.residual_norms.front());
    }
}

TEST_CASE("rough random blocks still converge and the solve is deterministic")
{
    const Dims d{16, 16, 16};
    const HessianContext c = random_context(d, {1, 1, 1}, 9);
    MultigridOptions opts;
    opts.max_passes = 30;
    const VectorField b = random_rhs(d, {1, 1, 1}, 10);
    const MultigridResult r = multigrid_solve(c, b, opts);
    CHECK(r.residual_norms.back() < 1e-8 * r.residual_norms.front());
    const MultigridResult again = multigrid_solve(c, b, opts);
    for (std::size_t n = 0; n < b.size(); ++n) CHECK((again.x.v[n] - r.x.v[n]).norm() == 0.0);
}
