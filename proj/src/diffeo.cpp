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
#include "gatlas/diffeo.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "gatlas/affine.hpp"
#include "gatlas/multigrid.hpp"

namespace gatlas {
namespace {

using Field = std::vector<Vec3>;

// Periodic neighbour tables, one per axis.
struct Neighbours {
    std::array<std::vector<std::size_t>, 3> plus, minus;

    explicit Neighbours(const Dims& d)
    {
        const std::size_t N = d.count();
        for (auto& p : plus) p.resize(N);
        for (auto& m : minus) m.resize(N);
        for (int k = 0; k < d.nz; ++k)
            for (int j = 0; j < d.ny; ++j)
                for (int i = 0; i < d.nx; ++i) {
                    const std::size_t n = d.index(i, j, k);
                    plus[0][n] = d.index((i + 1) % d.nx, j, k);
                    minus[0][n] = d.index((i + d.nx - 1) % d.nx, j, k);
                    plus[1][n] = d.index(i, (j + 1) % d.ny, k);
                    minus[1][n] = d.index(i, (j + d.ny - 1) % d.ny, k);
                    plus[2][n] = d.index(i, j, (k + 1) % d.nz);
                    minus[2][n] = d.index(i, j, (k + d.nz - 1) % d.nz);
                }
    }
};

template <class T>
std::vector<T> forward_diff(const std::vector<T>& f, const Neighbours& nb, int a, double h)
{
    std::vector<T> out(f.size());
    const auto& p = nb.plus[std::size_t(a)];
    for (std::size_t n = 0; n < f.size(); ++n) out[n] = (f[p[n]] - f[n]) / h;
    return out;
}

template <class T>
std::vector<T> forward_diff_adjoint(const std::vector<T>& g, const Neighbours& nb, int a, double h)
{
    std::vector<T> out(g.size());
    const auto& m = nb.minus[std::size_t(a)];
    for (std::size_t n = 0; n < g.size(); ++n) out[n] = (g[m[n]] - g[n]) / h;
    return out;
}

// sum_a D_a^T D_a; positive semi-definite.
Field neg_laplacian(const Field& f, const Neighbours& nb, const Spacing& h)
{
    Field out(f.size(), Vec3::Zero());
    for (int a = 0; a < 3; ++a) {
        const Field t = forward_diff_adjoint(forward_diff(f, nb, a, h[std::size_t(a)]), nb, a, h[std::size_t(a)]);
        for (std::size_t n = 0; n < f.size(); ++n) out[n] += t[n];
    }
    return out;
}

std::vector<double> component(const std::vector<Field>& D, int a, int b)
{
    std::vector<double> out(D[std::size_t(a)].size());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = D[std::size_t(a)][n](b);
    return out;
}

std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

void check_field(const VectorField& u, const char* who)
{
    if (u.v.size() != u.dims.count()) throw InvalidInput(std::string(who) + ": field size mismatch");
    for (const Vec3& x : u.v)
        if (!x.allFinite()) throw InvalidInput(std::string(who) + ": non-finite velocity");
}

// Trilinear lookup with periodic wrap, matching the operator's boundary
// conditions during integration.
Vec3 sample_periodic(const std::vector<Vec3>& f, const Dims& d, const Vec3& p)
{
    int i0[3], i1[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const double fl = std::floor(p(a));
        w[a] = p(a) - fl;
        const long base = long(fl);
        i0[a] = int(((base % d[a]) + d[a]) % d[a]);
        i1[a] = (i0[a] + 1) % d[a];
    }
    Vec3 out = Vec3::Zero();
    for (int c = 0; c < 8; ++c) {
        const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
        const double wt = (bx ? w[0] : 1 - w[0]) * (by ? w[1] : 1 - w[1]) * (bz ? w[2] : 1 - w[2]);
        if (wt == 0.0) continue;
        out += wt * f[d.index(bx ? i1[0] : i0[0], by ? i1[1] : i0[1], bz ? i1[2] : i0[2])];
    }
    return out;
}

// Adjoint of sample_periodic: deposits `value` at p with trilinear weights.
void splat_periodic(std::vector<Vec3>& f, const Dims& d, const Vec3& p, const Vec3& value)
{
    int i0[3], i1[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const double fl = std::floor(p(a));
        w[a] = p(a) - fl;
        const long base = long(fl);
        i0[a] = int(((base % d[a]) + d[a]) % d[a]);
        i1[a] = (i0[a] + 1) % d[a];
    }
    for (int c = 0; c < 8; ++c) {
        const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
        const double wt = (bx ? w[0] : 1 - w[0]) * (by ? w[1] : 1 - w[1]) * (bz ? w[2] : 1 - w[2]);
        if (wt == 0.0) continue;
        f[d.index(bx ? i1[0] : i0[0], by ? i1[1] : i0[1], bz ? i1[2] : i0[2])] += wt * value;
    }
}

// I + central differences of a periodic displacement.
Mat3 periodic_jacobian(const std::vector<Vec3>& disp, const Dims& d, std::size_t n)
{
    const auto c = d.coords(n);
    Mat3 J = Mat3::Identity();
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 1) continue;
        std::array<int, 3> lo = c, hi = c;
        lo[std::size_t(a)] = (c[std::size_t(a)] + d[a] - 1) % d[a];
        hi[std::size_t(a)] = (c[std::size_t(a)] + 1) % d[a];
        J.col(a) += 0.5 * (disp[d.index(hi[0], hi[1], hi[2])] - disp[d.index(lo[0], lo[1], lo[2])]);
    }
    return J;
}

void check_jacobians(const DeformationField& phi)
{
    std::size_t worst = 0;
    for (std::size_t n = 0; n < phi.jac_det.size(); ++n)
        if (phi.jac_det[n] < phi.jac_det[worst]) worst = n;
    if (!phi.jac_det.empty() && !(phi.jac_det[worst] > 0.0)) throw FoldoverError(worst, phi.jac_det[worst]);
}

}  // namespace

void OperatorSpec::validate() const
{
    for (double v : {lambda_zero, membrane, bending, le_mu, le_lambda})
        if (!std::isfinite(v) || v < 0.0) throw InvalidInput("OperatorSpec: coefficients must be finite and >= 0");
}

void apply_operator(const Dims& dims, const Spacing& h, const Vec3& rho_scale, double volume, const OperatorSpec& op,
                    const std::vector<Vec3>& in, std::vector<Vec3>& out)
{
    const std::size_t N = dims.count();
    if (in.size() != N) throw InvalidInput("apply_operator: size mismatch");
    const Neighbours nb(dims);
    Field rho(N);
    for (std::size_t n = 0; n < N; ++n) rho[n] = rho_scale.cwiseProduct(in[n]);

    Field f(N);
    for (std::size_t n = 0; n < N; ++n) f[n] = op.lambda_zero * rho[n];

    std::vector<Field> D(3);
    for (int a = 0; a < 3; ++a) D[std::size_t(a)] = forward_diff(rho, nb, a, h[std::size_t(a)]);

    if (op.membrane != 0.0) {
        for (int a = 0; a < 3; ++a) {
            const Field t = forward_diff_adjoint(D[std::size_t(a)], nb, a, h[std::size_t(a)]);
            for (std::size_t n = 0; n < N; ++n) f[n] += op.membrane * t[n];
        }
    }
    if (op.bending != 0.0) {
        const Field t = neg_laplacian(neg_laplacian(rho, nb, h), nb, h);
        for (std::size_t n = 0; n < N; ++n) f[n] += op.bending * t[n];
    }
    if (op.le_mu != 0.0) {
        for (int a = 0; a < 3; ++a)
            for (int c = 0; c < 3; ++c) {
                const std::vector<double> dac = component(D, a, c), dca = component(D, c, a);
                std::vector<double> e(N);
                for (std::size_t n = 0; n < N; ++n) e[n] = 0.5 * (dac[n] + dca[n]);
                const std::vector<double> t = forward_diff_adjoint(e, nb, a, h[std::size_t(a)]);
                for (std::size_t n = 0; n < N; ++n) f[n](c) += op.le_mu * t[n];
            }
    }
    if (op.le_lambda != 0.0) {
        std::vector<double> div(N, 0.0);
        for (int a = 0; a < 3; ++a)
            for (std::size_t n = 0; n < N; ++n) div[n] += D[std::size_t(a)][n](a);
        for (int c = 0; c < 3; ++c) {
            const std::vector<double> t = forward_diff_adjoint(div, nb, c, h[std::size_t(c)]);
            for (std::size_t n = 0; n < N; ++n) f[n](c) += op.le_lambda * t[n];
        }
    }
    out.resize(N);
    for (std::size_t n = 0; n < N; ++n) out[n] = volume * rho_scale.cwiseProduct(f[n]);
}

double penalty_energy(const VectorField& u, const OperatorSpec& op)
{
    check_field(u, "penalty_energy");
    const std::size_t N = u.size();
    const Spacing& h = u.spacing;
    const Vec3 scale(h[0], h[1], h[2]);
    const Neighbours nb(u.dims);
    Field rho(N);
    for (std::size_t n = 0; n < N; ++n) rho[n] = scale.cwiseProduct(u.v[n]);
    std::vector<Field> D(3);
    for (int a = 0; a < 3; ++a) D[std::size_t(a)] = forward_diff(rho, nb, a, h[std::size_t(a)]);
    const Field lap = neg_laplacian(rho, nb, h);

    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        double strain = 0.0, div = 0.0, grad = 0.0;
        for (int a = 0; a < 3; ++a) {
            grad += D[std::size_t(a)][n].squaredNorm();
            div += D[std::size_t(a)][n](a);
            for (int b = 0; b < 3; ++b) {
                const double e = 0.5 * (D[std::size_t(a)][n](b) + D[std::size_t(b)][n](a));
                strain += e * e;
            }
        }
        s += op.lambda_zero * rho[n].squaredNorm() + op.membrane * grad + op.bending * lap[n].squaredNorm() +
             op.le_mu * strain + op.le_lambda * div * div;
    }
    return 0.5 * h[0] * h[1] * h[2] * s;
}

VectorField apply_LtL(const VectorField& u, const OperatorSpec& op)
{
    check_field(u, "apply_LtL");
    VectorField out(u.dims, u.spacing);
    const Vec3 scale(u.spacing[0], u.spacing[1], u.spacing[2]);
    apply_operator(u.dims, u.spacing, scale, u.spacing[0] * u.spacing[1] * u.spacing[2], op, u.v, out.v);
    return out;
}

Eigen::Matrix3cd operator_symbol(const Vec3& theta, const Spacing& h, const OperatorSpec& op)
{
    using C = std::complex<double>;
    Eigen::Vector3cd d;
    for (int a = 0; a < 3; ++a) d(a) = (std::exp(C(0.0, theta(a))) - 1.0) / h[std::size_t(a)];
    const double s = d.squaredNorm();
    Eigen::Matrix3cd M = Eigen::Matrix3cd::Identity() * (op.lambda_zero + op.membrane * s + op.bending * s * s);
    M += op.le_mu * 0.5 * (s * Eigen::Matrix3cd::Identity() + d * d.adjoint());
    M += op.le_lambda * d.conjugate() * d.transpose();
    return h[0] * h[1] * h[2] * M;
}

VectorField apply_inverse_LtL(const VectorField& m, const OperatorSpec& op)
{
    check_field(m, "apply_inverse_LtL");
    const Dims& d = m.dims;
    const std::size_t N = d.count();
    const int nxh = d.nx / 2 + 1;
    const std::size_t NC = std::size_t(nxh) * std::size_t(d.ny) * std::size_t(d.nz);

    double* real = fftw_alloc_real(N);
    fftw_complex* spec[3] = {fftw_alloc_complex(NC), fftw_alloc_complex(NC), fftw_alloc_complex(NC)};
    fftw_plan fwd, bwd;
    {
        const std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fwd = fftw_plan_dft_r2c_3d(d.nz, d.ny, d.nx, real, spec[0], FFTW_ESTIMATE);
        bwd = fftw_plan_dft_c2r_3d(d.nz, d.ny, d.nx, spec[0], real, FFTW_ESTIMATE);
    }
    for (int c = 0; c < 3; ++c) {
        for (std::size_t n = 0; n < N; ++n) real[n] = m.v[n](c) / m.spacing[std::size_t(c)];
        fftw_execute_dft_r2c(fwd, real, spec[c]);
    }
    const double tau = 2.0 * std::numbers::pi;
    for (int kz = 0; kz < d.nz; ++kz)
        for (int ky = 0; ky < d.ny; ++ky)
            for (int kx = 0; kx < nxh; ++kx) {
                const std::size_t q = std::size_t(kx) + std::size_t(nxh) * (std::size_t(ky) + std::size_t(d.ny) * std::size_t(kz));
                const Vec3 theta(tau * kx / d.nx, tau * ky / d.ny, tau * kz / d.nz);
                const Eigen::Matrix3cd M = operator_symbol(theta, m.spacing, op);
                Eigen::Vector3cd f;
                for (int c = 0; c < 3; ++c) f(c) = {spec[c][q][0], spec[c][q][1]};
                Eigen::Vector3cd r = Eigen::Vector3cd::Zero();
                if (M.cwiseAbs().maxCoeff() > 1e-300) {
                    const Eigen::FullPivLU<Eigen::Matrix3cd> lu(M);
                    if (lu.rank() == 3) r = lu.solve(f);
                }
                for (int c = 0; c < 3; ++c) {
                    spec[c][q][0] = r(c).real();
                    spec[c][q][1] = r(c).imag();
                }
            }
    VectorField u(d, m.spacing);
    for (int c = 0; c < 3; ++c) {
        fftw_execute_dft_c2r(bwd, spec[c], real);
        for (std::size_t n = 0; n < N; ++n) u.v[n](c) = real[n] / double(N) / m.spacing[std::size_t(c)];
    }
    {
        const std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(bwd);
    }
    fftw_free(real);
    for (auto* s : spec) fftw_free(s);
    return u;
}

Vec3 sample_periodic_map(const VectorField& map, const Vec3& p)
{
    const Dims& d = map.dims;
    int i0[3], i1[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const double fl = std::floor(p(a));
        w[a] = p(a) - fl;
        const long base = long(fl);
        i0[a] = int(((base % d[a]) + d[a]) % d[a]);
        i1[a] = (i0[a] + 1) % d[a];
    }
    Vec3 disp = Vec3::Zero();
    for (int c = 0; c < 8; ++c) {
        const int b[3] = {c & 1, (c >> 1) & 1, (c >> 2) & 1};
        const double wt = (b[0] ? w[0] : 1 - w[0]) * (b[1] ? w[1] : 1 - w[1]) * (b[2] ? w[2] : 1 - w[2]);
        if (wt == 0.0) continue;
        const int q[3] = {b[0] ? i1[0] : i0[0], b[1] ? i1[1] : i0[1], b[2] ? i1[2] : i0[2]};
        disp += wt * (map.v[d.index(q[0], q[1], q[2])] - Vec3(q[0], q[1], q[2]));
    }
    return p + disp;
}

DeformationField geodesic_shoot(const VectorField& u, const OperatorSpec& op, int steps)
{
    check_field(u, "geodesic_shoot");
    if (steps < 1) throw InvalidInput("geodesic_shoot: steps must be >= 1");
    const Dims& d = u.dims;
    const std::size_t N = d.count();
    const double dt = 1.0 / steps;
    // Displacements of the forward map and its inverse, both periodic.
    Field fwd(N, Vec3::Zero()), inv(N, Vec3::Zero()), next(N);
    auto grid = [&](std::size_t n) {
        const auto q = d.coords(n);
        return Vec3(q[0], q[1], q[2]);
    };
    // (id + dt v)^-1 at x by fixed point.
    auto step_inverse = [&](const Field& v, std::size_t n, int iterations) {
        const Vec3 x = grid(n);
        Vec3 z = x - dt * v[n];
        for (int it = 0; it < iterations; ++it) {
            const Vec3 znext = x - dt * sample_periodic(v, d, z);
            const double change = (znext - z).norm();
            z = znext;
            if (change < 1e-12) break;
        }
        return z;
    };

    if (steps == 1) {
        fwd = u.v;
        for (std::size_t n = 0; n < N; ++n) inv[n] = step_inverse(u.v, n, 100) - grid(n);
    } else {
        const VectorField m0 = apply_LtL(u, op);
        // Velocity of the flow whose forward displacement is `f`: momentum
        // m_t = |D phi^-1| (D phi^-1)^T m0 o phi^-1, pushed forward by
        // splatting so the total momentum is conserved exactly.
        auto velocity_at = [&](const Field& f) {
            VectorField mt(d, u.spacing);
            for (std::size_t n = 0; n < N; ++n) {
                const Mat3 J = periodic_jacobian(f, d, n);
                splat_periodic(mt.v, d, grid(n) + f[n], J.transpose().inverse() * m0.v[n]);
            }
            return apply_inverse_LtL(mt, op).v;
        };
        Field v = u.v, pred(N), a(N), mid(N);
        for (int s = 0; s < steps; ++s) {
            if (s > 0) v = velocity_at(fwd);
            // Heun step on the trajectories.
            for (std::size_t n = 0; n < N; ++n) {
                a[n] = sample_periodic(v, d, grid(n) + fwd[n]);
                pred[n] = fwd[n] + dt * a[n];
            }
            const Field vp = velocity_at(pred);
            for (std::size_t n = 0; n < N; ++n) {
                fwd[n] += 0.5 * dt * (a[n] + sample_periodic(vp, d, grid(n) + pred[n]));
                mid[n] = 0.5 * (v[n] + vp[n]);
            }
            // phi^-1 <- phi^-1 o (id + dt w)^-1, a first guess polished below.
            for (std::size_t n = 0; n < N; ++n) {
                const Vec3 z = step_inverse(mid, n, 3);
                next[n] = z + sample_periodic(inv, d, z) - grid(n);
            }
            std::swap(inv, next);
        }
    }
    // Polish the accumulated inverse against the final forward map; the
    // per-step resampling otherwise blurs it.
    for (int it = 0; it < 6; ++it) {
        for (std::size_t n = 0; n < N; ++n) {
            const Vec3 x = grid(n);
            const Vec3 z = x + inv[n];
            const Vec3 r = z + sample_periodic(fwd, d, z) - x;
            const Vec3 base = z.array().round().matrix();
            std::array<int, 3> q;
            for (int a = 0; a < 3; ++a) q[std::size_t(a)] = int(((long(base(a)) % d[a]) + d[a]) % d[a]);
            const Mat3 J = periodic_jacobian(fwd, d, d.index(q[0], q[1], q[2]));
            const Vec3 delta = J.inverse() * r;
            if (delta.allFinite() && delta.norm() < 1.0) inv[n] -= delta;
        }
    }
    DeformationField phi = DeformationField::identity(d, u.spacing);
    phi.jac_det.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
        phi.forward.v[n] += fwd[n];
        phi.inverse.v[n] += inv[n];
        phi.jac_det[n] = periodic_jacobian(fwd, d, n).determinant();
    }
    check_jacobians(phi);
    return phi;
}

double velocity_objective(const VelocityContext& ctx, const VectorField& u, const DeformationField& phi)
{
    const auto pts = template_points(ctx.frame, ctx.T, ctx.t, phi.forward);
    const AtlasSample s = sample_atlas(*ctx.atlas, pts, false);
    return matching_value(*ctx.gamma, warped_prior(s.pi, ctx.weights)) - penalty_energy(u, ctx.op);
}

double velocity_objective(const VelocityContext& ctx, const VectorField& u)
{
    return velocity_objective(ctx, u, geodesic_shoot(u, ctx.op, ctx.steps));
}

VelocityDerivatives velocity_grad(const VelocityContext& ctx, const VectorField& u, const DeformationField& phi)
{
    const auto pts = template_points(ctx.frame, ctx.T, ctx.t, phi.forward);
    const AtlasSample s = sample_atlas(*ctx.atlas, pts, true);
    const MatchingTerms m = matching_terms(*ctx.gamma, s, ctx.weights, true);
    const Mat3 A = ctx.frame.linear_part(ctx.T);
    const VectorField Lu = apply_LtL(u, ctx.op);

    VelocityDerivatives out;
    out.value = m.value - 0.5 * u.dot(Lu);
    out.gradient = VectorField(u.dims, u.spacing);
    out.hessian.dims = u.dims;
    out.hessian.spacing = u.spacing;
    out.hessian.op = ctx.op;
    out.hessian.blocks.resize(u.size());
    Field disp(u.size());
    for (std::size_t n = 0; n < u.size(); ++n) {
        const auto q = u.dims.coords(n);
        disp[n] = phi.forward.v[n] - Vec3(q[0], q[1], q[2]);
    }
    for (std::size_t n = 0; n < u.size(); ++n) {
        // A small perturbation of the initial velocity composes on the right
        // of the flow, so the endpoint moves by D phi delta.
        const Mat3 J = ctx.steps == 1 ? A : Mat3(A * periodic_jacobian(disp, u.dims, n));
        out.gradient.v[n] = J.transpose() * m.grad[n] - Lu.v[n];
        const Mat3 H = J.transpose() * m.hess[n] * J;
        out.hessian.blocks[n] = 0.5 * (H + H.transpose());
    }
    return out;
}

VectorField velocity_hessian_apply(const VectorField& d, const HessianContext& h)
{
    if (!(d.dims == h.dims) || h.blocks.size() != d.size()) throw InvalidInput("velocity_hessian_apply: shape mismatch");
    VectorField out = apply_LtL(d, h.op);
    for (std::size_t n = 0; n < d.size(); ++n) out.v[n] += h.blocks[n] * d.v[n];
    return out;
}

VectorField velocity_system_apply(const VectorField& d, const HessianContext& h)
{
    VectorField out = velocity_hessian_apply(d, h);
    for (std::size_t n = 0; n < d.size(); ++n) out.v[n] += h.levenberg * d.v[n];
    return out;
}

VelocityUpdate gauss_newton_velocity_update(const VelocityContext& ctx, const VectorField& u,
                                            const DeformationField& phi, double levenberg)
{
    VelocityUpdate res;
    res.u = u;
    res.phi = phi;
    VelocityDerivatives der = velocity_grad(ctx, u, phi);
    res.before = der.value;
    res.after = der.value;
    der.hessian.levenberg = levenberg;
    const MultigridResult mg = multigrid_solve(der.hessian, der.gradient);
    res.solver_warning = mg.stagnated;

    auto line_search = [&](const VectorField& dir, double alpha) {
        for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
            VectorField trial = u;
            for (std::size_t n = 0; n < u.size(); ++n) trial.v[n] += alpha * dir.v[n];
            res.halvings = h;
            DeformationField phi_t;
            try {
                phi_t = geodesic_shoot(trial, ctx.op, ctx.steps);
            } catch (const FoldoverError&) {
                continue;
            }
            const double value = velocity_objective(ctx, trial, phi_t);
            if (std::isfinite(value) && value >= res.before) {
                res.u = std::move(trial);
                res.phi = std::move(phi_t);
                res.after = value;
                res.accepted = true;
                res.step_norm = alpha * dir.max_norm();
                return true;
            }
        }
        return false;
    };
    if (!line_search(mg.x, 1.0) && ctx.steps > 1) {
        // The composition approximation behind the multi-step Hessian is
        // poor for rough steps; retry along the smooth direction K g with
        // the step length of the quadratic model.
        const VectorField dir = apply_inverse_LtL(der.gradient, ctx.op);
        const double num = dir.dot(der.gradient);
        const double den = dir.dot(velocity_system_apply(dir, der.hessian));
        if (num > 0.0 && den > 0.0) line_search(dir, num / den);
    }
    if (res.accepted && res.halvings == 0) res.levenberg = std::max(0.5 * levenberg, 1e-6);
    else res.levenberg = std::min(4.0 * levenberg, 1e6);
    return res;
}

}  // namespace gatlas
