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
#include "gatlas/multigrid.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Cholesky>

namespace gatlas {
namespace {

using Field = std::vector<Vec3>;

int wrap(int i, int n) { return ((i % n) + n) % n; }

// Spatially varying part of a level operator: y(n) += block x(index).
struct Coupling {
    std::size_t index;
    Mat3 block;
};

struct Level {
    Dims dims;
    Spacing spacing;
    std::array<bool, 3> coarsened{false, false, false};  // relative to the finer level
    std::vector<std::array<int, 3>> offsets;            // wrapped residues, centre excluded
    std::vector<Mat3> stencil;
    Mat3 centre = Mat3::Zero();
    std::vector<std::vector<Coupling>> local;  // matching blocks plus damping, Galerkin-coarsened
    std::vector<Mat3> diag_inv;
    Eigen::LDLT<Eigen::MatrixXd> dense;
    bool is_coarsest = false;
};

// The operator is a periodic convolution, so one impulse per component gives
// every block: (A x)(p) = sum_o S_o x(p + o).
template <class Apply>
void extract_stencil(Level& L, Apply&& apply)
{
    const Dims& d = L.dims;
    std::array<std::vector<int>, 3> res;
    for (int a = 0; a < 3; ++a) {
        for (int o = -2; o <= 2; ++o) {
            const int r = wrap(o, d[a]);
            if (std::find(res[std::size_t(a)].begin(), res[std::size_t(a)].end(), r) == res[std::size_t(a)].end())
                res[std::size_t(a)].push_back(r);
        }
    }
    std::array<Field, 3> response;
    for (int c = 0; c < 3; ++c) {
        Field in(d.count(), Vec3::Zero());
        in[0](c) = 1.0;
        apply(in, response[std::size_t(c)]);
    }
    L.offsets.clear();
    L.stencil.clear();
    for (int rz : res[2])
        for (int ry : res[1])
            for (int rx : res[0]) {
                // y(q) carries block S_o with q + o = 0.
                const std::size_t q = d.index(wrap(-rx, d.nx), wrap(-ry, d.ny), wrap(-rz, d.nz));
                Mat3 S;
                for (int c = 0; c < 3; ++c) S.col(c) = response[std::size_t(c)][q];
                if (rx == 0 && ry == 0 && rz == 0) {
                    L.centre = S;
                } else if (S.cwiseAbs().maxCoeff() > 0.0) {
                    L.offsets.push_back({rx, ry, rz});
                    L.stencil.push_back(S);
                }
            }
}

Vec3 neighbour_sum(const Level& L, const Field& x, int i, int j, int k)
{
    const Dims& d = L.dims;
    Vec3 s = Vec3::Zero();
    for (std::size_t o = 0; o < L.offsets.size(); ++o) {
        const auto& r = L.offsets[o];
        int ii = i + r[0], jj = j + r[1], kk = k + r[2];
        if (ii >= d.nx) ii -= d.nx;
        if (jj >= d.ny) jj -= d.ny;
        if (kk >= d.nz) kk -= d.nz;
        s.noalias() += L.stencil[o] * x[d.index(ii, jj, kk)];
    }
    return s;
}

Vec3 local_sum(const Level& L, const Field& x, std::size_t n, bool skip_self)
{
    Vec3 s = Vec3::Zero();
    for (const Coupling& c : L.local[n])
        if (!(skip_self && c.index == n)) s.noalias() += c.block * x[c.index];
    return s;
}

void convolve(const Level& L, const Field& x, Field& y)
{
    const Dims& d = L.dims;
    y.resize(d.count());
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const std::size_t n = d.index(i, j, k);
                y[n] = neighbour_sum(L, x, i, j, k) + L.centre * x[n];
            }
}

void residual(const Level& L, const Field& x, const Field& b, Field& r)
{
    const Dims& d = L.dims;
    r.resize(d.count());
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const std::size_t n = d.index(i, j, k);
                r[n] = b[n] - neighbour_sum(L, x, i, j, k) - L.centre * x[n] - local_sum(L, x, n, false);
            }
}

// Same-colour points are coupled through the radius-two stencil, so the
// post-smoother walks everything backwards to stay the adjoint of the
// pre-smoother and keep the V-cycle symmetric.
void smooth(const Level& L, Field& x, const Field& b, int sweeps, bool forward)
{
    const Dims& d = L.dims;
    const long N = long(d.count());
    auto relax = [&](long n) {
        const auto q = d.coords(std::size_t(n));
        const std::size_t m = std::size_t(n);
        x[m] = L.diag_inv[m] * (b[m] - neighbour_sum(L, x, q[0], q[1], q[2]) - local_sum(L, x, m, true));
    };
    auto colour_of = [&](long n) {
        const auto q = d.coords(std::size_t(n));
        return (q[0] + q[1] + q[2]) % 2;
    };
    for (int s = 0; s < sweeps; ++s)
        for (int pass = 0; pass < 2; ++pass) {
            const int colour = forward ? pass : 1 - pass;
            if (forward) {
                for (long n = 0; n < N; ++n)
                    if (colour_of(n) == colour) relax(n);
            } else {
                for (long n = N - 1; n >= 0; --n)
                    if (colour_of(n) == colour) relax(n);
            }
        }
}

void build_dense(Level& L)
{
    const std::size_t N = L.dims.count();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(Eigen::Index(3 * N), Eigen::Index(3 * N));
    for (int k = 0; k < L.dims.nz; ++k)
        for (int j = 0; j < L.dims.ny; ++j)
            for (int i = 0; i < L.dims.nx; ++i) {
                const std::size_t n = L.dims.index(i, j, k);
                A.block<3, 3>(Eigen::Index(3 * n), Eigen::Index(3 * n)) += L.centre;
                for (const Coupling& c : L.local[n])
                    A.block<3, 3>(Eigen::Index(3 * n), Eigen::Index(3 * c.index)) += c.block;
                for (std::size_t o = 0; o < L.offsets.size(); ++o) {
                    const auto& r = L.offsets[o];
                    const std::size_t m = L.dims.index((i + r[0]) % L.dims.nx, (j + r[1]) % L.dims.ny,
                                                       (k + r[2]) % L.dims.nz);
                    A.block<3, 3>(Eigen::Index(3 * n), Eigen::Index(3 * m)) += L.stencil[o];
                }
            }
    L.dense.compute(0.5 * (A + A.transpose()));
}

void dense_solve(const Level& L, const Field& b, Field& x)
{
    const std::size_t N = L.dims.count();
    Eigen::VectorXd rhs(Eigen::Index(3 * N));
    for (std::size_t n = 0; n < N; ++n) rhs.segment<3>(Eigen::Index(3 * n)) = b[n];
    const Eigen::VectorXd sol = L.dense.solve(rhs);
    x.resize(N);
    for (std::size_t n = 0; n < N; ++n) x[n] = sol.segment<3>(Eigen::Index(3 * n));
}

// One axis of full weighting (1/4, 1/2, 1/4) with periodic wrap.
template <class T>
std::vector<T> restrict_axis(const std::vector<T>& f, const Dims& d, int axis, Dims& out)
{
    out = d;
    if (axis == 0) out.nx /= 2;
    if (axis == 1) out.ny /= 2;
    if (axis == 2) out.nz /= 2;
    std::vector<T> c(out.count());
    for (int k = 0; k < out.nz; ++k)
        for (int j = 0; j < out.ny; ++j)
            for (int i = 0; i < out.nx; ++i) {
                std::array<int, 3> q{i, j, k};
                q[std::size_t(axis)] *= 2;
                auto at = [&](int delta) {
                    std::array<int, 3> p = q;
                    p[std::size_t(axis)] = wrap(p[std::size_t(axis)] + delta, d[axis]);
                    return f[d.index(p[0], p[1], p[2])];
                };
                c[out.index(i, j, k)] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
            }
    return c;
}

template <class T>
std::vector<T> prolong_axis(const std::vector<T>& c, const Dims& cd, int axis, Dims& out)
{
    out = cd;
    if (axis == 0) out.nx *= 2;
    if (axis == 1) out.ny *= 2;
    if (axis == 2) out.nz *= 2;
    std::vector<T> f(out.count());
    for (int k = 0; k < out.nz; ++k)
        for (int j = 0; j < out.ny; ++j)
            for (int i = 0; i < out.nx; ++i) {
                std::array<int, 3> q{i, j, k};
                const int fine = q[std::size_t(axis)];
                std::array<int, 3> lo = q, hi = q;
                lo[std::size_t(axis)] = fine / 2;
                hi[std::size_t(axis)] = (fine / 2 + 1) % cd[axis];
                const T a = c[cd.index(lo[0], lo[1], lo[2])];
                f[out.index(i, j, k)] = fine % 2 == 0 ? a : T(0.5 * (a + c[cd.index(hi[0], hi[1], hi[2])]));
            }
    return f;
}

template <class T>
std::vector<T> restrict_field(const std::vector<T>& f, const Level& fine, const Level& coarse)
{
    std::vector<T> cur = f;
    Dims d = fine.dims;
    for (int a = 0; a < 3; ++a)
        if (coarse.coarsened[std::size_t(a)]) {
            Dims nd;
            cur = restrict_axis(cur, d, a, nd);
            d = nd;
        }
    return cur;
}

Field prolong_field(const Field& c, const Level& coarse)
{
    Field cur = c;
    Dims d = coarse.dims;
    for (int a = 2; a >= 0; --a)
        if (coarse.coarsened[std::size_t(a)]) {
            Dims nd;
            cur = prolong_axis(cur, d, a, nd);
            d = nd;
        }
    return cur;
}

double dot(const Field& a, const Field& b)
{
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += a[n].dot(b[n]);
    return s;
}

void apply_system(const Level& L, const Field& x, Field& y)
{
    convolve(L, x, y);
    for (std::size_t n = 0; n < x.size(); ++n) y[n] += local_sum(L, x, n, false);
}

// Coarse voxels touched by fine coordinate f along one axis, with weights,
// for restriction (1/4, 1/2, 1/4) or prolongation (1/2, 1, 1/2).
int axis_targets(int f, int nc, bool coarsened, bool prolong, int* idx, double* w)
{
    if (!coarsened) {
        idx[0] = f;
        w[0] = 1.0;
        return 1;
    }
    const double scale = prolong ? 2.0 : 1.0;
    if (f % 2 == 0) {
        idx[0] = f / 2;
        w[0] = 0.5 * scale;
        return 1;
    }
    idx[0] = (f - 1) / 2;
    idx[1] = ((f + 1) / 2) % nc;
    w[0] = w[1] = 0.25 * scale;
    return 2;
}

struct Targets {
    std::size_t idx[8];
    double w[8];
    int count = 0;
};

Targets targets(const Level& coarse, const Dims& fd, std::size_t f, bool prolong)
{
    const auto q = fd.coords(f);
    int ix[3][2];
    double wx[3][2];
    int nx[3];
    for (int a = 0; a < 3; ++a)
        nx[a] = axis_targets(q[std::size_t(a)], coarse.dims[a], coarse.coarsened[std::size_t(a)], prolong, ix[a], wx[a]);
    Targets t;
    for (int c = 0; c < nx[2]; ++c)
        for (int b = 0; b < nx[1]; ++b)
            for (int a = 0; a < nx[0]; ++a) {
                t.idx[t.count] = coarse.dims.index(ix[0][a], ix[1][b], ix[2][c]);
                t.w[t.count] = wx[0][a] * wx[1][b] * wx[2][c];
                ++t.count;
            }
    return t;
}

// Exact R V P for the spatially varying part; stays within one coarse voxel.
std::vector<std::vector<Coupling>> galerkin_local(const Level& fine, const Level& coarse)
{
    std::vector<std::vector<Coupling>> out(coarse.dims.count());
    auto add = [](std::vector<Coupling>& row, std::size_t j, const Mat3& B) {
        for (Coupling& c : row)
            if (c.index == j) {
                c.block += B;
                return;
            }
        row.push_back({j, B});
    };
    for (std::size_t f = 0; f < fine.dims.count(); ++f) {
        const Targets rt = targets(coarse, fine.dims, f, false);
        for (const Coupling& c : fine.local[f]) {
            const Targets pt = targets(coarse, fine.dims, c.index, true);
            for (int a = 0; a < rt.count; ++a)
                for (int b = 0; b < pt.count; ++b) add(out[rt.idx[a]], pt.idx[b], (rt.w[a] * pt.w[b]) * c.block);
        }
    }
    return out;
}

double norm(const Field& f)
{
    double s = 0.0;
    for (const Vec3& v : f) s += v.squaredNorm();
    return std::sqrt(s);
}

class Hierarchy {
public:
    Hierarchy(const HessianContext& h, const MultigridOptions& opts) : opts_(opts)
    {
        const std::size_t N = h.dims.count();
        if (h.blocks.size() != N) throw InvalidInput("multigrid_solve: block count mismatch");
        const Vec3 rho(h.spacing[0], h.spacing[1], h.spacing[2]);
        const double volume = h.spacing[0] * h.spacing[1] * h.spacing[2];

        Level fine;
        fine.dims = h.dims;
        fine.spacing = h.spacing;
        fine.local.resize(N);
        for (std::size_t n = 0; n < N; ++n) fine.local[n] = {{n, h.blocks[n] + h.levenberg * Mat3::Identity()}};
        levels_.push_back(std::move(fine));

        while (levels_.back().dims.count() > opts.coarsest_voxels) {
            const Level& prev = levels_.back();
            Level next;
            next.dims = prev.dims;
            next.spacing = prev.spacing;
            bool any = false;
            for (int a = 0; a < 3; ++a) {
                const int n = prev.dims[a];
                if (n >= 2 && n % 2 == 0) {
                    next.coarsened[std::size_t(a)] = true;
                    next.spacing[std::size_t(a)] *= 2.0;
                    any = true;
                }
            }
            if (!any) break;
            next.dims = {next.coarsened[0] ? prev.dims.nx / 2 : prev.dims.nx,
                         next.coarsened[1] ? prev.dims.ny / 2 : prev.dims.ny,
                         next.coarsened[2] ? prev.dims.nz / 2 : prev.dims.nz};
            next.local = galerkin_local(prev, next);
            levels_.push_back(std::move(next));
        }
        levels_.back().is_coarsest = true;

        extract_stencil(levels_.front(), [&](const Field& in, Field& out) {
            apply_operator(h.dims, h.spacing, rho, volume, h.op, in, out);
        });
        // Coarse convolution parts are Galerkin products R A P, obtained from
        // impulse responses as well.
        for (std::size_t l = 1; l < levels_.size(); ++l) {
            const Level& F = levels_[l - 1];
            extract_stencil(levels_[l], [&](const Field& in, Field& out) {
                const Field fine_in = prolong_field(in, levels_[l]);
                Field fine_out;
                convolve(F, fine_in, fine_out);
                out = restrict_field(fine_out, F, levels_[l]);
            });
        }
        for (Level& L : levels_) {
            L.diag_inv.resize(L.dims.count());
            for (std::size_t n = 0; n < L.dims.count(); ++n) {
                Mat3 D = L.centre;
                for (const Coupling& c : L.local[n])
                    if (c.index == n) D += c.block;
                L.diag_inv[n] = D.inverse();
                if (!L.diag_inv[n].allFinite()) throw InvalidInput("multigrid_solve: singular diagonal block");
            }
        }
        build_dense(levels_.back());
    }

    const Level& finest() const { return levels_.front(); }

    void vcycle(std::size_t l, Field& x, const Field& b) const
    {
        const Level& L = levels_[l];
        if (L.is_coarsest) {
            dense_solve(L, b, x);
            return;
        }
        smooth(L, x, b, opts_.pre_smooth, true);
        Field r;
        residual(L, x, b, r);
        const Level& C = levels_[l + 1];
        const Field rc = restrict_field(r, L, C);
        Field ec(C.dims.count(), Vec3::Zero());
        vcycle(l + 1, ec, rc);
        const Field ef = prolong_field(ec, C);
        for (std::size_t n = 0; n < x.size(); ++n) x[n] += ef[n];
        smooth(L, x, b, opts_.post_smooth, false);
    }

    Field full_multigrid(const Field& b) const
    {
        std::vector<Field> rhs{b};
        for (std::size_t l = 1; l < levels_.size(); ++l) rhs.push_back(restrict_field(rhs.back(), levels_[l - 1], levels_[l]));
        Field x;
        dense_solve(levels_.back(), rhs.back(), x);
        for (std::size_t l = levels_.size() - 1; l-- > 0;) {
            x = prolong_field(x, levels_[l + 1]);
            vcycle(l, x, rhs[l]);
        }
        return x;
    }

private:
    MultigridOptions opts_;
    std::vector<Level> levels_;
};

}  // namespace

MultigridResult multigrid_solve(const HessianContext& h, const VectorField& rhs, const MultigridOptions& opts)
{
    if (!(rhs.dims == h.dims)) throw InvalidInput("multigrid_solve: dims mismatch");
    MultigridResult res;
    res.x = VectorField(h.dims, h.spacing);
    const double b0 = norm(rhs.v);
    res.residual_norms.push_back(b0);
    if (b0 == 0.0) return res;

    const Hierarchy H(h, opts);
    Field r;
    Field best;
    double best_norm = b0;
    int since_best = 0;
    // Returns true when iteration should stop.
    auto record = [&](double rn) {
        if (rn > 0.1 * res.residual_norms.back() && rn > opts.tolerance * b0) ++res.slow_passes;
        res.residual_norms.push_back(rn);
        ++res.passes;
        if (rn < best_norm) {
            best_norm = rn;
            best = res.x.v;
            since_best = 0;
        } else if (++since_best >= 3) {
            res.stagnated = true;
            return true;
        }
        return rn <= opts.tolerance * b0;
    };
    res.x.v = H.full_multigrid(rhs.v);
    residual(H.finest(), res.x.v, rhs.v, r);
    if (!record(norm(r))) {
        // Later passes are conjugate-gradient steps preconditioned by one
        // symmetric V-cycle.
        auto precondition = [&](const Field& res_in) {
            Field z(res_in.size(), Vec3::Zero());
            H.vcycle(0, z, res_in);
            return z;
        };
        Field z = precondition(r), p = z, Ap;
        double rz = dot(r, z);
        for (int pass = 1; pass < opts.max_passes; ++pass) {
            apply_system(H.finest(), p, Ap);
            const double pAp = dot(p, Ap);
            if (!(pAp > 0.0)) break;
            const double alpha = rz / pAp;
            for (std::size_t n = 0; n < r.size(); ++n) {
                res.x.v[n] += alpha * p[n];
                r[n] -= alpha * Ap[n];
            }
            if (record(norm(r))) break;
            z = precondition(r);
            const double rz_next = dot(r, z);
            const double beta = rz_next / rz;
            rz = rz_next;
            for (std::size_t n = 0; n < r.size(); ++n) p[n] = z[n] + beta * p[n];
        }
    }
    if (!best.empty()) res.x.v = std::move(best);
    else res.x.v.assign(res.x.v.size(), Vec3::Zero());
    return res;
}

}  // namespace gatlas
