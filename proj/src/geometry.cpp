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
#include "gatlas/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace gatlas {

namespace {

struct AxisLookup {
    int i0;
    int i1;
    double f;
    double df;  // d f / d p, zero when clamped
};

AxisLookup axis_lookup(int n, double p)
{
    if (n == 1) return {0, 0, 0.0, 0.0};
    const double hi = double(n - 1);
    double q = p;
    double df = 1.0;
    if (q < 0.0) {
        q = 0.0;
        df = 0.0;
    } else if (q > hi) {
        q = hi;
        df = 0.0;
    }
    const int i0 = std::min(int(std::floor(q)), n - 2);
    return {i0, i0 + 1, q - double(i0), df};
}

}  // namespace

TrilinearStencil::TrilinearStencil(const Dims& dims, const Vec3& p, bool with_gradient)
{
    const AxisLookup ax = axis_lookup(dims.nx, p.x());
    const AxisLookup ay = axis_lookup(dims.ny, p.y());
    const AxisLookup az = axis_lookup(dims.nz, p.z());
    const int xi[2] = {ax.i0, ax.i1};
    const int yi[2] = {ay.i0, ay.i1};
    const int zi[2] = {az.i0, az.i1};
    const double wx[2] = {1.0 - ax.f, ax.f};
    const double wy[2] = {1.0 - ay.f, ay.f};
    const double wz[2] = {1.0 - az.f, az.f};
    const double dx[2] = {-ax.df, ax.df};
    const double dy[2] = {-ay.df, ay.df};
    const double dz[2] = {-az.df, az.df};
    int c = 0;
    for (int kz = 0; kz < 2; ++kz)
        for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx, ++c) {
                idx[c] = dims.index(xi[kx], yi[ky], zi[kz]);
                w[c] = wx[kx] * wy[ky] * wz[kz];
                if (with_gradient) {
                    dw[c][0] = dx[kx] * wy[ky] * wz[kz];
                    dw[c][1] = wx[kx] * dy[ky] * wz[kz];
                    dw[c][2] = wx[kx] * wy[ky] * dz[kz];
                } else {
                    dw[c][0] = dw[c][1] = dw[c][2] = 0.0;
                }
            }
}

std::vector<double> sample_trilinear(const VolumeGrid& field, std::span<const Vec3> coords)
{
    if (field.empty()) throw InvalidInput("sample_trilinear: empty field");
    const int C = field.channels();
    const std::size_t N = field.voxels();
    const auto& raw = field.raw();
    std::vector<double> out(coords.size() * std::size_t(C));
    for (std::size_t p = 0; p < coords.size(); ++p) {
        const TrilinearStencil st(field.dims(), coords[p]);
        for (int c = 0; c < C; ++c) {
            const double* base = raw.data() + std::size_t(c) * N;
            out[p * std::size_t(C) + std::size_t(c)] = st.apply([base](std::size_t i) { return base[i]; });
        }
    }
    return out;
}

std::vector<Vec3> sample_trilinear(const VectorField& field, std::span<const Vec3> coords)
{
    if (field.v.empty()) throw InvalidInput("sample_trilinear: empty field");
    std::vector<Vec3> out(coords.size());
    for (std::size_t p = 0; p < coords.size(); ++p) out[p] = sample_vector(field, coords[p]);
    return out;
}

double sample_scalar(const std::vector<double>& data, const Dims& dims, const Vec3& p)
{
    const TrilinearStencil st(dims, p);
    return st.apply([&](std::size_t i) { return data[i]; });
}

Vec3 sample_vector(const VectorField& field, const Vec3& p)
{
    const TrilinearStencil st(field.dims, p);
    Vec3 s = Vec3::Zero();
    for (int c = 0; c < 8; ++c) s += st.w[c] * field.v[st.idx[c]];
    return s;
}

Vec3 sample_map(const VectorField& map, const Vec3& p)
{
    const TrilinearStencil st(map.dims, p);
    Vec3 s = Vec3::Zero();
    for (int c = 0; c < 8; ++c) {
        const auto q = map.dims.coords(st.idx[c]);
        s += st.w[c] * (map.v[st.idx[c]] - Vec3(q[0], q[1], q[2]));
    }
    return p + s;
}

std::vector<VectorField> spatial_gradient(const VolumeGrid& field)
{
    if (field.empty()) throw InvalidInput("spatial_gradient: empty field");
    const Dims& d = field.dims();
    if (d.nx < 2 || d.ny < 2 || d.nz < 2) throw InvalidInput("spatial_gradient: every axis needs length >= 2");
    const auto& h = field.spacing();
    std::vector<VectorField> out;
    out.reserve(std::size_t(field.channels()));
    for (int c = 0; c < field.channels(); ++c) {
        VectorField g(d, h);
        for (int k = 0; k < d.nz; ++k)
            for (int j = 0; j < d.ny; ++j)
                for (int i = 0; i < d.nx; ++i) {
                    const int pos[3] = {i, j, k};
                    Vec3 grad;
                    for (int a = 0; a < 3; ++a) {
                        int lo[3] = {i, j, k};
                        int hi[3] = {i, j, k};
                        const int n = d[a];
                        lo[a] = std::max(pos[a] - 1, 0);
                        hi[a] = std::min(pos[a] + 1, n - 1);
                        const double fl = field.at(d.index(lo[0], lo[1], lo[2]), c);
                        const double fh = field.at(d.index(hi[0], hi[1], hi[2]), c);
                        grad[a] = (fh - fl) / (double(hi[a] - lo[a]) * h[a]);
                    }
                    g.v[d.index(i, j, k)] = grad;
                }
        out.push_back(std::move(g));
    }
    return out;
}

Mat3 map_jacobian(const VectorField& map, std::size_t n)
{
    const Dims& d = map.dims;
    const auto c = d.coords(n);
    Mat3 J;
    for (int a = 0; a < 3; ++a) {
        const int len = d[a];
        if (len == 1) {
            J.col(a) = Vec3::Unit(a);
            continue;
        }
        int lo[3] = {c[0], c[1], c[2]};
        int hi[3] = {c[0], c[1], c[2]};
        lo[a] = std::max(c[a] - 1, 0);
        hi[a] = std::min(c[a] + 1, len - 1);
        const Vec3& fl = map.v[d.index(lo[0], lo[1], lo[2])];
        const Vec3& fh = map.v[d.index(hi[0], hi[1], hi[2])];
        J.col(a) = (fh - fl) / double(hi[a] - lo[a]);
    }
    return J;
}

std::vector<double> jacobian_determinants(const VectorField& map)
{
    if (map.v.empty()) throw InvalidInput("jacobian_determinants: empty map");
    std::vector<double> det(map.size());
    for (std::size_t n = 0; n < map.size(); ++n) det[n] = map_jacobian(map, n).determinant();
    return det;
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner)
{
    if (!(outer.forward.dims == inner.forward.dims) || !(outer.inverse.dims == inner.inverse.dims))
        throw InvalidInput("compose: grid mismatch");
    DeformationField out;
    out.forward = VectorField(inner.forward.dims, inner.forward.spacing);
    for (std::size_t n = 0; n < out.forward.size(); ++n)
        out.forward.v[n] = sample_map(outer.forward, inner.forward.v[n]);
    out.inverse = VectorField(outer.inverse.dims, outer.inverse.spacing);
    for (std::size_t n = 0; n < out.inverse.size(); ++n)
        out.inverse.v[n] = sample_map(inner.inverse, outer.inverse.v[n]);
    out.jac_det = jacobian_determinants(out.forward);
    return out;
}

}  // namespace gatlas
