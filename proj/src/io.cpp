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
#include "gatlas/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace gatlas::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap(T v)
{
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
}

template <class T>
void put_le(std::ostream& os, T v)
{
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw InvalidInput("MVOL: truncated file");
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
}

template <class T>
T read_at(const std::vector<char>& buf, std::size_t off, bool swap)
{
    T v{};
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return swap ? byteswap(v) : v;
}

template <class T>
void write_at(std::vector<char>& buf, std::size_t off, T v)
{
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

}  // namespace

VolumeGrid read_mvol(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("MVOL: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MVOL", 4) != 0) throw InvalidInput("MVOL: bad magic in " + path.string());
    const auto version = get_le<std::uint32_t>(is);
    if (version != 1) throw InvalidInput("MVOL: unsupported version " + std::to_string(version));
    Dims d;
    d.nx = int(get_le<std::uint32_t>(is));
    d.ny = int(get_le<std::uint32_t>(is));
    d.nz = int(get_le<std::uint32_t>(is));
    const int channels = int(get_le<std::uint32_t>(is));
    Spacing s;
    for (auto& x : s) x = double(get_le<float>(is));
    VolumeGrid vol(d, s, channels);
    const std::size_t N = d.count();
    for (int c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < N; ++j) {
            const float f = get_le<float>(is);
            if (std::isnan(f)) {
                vol.set_missing(j, c, true);
                vol.at(j, c) = 0.0;
            } else {
                vol.at(j, c) = double(f);
            }
        }
    return vol;
}

void write_mvol(const std::filesystem::path& path, const VolumeGrid& vol)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("MVOL: cannot write " + path.string());
    os.write("MVOL", 4);
    put_le<std::uint32_t>(os, 1);
    put_le<std::uint32_t>(os, std::uint32_t(vol.dims().nx));
    put_le<std::uint32_t>(os, std::uint32_t(vol.dims().ny));
    put_le<std::uint32_t>(os, std::uint32_t(vol.dims().nz));
    put_le<std::uint32_t>(os, std::uint32_t(vol.channels()));
    for (double x : vol.spacing()) put_le<float>(os, float(x));
    const std::size_t N = vol.voxels();
    for (int c = 0; c < vol.channels(); ++c)
        for (std::size_t j = 0; j < N; ++j)
            put_le<float>(os, vol.missing(j, c) ? std::numeric_limits<float>::quiet_NaN() : float(vol.at(j, c)));
    if (!os) throw InvalidInput("MVOL: write failed for " + path.string());
}

void write_mvol(const std::filesystem::path& path, const VectorField& field)
{
    VolumeGrid vol(field.dims, field.spacing, 3);
    for (std::size_t n = 0; n < field.size(); ++n)
        for (int c = 0; c < 3; ++c) vol.at(n, c) = field.v[n][c];
    write_mvol(path, vol);
}

VolumeGrid read_nifti(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("NIfTI: cannot open " + path.string());
    std::vector<char> hdr(348);
    is.read(hdr.data(), 348);
    if (!is) throw InvalidInput("NIfTI: truncated header in " + path.string());
    bool swap = false;
    std::int32_t sizeof_hdr = read_at<std::int32_t>(hdr, 0, false);
    if (sizeof_hdr != 348) {
        swap = true;
        sizeof_hdr = read_at<std::int32_t>(hdr, 0, true);
        if (sizeof_hdr != 348) throw InvalidInput("NIfTI: sizeof_hdr is not 348 in " + path.string());
    }
    if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0)
        throw InvalidInput("NIfTI: only single-file (n+1) images are supported");
    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = read_at<std::int16_t>(hdr, 40 + 2 * std::size_t(i), swap);
    if (dim[0] < 1 || dim[0] > 7) throw InvalidInput("NIfTI: invalid dim[0]");
    for (int i = 5; i <= dim[0]; ++i)
        if (dim[i] > 1) throw InvalidInput("NIfTI: dimensions beyond the fourth are not supported");
    const std::int16_t datatype = read_at<std::int16_t>(hdr, 70, swap);
    float pixdim[8];
    for (int i = 0; i < 8; ++i) pixdim[i] = read_at<float>(hdr, 76 + 4 * std::size_t(i), swap);
    const float vox_offset = read_at<float>(hdr, 108, swap);
    const float slope = read_at<float>(hdr, 112, swap);
    const float inter = read_at<float>(hdr, 116, swap);

    std::size_t bytes = 0;
    switch (datatype) {
    case 4: bytes = 2; break;
    case 8: bytes = 4; break;
    case 16: bytes = 4; break;
    case 64: bytes = 8; break;
    default: throw InvalidInput("NIfTI: unsupported datatype " + std::to_string(datatype));
    }

    Dims d;
    d.nx = dim[0] >= 1 ? std::max<int>(dim[1], 1) : 1;
    d.ny = dim[0] >= 2 ? std::max<int>(dim[2], 1) : 1;
    d.nz = dim[0] >= 3 ? std::max<int>(dim[3], 1) : 1;
    const int channels = dim[0] >= 4 ? std::max<int>(dim[4], 1) : 1;
    Spacing sp;
    for (int a = 0; a < 3; ++a) sp[std::size_t(a)] = pixdim[a + 1] > 0.0f ? double(pixdim[a + 1]) : 1.0;
    VolumeGrid vol(d, sp, channels);

    const std::size_t total = d.count() * std::size_t(channels);
    std::vector<char> data(total * bytes);
    is.seekg(std::streamoff(vox_offset < 352.0f ? 352.0f : vox_offset));
    is.read(data.data(), std::streamsize(data.size()));
    if (!is) throw InvalidInput("NIfTI: truncated voxel data in " + path.string());

    const bool scale = slope != 0.0f && std::isfinite(slope);
    const std::size_t N = d.count();
    for (std::size_t n = 0; n < total; ++n) {
        double v = 0.0;
        switch (datatype) {
        case 4: v = read_at<std::int16_t>(data, n * bytes, swap); break;
        case 8: v = read_at<std::int32_t>(data, n * bytes, swap); break;
        case 16: v = read_at<float>(data, n * bytes, swap); break;
        case 64: v = read_at<double>(data, n * bytes, swap); break;
        }
        if (scale) v = v * double(slope) + double(inter);
        const std::size_t j = n % N;
        const int c = int(n / N);
        if (std::isnan(v)) {
            vol.set_missing(j, c, true);
            vol.at(j, c) = 0.0;
        } else {
            vol.at(j, c) = v;
        }
    }
    return vol;
}

void write_nifti(const std::filesystem::path& path, const VolumeGrid& vol)
{
    std::vector<char> hdr(352, 0);
    write_at<std::int32_t>(hdr, 0, 348);
    const bool four = vol.channels() > 1;
    const std::int16_t dim[8] = {std::int16_t(four ? 4 : 3), std::int16_t(vol.dims().nx), std::int16_t(vol.dims().ny),
                                 std::int16_t(vol.dims().nz), std::int16_t(vol.channels()), 1, 1, 1};
    for (int i = 0; i < 8; ++i) write_at<std::int16_t>(hdr, 40 + 2 * std::size_t(i), dim[i]);
    write_at<std::int16_t>(hdr, 70, 16);
    write_at<std::int16_t>(hdr, 72, 32);
    const float pixdim[8] = {1.0f, float(vol.spacing()[0]), float(vol.spacing()[1]), float(vol.spacing()[2]), 1.0f,
                             1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) write_at<float>(hdr, 76 + 4 * std::size_t(i), pixdim[i]);
    write_at<float>(hdr, 108, 352.0f);
    write_at<float>(hdr, 112, 1.0f);
    write_at<float>(hdr, 116, 0.0f);
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("NIfTI: cannot write " + path.string());
    os.write(hdr.data(), std::streamsize(hdr.size()));
    const std::size_t N = vol.voxels();
    for (int c = 0; c < vol.channels(); ++c)
        for (std::size_t j = 0; j < N; ++j)
            put_le<float>(os, vol.missing(j, c) ? std::numeric_limits<float>::quiet_NaN() : float(vol.at(j, c)));
    if (!os) throw InvalidInput("NIfTI: write failed for " + path.string());
}

bool is_nifti_path(const std::filesystem::path& path) { return path.extension() == ".nii"; }

VolumeGrid read_volume(const std::filesystem::path& path)
{
    return is_nifti_path(path) ? read_nifti(path) : read_mvol(path);
}

}  // namespace gatlas::io
