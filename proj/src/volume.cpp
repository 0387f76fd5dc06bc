#include "voldet/volume.hpp"

#include "voldet/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace voldet {

void Volume::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw std::invalid_argument("Volume: all dims must be >= 1");
    for (double s : spacing)
        if (!(s > 0.0) || !std::isfinite(s))
            throw std::invalid_argument("Volume: spacing must be positive and finite");
    if (static_cast<std::int64_t>(data.size()) != voxels())
        throw std::invalid_argument("Volume: data length does not match dims");
    for (float v : data)
        if (!std::isfinite(v)) throw std::invalid_argument("Volume: non-finite voxel value");
}

namespace {

// Per-axis linear interpolation setup for one output index: the two source
// cells and the blend weight, with clamp-to-edge outside [0, n-1].
struct AxisTap {
    std::int64_t i0;
    std::int64_t i1;
    float w1;
};

AxisTap axis_tap(double center_coord, std::int64_t n) {
    const double u = center_coord - 0.5; // cell-center frame
    double fl = std::floor(u);
    std::int64_t i0 = static_cast<std::int64_t>(fl);
    double w1 = u - fl;
    std::int64_t i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0.0; }
    if (i1 > n - 1) { i1 = n - 1; if (i0 > n - 1) { i0 = n - 1; } w1 = (i0 == i1) ? 0.0 : w1; }
    return {i0, i1, static_cast<float>(w1)};
}

} // namespace

Volume resample_trilinear(const Volume& vol, std::array<double, 3> target_spacing) {
    vol.validate();
    for (double t : target_spacing)
        if (!(t > 0.0) || !std::isfinite(t))
            throw std::invalid_argument("resample_trilinear: target spacing must be positive");

    std::array<std::int64_t, 3> odims{};
    for (int a = 0; a < 3; ++a) {
        odims[a] = std::max<std::int64_t>(
            1, std::llround(static_cast<double>(vol.dims[a]) * vol.spacing[a] / target_spacing[a]));
    }

    Volume out(odims[0], odims[1], odims[2], target_spacing);

    // Identity spacing keeps the data bit-identical.
    if (vol.spacing == target_spacing && odims == vol.dims) {
        out.data = vol.data;
        return out;
    }

    std::vector<AxisTap> tz(odims[0]), ty(odims[1]), tx(odims[2]);
    for (int a = 0; a < 3; ++a) {
        auto& taps = (a == 0) ? tz : (a == 1) ? ty : tx;
        for (std::int64_t j = 0; j < odims[a]; ++j) {
            const double phys = (static_cast<double>(j) + 0.5) * target_spacing[a];
            taps[static_cast<std::size_t>(j)] = axis_tap(phys / vol.spacing[a], vol.dims[a]);
        }
    }

    const std::int64_t ny = vol.dims[1], nx = vol.dims[2];
    const float* src = vol.data.data();
    parallel_for(odims[0], [&](std::int64_t z) {
        const AxisTap& az = tz[static_cast<std::size_t>(z)];
        float* dst = out.data.data() + z * odims[1] * odims[2];
        for (std::int64_t y = 0; y < odims[1]; ++y) {
            const AxisTap& ay = ty[static_cast<std::size_t>(y)];
            for (std::int64_t x = 0; x < odims[2]; ++x) {
                const AxisTap& ax = tx[static_cast<std::size_t>(x)];
                auto pick = [&](std::int64_t iz, std::int64_t iy, std::int64_t ix) {
                    return src[(iz * ny + iy) * nx + ix];
                };
                const float c00 = pick(az.i0, ay.i0, ax.i0) * (1.0f - ax.w1) + pick(az.i0, ay.i0, ax.i1) * ax.w1;
                const float c01 = pick(az.i0, ay.i1, ax.i0) * (1.0f - ax.w1) + pick(az.i0, ay.i1, ax.i1) * ax.w1;
                const float c10 = pick(az.i1, ay.i0, ax.i0) * (1.0f - ax.w1) + pick(az.i1, ay.i0, ax.i1) * ax.w1;
                const float c11 = pick(az.i1, ay.i1, ax.i0) * (1.0f - ax.w1) + pick(az.i1, ay.i1, ax.i1) * ax.w1;
                const float c0 = c00 * (1.0f - ay.w1) + c01 * ay.w1;
                const float c1 = c10 * (1.0f - ay.w1) + c11 * ay.w1;
                dst[y * odims[2] + x] = c0 * (1.0f - az.w1) + c1 * az.w1;
            }
        }
    });
    return out;
}

Volume crop_pad(const Volume& vol, std::array<std::int64_t, 3> origin,
                std::array<std::int64_t, 3> size, float fill) {
    for (std::int64_t s : size)
        if (s < 1) throw std::invalid_argument("crop_pad: size components must be >= 1");

    Volume out(size[0], size[1], size[2], vol.spacing, fill);
    const std::int64_t ny = vol.dims[1], nx = vol.dims[2];

    // Intersection of the requested window with the source extent.
    std::array<std::int64_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max<std::int64_t>(0, -origin[a]);
        hi[a] = std::min<std::int64_t>(size[a], vol.dims[a] - origin[a]);
    }
    if (lo[0] >= hi[0] || lo[1] >= hi[1] || lo[2] >= hi[2]) return out;

    for (std::int64_t z = lo[0]; z < hi[0]; ++z) {
        for (std::int64_t y = lo[1]; y < hi[1]; ++y) {
            const float* src = vol.data.data() +
                ((z + origin[0]) * ny + (y + origin[1])) * nx + (lo[2] + origin[2]);
            float* dst = out.data.data() + (z * size[1] + y) * size[2] + lo[2];
            std::memcpy(dst, src, static_cast<std::size_t>(hi[2] - lo[2]) * sizeof(float));
        }
    }
    return out;
}

Volume normalize_intensity(const Volume& vol, float lo, float hi) {
    if (!(lo < hi)) throw std::invalid_argument("normalize_intensity: lo must be < hi");
    Volume out = vol;
    const float scale = 1.0f / (hi - lo);
    for (float& v : out.data) v = (std::clamp(v, lo, hi) - lo) * scale;
    return out;
}

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ofstream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

float get_f32(std::ifstream& is) {
    const std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

} // namespace

void write_vol1(const std::string& path, const Volume& vol) {
    vol.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_vol1: cannot open " + path);
    os.write("VOL1", 4);
    for (std::int64_t d : vol.dims) put_u32(os, static_cast<std::uint32_t>(d));
    for (double s : vol.spacing) put_f32(os, static_cast<float>(s));
    // bulk little-endian write; x86/ARM little-endian fast path
    os.write(reinterpret_cast<const char*>(vol.data.data()),
             static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
    if (!os) throw std::runtime_error("write_vol1: write failed for " + path);
}

Volume read_vol1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_vol1: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VOL1", 4) != 0)
        throw std::runtime_error("read_vol1: bad magic in " + path);
    Volume vol;
    for (auto& d : vol.dims) d = get_u32(is);
    for (auto& s : vol.spacing) s = get_f32(is);
    if (!is) throw std::runtime_error("read_vol1: truncated header in " + path);
    vol.data.resize(static_cast<std::size_t>(vol.voxels()));
    is.read(reinterpret_cast<char*>(vol.data.data()),
            static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("read_vol1: truncated data in " + path);
    vol.validate();
    return vol;
}

} // namespace voldet
