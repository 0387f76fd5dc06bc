#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace voldet {

// Coordinate convention used throughout the toolkit: grid cell i occupies the
// half-open interval [i, i+1) along its axis and its sample value sits at the
// cell center i + 0.5. The physical position of that center is
// (i + 0.5) * spacing. Continuous coordinates (box centers, RoI geometry)
// live in this same frame, so coordinate / stride converts voxel coordinates
// to feature-cell coordinates exactly. Data is row-major with z slowest.

/// Axis-aligned cube-ish box: center (z, y, x) in continuous voxel
/// coordinates plus one diameter.
struct Box3D {
    double z = 0.0;
    double y = 0.0;
    double x = 0.0;
    double d = 1.0;
};

/// Dense 3D scalar grid with per-axis spacing in mm/voxel.
struct Volume {
    std::array<std::int64_t, 3> dims{0, 0, 0}; // nz, ny, nx
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> data;

    Volume() = default;
    Volume(std::int64_t nz, std::int64_t ny, std::int64_t nx,
           std::array<double, 3> sp = {1.0, 1.0, 1.0}, float fill = 0.0f)
        : dims{nz, ny, nx}, spacing(sp),
          data(static_cast<std::size_t>(nz * ny * nx), fill) {}

    std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }

    float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }

    /// Throws std::invalid_argument when dims/spacing/data are inconsistent
    /// or any value is non-finite.
    void validate() const;
};

/// Resamples onto an isotropic-or-not target grid. Output dims are
/// round(dims * spacing / target); sample points outside the source grid
/// clamp to the boundary voxel.
Volume resample_trilinear(const Volume& vol, std::array<double, 3> target_spacing);

/// Copies a size-shaped block starting at origin (may be negative or
/// out of bounds); voxels outside the source are set to fill. Spacing is
/// preserved.
Volume crop_pad(const Volume& vol, std::array<std::int64_t, 3> origin,
                std::array<std::int64_t, 3> size, float fill);

/// Clamps to [lo, hi] then maps affinely to [0, 1]. lo must be < hi.
Volume normalize_intensity(const Volume& vol, float lo, float hi);

// "VOL1" container: 4-byte magic, nz ny nx as u32 LE, sz sy sx as f32 LE,
// then nz*ny*nx f32 LE values, z slowest.
void write_vol1(const std::string& path, const Volume& vol);
Volume read_vol1(const std::string& path);

} // namespace voldet
