#pragma once

#include "voldet/rng.hpp"
#include "voldet/volume.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace voldet {

/// Synthetic CT-phantom recipe. Generation is a pure function of this spec:
/// same spec, same bytes, on any platform.
struct PhantomSpec {
    std::uint64_t seed = 0;
    std::array<std::int64_t, 3> dims{64, 64, 64};
    int n_lesions = 2;
    double d_min = 4.0;
    double d_max = 12.0;
    int n_vessels = 3;
    double noise_sigma = 0.05;
    double lesion_contrast = 0.4;

    void validate() const;
};

struct Annotation {
    std::string scan_id;
    Box3D box;
    bool is_lesion = true;
};

struct PhantomResult {
    Volume volume;
    std::vector<Annotation> annotations;    // lesions only
    std::vector<Box3D> vessel_seeds;        // distractor metadata for tests / ABS oracles
};

/// Background level of generated phantoms (lesions and vessels are additive
/// bumps above it).
constexpr double kPhantomBackground = 0.2;

/// Builds a phantom: Gaussian-profile lesion spheres (FWHM = annotated
/// diameter, peak offset = lesion_contrast) at non-overlapping centers at
/// least d_max from the borders, random-walk bright tubes of radius
/// <= d_min/2, and additive Gaussian noise. Throws GenerationError when the
/// lesions cannot be packed after bounded retries.
PhantomResult generate_phantom(const PhantomSpec& spec);

struct DatasetEntry {
    std::string scan_id;
    std::string volume_path;
    std::string split; // "train" or "test"
};

struct DatasetManifest {
    std::vector<DatasetEntry> entries;
    std::string annotations_path;
};

/// Per-scan knobs the dataset generator varies on top of a PhantomSpec
/// template.
struct DatasetSpec {
    std::uint64_t base_seed = 1;
    int n_train = 0;
    int n_test = 0;
    PhantomSpec tpl;
    int lesions_min = 1;
    int lesions_max = 3;
};

/// Writes VOL1 scans plus one annotations CSV under out_dir and returns the
/// manifest (also written to out_dir/manifest.txt). Scan i uses seed
/// base_seed + i.
DatasetManifest generate_dataset(const DatasetSpec& spec, const std::string& out_dir);

} // namespace voldet
