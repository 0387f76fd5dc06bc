#include "voldet/phantom.hpp"

#include "voldet/errors.hpp"
#include "voldet/io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace voldet {

namespace {

constexpr double kFwhmToSigma = 1.0 / 2.354820045030949; // FWHM = 2 sqrt(2 ln 2) sigma
constexpr double kStampCutoffSigmas = 4.3;               // exp(-r^2/2s^2) < 1e-4 beyond this
constexpr std::uint64_t kMetaSeedSalt = 0x517cc1b727220a95ULL;

// Writes max(field, gaussian bump) in a box around the center. Center is in
// continuous coordinates; voxel k samples at k + 0.5.
void stamp_gaussian(Volume& field, const Box3D& site, double amplitude) {
    const double sigma = site.d * kFwhmToSigma;
    const double radius = kStampCutoffSigmas * sigma;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    std::array<std::int64_t, 3> lo{}, hi{};
    const std::array<double, 3> c{site.z, site.y, site.x};
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c[a] - radius - 0.5)));
        hi[a] = std::min<std::int64_t>(field.dims[a] - 1,
                                       static_cast<std::int64_t>(std::ceil(c[a] + radius - 0.5)));
    }
    for (std::int64_t z = lo[0]; z <= hi[0]; ++z) {
        const double dz = (static_cast<double>(z) + 0.5) - site.z;
        for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
            const double dy = (static_cast<double>(y) + 0.5) - site.y;
            for (std::int64_t x = lo[2]; x <= hi[2]; ++x) {
                const double dx = (static_cast<double>(x) + 0.5) - site.x;
                const double r2 = dz * dz + dy * dy + dx * dx;
                const float v = static_cast<float>(amplitude * std::exp(-r2 * inv2s2));
                float& cell = field.at(z, y, x);
                if (v > cell) cell = v;
            }
        }
    }
}

} // namespace

void PhantomSpec::validate() const {
    for (std::int64_t d : dims)
        if (d < 4) throw std::invalid_argument("PhantomSpec: dims must be >= 4");
    if (n_lesions < 0 || n_vessels < 0)
        throw std::invalid_argument("PhantomSpec: counts must be >= 0");
    const double min_dim = static_cast<double>(std::min({dims[0], dims[1], dims[2]}));
    if (!(d_min > 0.0 && d_min <= d_max && d_max <= min_dim / 2.0))
        throw std::invalid_argument("PhantomSpec: need 0 < d_min <= d_max <= min(dims)/2");
    if (noise_sigma < 0.0) throw std::invalid_argument("PhantomSpec: noise_sigma must be >= 0");
    if (!(lesion_contrast > 0.0))
        throw std::invalid_argument("PhantomSpec: lesion_contrast must be > 0");
}

PhantomResult generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    PhantomResult out;
    out.volume = Volume(spec.dims[0], spec.dims[1], spec.dims[2], {1.0, 1.0, 1.0},
                        static_cast<float>(kPhantomBackground));

    // Lesions: rejection-sampled so spheres never overlap and stay d_max away
    // from every border.
    std::vector<Box3D> lesions;
    const int max_attempts = 200 * std::max(1, spec.n_lesions);
    int attempts = 0;
    while (static_cast<int>(lesions.size()) < spec.n_lesions) {
        if (++attempts > max_attempts)
            throw GenerationError(
                "generate_phantom: could not pack " + std::to_string(spec.n_lesions) +
                " lesions of d<=" + std::to_string(spec.d_max) + " into volume after " +
                std::to_string(max_attempts) + " attempts (seed " + std::to_string(spec.seed) + ")");
        Box3D cand;
        cand.d = rng.uniform(spec.d_min, spec.d_max);
        cand.z = rng.uniform(spec.d_max, static_cast<double>(spec.dims[0]) - spec.d_max);
        cand.y = rng.uniform(spec.d_max, static_cast<double>(spec.dims[1]) - spec.d_max);
        cand.x = rng.uniform(spec.d_max, static_cast<double>(spec.dims[2]) - spec.d_max);
        bool ok = true;
        for (const Box3D& l : lesions) {
            const double dist = std::sqrt((l.z - cand.z) * (l.z - cand.z) +
                                          (l.y - cand.y) * (l.y - cand.y) +
                                          (l.x - cand.x) * (l.x - cand.x));
            if (!(dist > (l.d + cand.d) / 2.0)) {
                ok = false;
                break;
            }
        }
        if (ok) lesions.push_back(cand);
    }

    Volume bumps(spec.dims[0], spec.dims[1], spec.dims[2]);
    for (const Box3D& l : lesions) stamp_gaussian(bumps, l, spec.lesion_contrast);

    // Vessels: random walks stamping Gaussian cross-sections; stamps near a
    // lesion are skipped so annotated spheres stay clean.
    const double vessel_amp = 0.8 * spec.lesion_contrast;
    for (int v = 0; v < spec.n_vessels; ++v) {
        const double r = rng.uniform(spec.d_min / 4.0, spec.d_min / 2.0);
        std::array<double, 3> pos{rng.uniform(2.0 * r, static_cast<double>(spec.dims[0]) - 2.0 * r),
                                  rng.uniform(2.0 * r, static_cast<double>(spec.dims[1]) - 2.0 * r),
                                  rng.uniform(2.0 * r, static_cast<double>(spec.dims[2]) - 2.0 * r)};
        std::array<double, 3> dir{rng.gaussian(), rng.gaussian(), rng.gaussian()};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
        for (double& c : dir) c /= norm;
        out.vessel_seeds.push_back(Box3D{pos[0], pos[1], pos[2], 2.0 * r});

        const int steps = static_cast<int>(std::max({spec.dims[0], spec.dims[1], spec.dims[2]}) / 2);
        for (int s = 0; s < steps; ++s) {
            bool near_lesion = false;
            for (const Box3D& l : lesions) {
                const double dz = pos[0] - l.z, dy = pos[1] - l.y, dx = pos[2] - l.x;
                const double guard = l.d / 2.0 + 2.0 * r + 1.0;
                if (dz * dz + dy * dy + dx * dx < guard * guard) {
                    near_lesion = true;
                    break;
                }
            }
            if (!near_lesion)
                stamp_gaussian(bumps, Box3D{pos[0], pos[1], pos[2], 2.0 * r}, vessel_amp);

            for (int a = 0; a < 3; ++a) dir[a] += 0.25 * rng.gaussian();
            const double n2 = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
            for (int a = 0; a < 3; ++a) {
                dir[a] /= n2;
                pos[a] += dir[a];
                pos[a] = std::clamp(pos[a], 1.0, static_cast<double>(spec.dims[a]) - 1.0);
            }
        }
    }

    for (std::int64_t i = 0; i < out.volume.voxels(); ++i)
        out.volume.data[static_cast<std::size_t>(i)] += bumps.data[static_cast<std::size_t>(i)];

    if (spec.noise_sigma > 0.0) {
        for (float& v : out.volume.data)
            v += static_cast<float>(spec.noise_sigma * rng.gaussian());
    }

    for (const Box3D& l : lesions) out.annotations.push_back(Annotation{"", l, true});
    return out;
}

DatasetManifest generate_dataset(const DatasetSpec& spec, const std::string& out_dir) {
    if (spec.n_train < 0 || spec.n_test < 0)
        throw std::invalid_argument("generate_dataset: counts must be >= 0");
    if (spec.lesions_min < 0 || spec.lesions_max < spec.lesions_min)
        throw std::invalid_argument("generate_dataset: bad lesion count range");

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);

    DatasetManifest manifest;
    manifest.annotations_path = (dir / "annotations.csv").string();

    std::vector<Annotation> all_annotations;
    const int total = spec.n_train + spec.n_test;
    for (int i = 0; i < total; ++i) {
        const bool train = i < spec.n_train;
        char id[32];
        std::snprintf(id, sizeof(id), "%s_%04d", train ? "train" : "test",
                      train ? i : i - spec.n_train);

        PhantomSpec ps = spec.tpl;
        ps.seed = spec.base_seed + static_cast<std::uint64_t>(i);
        Rng meta(ps.seed ^ kMetaSeedSalt);
        ps.n_lesions = static_cast<int>(meta.uniform_int(spec.lesions_min, spec.lesions_max));

        PhantomResult res = generate_phantom(ps);
        const std::string file = std::string(id) + ".vol";
        write_vol1((dir / file).string(), res.volume);
        for (Annotation& a : res.annotations) {
            a.scan_id = id;
            all_annotations.push_back(a);
        }
        manifest.entries.push_back({id, file, train ? "train" : "test"});
    }

    write_annotations_csv(manifest.annotations_path, all_annotations);
    // manifest stores paths relative to its own directory
    DatasetManifest relative = manifest;
    relative.annotations_path = "annotations.csv";
    write_manifest((dir / "manifest.txt").string(), relative);

    // return absolute-resolved entries for in-process use
    for (DatasetEntry& e : manifest.entries) e.volume_path = (dir / e.volume_path).string();
    return manifest;
}

} // namespace voldet
