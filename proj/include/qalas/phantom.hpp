#pragma once

// Synthetic ground-truth scenes and their simulated acquisitions.
//
// Coordinates are in voxel units with voxel centres at integer indices, so a
// region centred at (31.5, 31.5, 3.5) sits symmetrically in a 64x64x8 grid.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "qalas/config_io.hpp"
#include "qalas/signal_model.hpp"
#include "qalas/volume.hpp"

namespace qalas {

enum class RegionShape { sphere, ellipse };

struct Region {
    std::string name;
    RegionShape shape = RegionShape::sphere;
    std::array<double, 3> center{0.0, 0.0, 0.0};
    // Sphere uses radii[0]; ellipse is an axis-aligned ellipsoid.
    std::array<double, 3> radii{1.0, 1.0, 1.0};
    TissueParams tissue;

    bool contains(double x, double y, double z) const;
};

struct B1Field {
    enum class Kind { uniform, linear_gradient };
    Kind kind = Kind::uniform;
    double value = 1.0;          // uniform
    double lo = 1.0, hi = 1.0;   // linear gradient along x, lo at x = 0, hi at x = nx - 1

    double at(int x, int nx) const;
};

struct SceneSpec {
    Dims dims{64, 64, 8};
    TissueParams background{1000.0, 100.0, 0.0, 1.0};
    std::vector<Region> regions;  // at most 255; later regions win on overlap
    B1Field b1;

    void validate() const;
};

Json scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const Json& json);

struct RenderedScene {
    ParameterMaps truth;
    Volume labels;          // one uint8 channel: 0 background, k for regions[k - 1]
    std::vector<double> b1;
    std::vector<std::string> warnings;  // one per overlapping region pair
};

RenderedScene render_scene(const SceneSpec& spec);

struct NoiseSpec {
    enum class Model { none, gaussian, rician };
    Model model = Model::none;
    double sigma = 0.0;  // in signal units
    std::uint64_t seed = 1;

    void validate() const;
};

Json noise_to_json(const NoiseSpec& noise);
NoiseSpec noise_from_json(const Json& json);

// Standard normal draw for (seed, counter); depends on nothing else, so noise
// is identical for any thread count or voxel visiting order.
double counter_normal(std::uint64_t seed, std::uint64_t counter);

// Five contrasts from simulate() plus the B1 channel. Voxels with PD = 0 are
// silent before noise.
Volume acquire(const ParameterMaps& maps, const std::vector<double>& b1, const SequenceTiming& timing,
               const NoiseSpec& noise, int threads = 1);

// Geometric ladder lo * (hi / lo)^(i / (n - 1)), i = 0..n-1, with exact endpoints.
std::vector<double> geometric_ladder(double lo, double hi, int n);

// Eight T1 spheres (600-3200 ms) and six T2 spheres (40-260 ms) on two rings,
// B1 rising linearly from 0.8 to 1.2 across x.
SceneSpec nist_like_preset(Dims dims = {64, 64, 8});

// White-matter-like, gray-matter-like and fluid-like ellipses. variant 1
// shifts the geometry, tissue values and B1 so it can serve as a second subject.
SceneSpec brain_like_preset(Dims dims = {64, 64, 1}, int variant = 0);

} // namespace qalas
