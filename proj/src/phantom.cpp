#include "qalas/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "qalas/errors.hpp"
#include "qalas/parallel.hpp"

namespace qalas {

namespace {

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void check_tissue(const TissueParams& t, const std::string& where)
{
    const bool finite = std::isfinite(t.t1_ms) && std::isfinite(t.t2_ms) && std::isfinite(t.pd) && std::isfinite(t.ie);
    if (!finite || !(t.t1_ms > 0.0) || !(t.t2_ms > 0.0) || !(t.pd >= 0.0) || !(t.ie >= kMinIe && t.ie <= kMaxIe))
        throw ConfigError(where + ": tissue needs T1, T2 > 0, PD >= 0 and IE in [0.5, 1.0]");
}

Json tissue_to_json(const TissueParams& t)
{
    return Json{{"t1_ms", t.t1_ms}, {"t2_ms", t.t2_ms}, {"pd", t.pd}, {"ie", t.ie}};
}

TissueParams tissue_from_json(const Json& j)
{
    for (const auto& item : j.items())
        if (item.key() != "t1_ms" && item.key() != "t2_ms" && item.key() != "pd" && item.key() != "ie")
            throw ConfigError("unknown tissue key '" + item.key() + "'");
    return {j.at("t1_ms").get<double>(), j.at("t2_ms").get<double>(), j.at("pd").get<double>(), j.at("ie").get<double>()};
}

Region ellipse(std::string name, std::array<double, 3> c, std::array<double, 3> r, TissueParams t)
{
    return Region{std::move(name), RegionShape::ellipse, c, r, t};
}

} // namespace

bool Region::contains(double x, double y, double z) const
{
    const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
    if (shape == RegionShape::sphere) return dx * dx + dy * dy + dz * dz <= radii[0] * radii[0];
    const double u = dx / radii[0], v = dy / radii[1], w = dz / radii[2];
    return u * u + v * v + w * w <= 1.0;
}

double B1Field::at(int x, int nx) const
{
    if (kind == Kind::uniform) return value;
    if (nx < 2) return 0.5 * (lo + hi);
    return lo + (hi - lo) * static_cast<double>(x) / static_cast<double>(nx - 1);
}

void SceneSpec::validate() const
{
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw ConfigError("scene: dims must be positive");
    check_tissue(background, "scene background");
    if (regions.size() > 255) throw ConfigError("scene: at most 255 regions fit an 8-bit label volume");
    for (const auto& r : regions) {
        const std::string where = "scene region '" + r.name + "'";
        check_tissue(r.tissue, where);
        const int n = r.shape == RegionShape::sphere ? 1 : 3;
        for (int a = 0; a < n; ++a)
            if (!(r.radii[a] > 0.0) || !std::isfinite(r.radii[a])) throw ConfigError(where + ": radius must be positive");
        const double extent[3] = {static_cast<double>(dims.nx), static_cast<double>(dims.ny), static_cast<double>(dims.nz)};
        for (int a = 0; a < 3; ++a)
            if (!std::isfinite(r.center[a]) || r.center[a] < -0.5 || r.center[a] > extent[a] - 0.5)
                throw ConfigError(where + ": centre lies outside the volume");
    }
    const double lo = b1.kind == B1Field::Kind::uniform ? b1.value : std::min(b1.lo, b1.hi);
    const double hi = b1.kind == B1Field::Kind::uniform ? b1.value : std::max(b1.lo, b1.hi);
    if (!(lo > 0.0) || !std::isfinite(hi)) throw ConfigError("scene: B1 must be positive and finite");
}

Json scene_to_json(const SceneSpec& s)
{
    Json regions = Json::array();
    for (const auto& r : s.regions) {
        Json j{{"name", r.name},
               {"shape", r.shape == RegionShape::sphere ? "sphere" : "ellipse"},
               {"center", r.center},
               {"tissue", tissue_to_json(r.tissue)}};
        if (r.shape == RegionShape::sphere) j["radius"] = r.radii[0];
        else j["radii"] = r.radii;
        regions.push_back(std::move(j));
    }
    Json b1 = s.b1.kind == B1Field::Kind::uniform ? Json{{"kind", "uniform"}, {"value", s.b1.value}}
                                                  : Json{{"kind", "linear_gradient"}, {"lo", s.b1.lo}, {"hi", s.b1.hi}};
    return Json{{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
                {"background", tissue_to_json(s.background)},
                {"b1_field", b1},
                {"regions", regions}};
}

SceneSpec scene_from_json(const Json& j)
{
    SceneSpec s;
    try {
        for (const auto& item : j.items())
            if (item.key() != "dims" && item.key() != "background" && item.key() != "b1_field" && item.key() != "regions")
                throw ConfigError("unknown scene key '" + item.key() + "'");
        const auto d = j.at("dims").get<std::array<int, 3>>();
        s.dims = {d[0], d[1], d[2]};
        if (j.contains("background")) s.background = tissue_from_json(j.at("background"));
        if (j.contains("b1_field")) {
            const Json& b = j.at("b1_field");
            const auto kind = b.at("kind").get<std::string>();
            if (kind == "uniform") {
                s.b1 = {B1Field::Kind::uniform, b.at("value").get<double>(), 1.0, 1.0};
            } else if (kind == "linear_gradient") {
                s.b1 = {B1Field::Kind::linear_gradient, 1.0, b.at("lo").get<double>(), b.at("hi").get<double>()};
            } else {
                throw ConfigError("scene: b1_field kind must be uniform or linear_gradient");
            }
        }
        for (const auto& r : j.value("regions", Json::array())) {
            Region reg;
            reg.name = r.value("name", std::string("region") + std::to_string(s.regions.size() + 1));
            const auto shape = r.at("shape").get<std::string>();
            reg.center = r.at("center").get<std::array<double, 3>>();
            if (shape == "sphere") {
                reg.shape = RegionShape::sphere;
                const double rad = r.at("radius").get<double>();
                reg.radii = {rad, rad, rad};
            } else if (shape == "ellipse") {
                reg.shape = RegionShape::ellipse;
                reg.radii = r.at("radii").get<std::array<double, 3>>();
            } else {
                throw ConfigError("scene: region shape must be sphere or ellipse");
            }
            reg.tissue = tissue_from_json(r.at("tissue"));
            s.regions.push_back(std::move(reg));
        }
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("scene spec: ") + e.what());
    }
    s.validate();
    return s;
}

RenderedScene render_scene(const SceneSpec& spec)
{
    spec.validate();
    const Dims& d = spec.dims;
    RenderedScene out;
    out.truth = ParameterMaps(d);
    out.labels = Volume(d, 1, {"label"});
    out.labels.sample_type = SampleType::uint8;
    out.b1.resize(d.voxels());

    std::map<std::pair<int, int>, std::size_t> overlaps;
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                int label = 0;
                for (std::size_t k = 0; k < spec.regions.size(); ++k) {
                    if (!spec.regions[k].contains(x, y, z)) continue;
                    if (label != 0) ++overlaps[{label, static_cast<int>(k) + 1}];
                    label = static_cast<int>(k) + 1;
                }
                const TissueParams& t = label == 0 ? spec.background : spec.regions[label - 1].tissue;
                out.truth[kT1][i] = t.t1_ms;
                out.truth[kT2][i] = t.t2_ms;
                out.truth[kPD][i] = t.pd;
                out.truth[kIE][i] = t.ie;
                out.labels.at(0, i) = label;
                out.b1[i] = spec.b1.at(x, d.nx);
            }
    for (const auto& [pair, n] : overlaps)
        out.warnings.push_back("region '" + spec.regions[pair.second - 1].name + "' overrides region '" +
                               spec.regions[pair.first - 1].name + "' on " + std::to_string(n) + " voxels");
    return out;
}

void NoiseSpec::validate() const
{
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("noise: sigma must be >= 0");
}

Json noise_to_json(const NoiseSpec& n)
{
    const char* model = n.model == NoiseSpec::Model::none ? "none" : n.model == NoiseSpec::Model::gaussian ? "gaussian" : "rician";
    return Json{{"model", model}, {"sigma", n.sigma}, {"seed", n.seed}};
}

NoiseSpec noise_from_json(const Json& j)
{
    NoiseSpec n;
    try {
        const auto model = j.value("model", std::string("none"));
        if (model == "none") n.model = NoiseSpec::Model::none;
        else if (model == "gaussian") n.model = NoiseSpec::Model::gaussian;
        else if (model == "rician") n.model = NoiseSpec::Model::rician;
        else throw ConfigError("noise: model must be none, gaussian or rician");
        n.sigma = j.value("sigma", 0.0);
        n.seed = j.value("seed", std::uint64_t{1});
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("noise spec: ") + e.what());
    }
    n.validate();
    return n;
}

double counter_normal(std::uint64_t seed, std::uint64_t counter)
{
    const std::uint64_t key = splitmix64(seed);
    const std::uint64_t a = splitmix64(key ^ (2 * counter));
    const std::uint64_t b = splitmix64(key ^ (2 * counter + 1));
    // u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Volume acquire(const ParameterMaps& maps, const std::vector<double>& b1, const SequenceTiming& timing,
               const NoiseSpec& noise, int threads)
{
    timing.validate();
    noise.validate();
    const Dims& d = maps.dims;
    if (b1.size() != d.voxels()) throw ShapeError("acquire: B1 map does not match the maps");
    Volume v(d, 6, kSignalNames);
    parallel_for(d.voxels(), threads, [&](std::size_t first, std::size_t last) {
        for (std::size_t i = first; i < last; ++i) {
            const TissueParams t{maps[kT1][i], maps[kT2][i], maps[kPD][i], maps[kIE][i]};
            SignalVector s{};
            if (t.pd != 0.0) s = simulate(timing, t, b1[i]);
            for (int c = 0; c < 5; ++c) {
                const std::uint64_t counter = 2 * (5 * static_cast<std::uint64_t>(i) + c);
                double y = s[c];
                if (noise.model == NoiseSpec::Model::gaussian) {
                    y += noise.sigma * counter_normal(noise.seed, counter);
                } else if (noise.model == NoiseSpec::Model::rician) {
                    const double re = y + noise.sigma * counter_normal(noise.seed, counter);
                    const double im = noise.sigma * counter_normal(noise.seed, counter + 1);
                    y = std::hypot(re, im);
                }
                v.at(c, i) = y;
            }
            v.at(5, i) = b1[i];
        }
    });
    return v;
}

std::vector<double> geometric_ladder(double lo, double hi, int n)
{
    if (!(lo > 0.0) || !(hi > lo) || n < 2) throw ConfigError("geometric ladder needs 0 < lo < hi and n >= 2");
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
    out.front() = lo;
    out.back() = hi;
    return out;
}

SceneSpec nist_like_preset(Dims dims)
{
    SceneSpec s;
    s.dims = dims;
    s.background = {1000.0, 100.0, 0.0, 1.0};
    s.b1 = {B1Field::Kind::linear_gradient, 1.0, 0.8, 1.2};
    const double cx = 0.5 * (dims.nx - 1), cy = 0.5 * (dims.ny - 1), cz = 0.5 * (dims.nz - 1);
    const double size = std::min(dims.nx, dims.ny);
    const double radius = std::min(0.055 * size, 0.5 * dims.nz - 0.25);

    // T1 plate: T1 ladder at a fixed mid-range T2; T2 plate the other way round.
    const auto t1 = geometric_ladder(600.0, 3200.0, 8);
    const auto t2 = geometric_ladder(40.0, 260.0, 6);
    const double t2_fixed = std::sqrt(40.0 * 260.0);
    const double t1_fixed = std::sqrt(600.0 * 3200.0);
    for (int k = 0; k < 8; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 8.0;
        s.regions.push_back({"T1_" + std::to_string(k + 1), RegionShape::sphere,
                             {cx + 0.34 * size * std::cos(a), cy + 0.34 * size * std::sin(a), cz},
                             {radius, radius, radius}, {t1[k], t2_fixed, 0.8, 0.9}});
    }
    for (int k = 0; k < 6; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 6.0 + std::numbers::pi / 6.0;
        s.regions.push_back({"T2_" + std::to_string(k + 1), RegionShape::sphere,
                             {cx + 0.17 * size * std::cos(a), cy + 0.17 * size * std::sin(a), cz},
                             {radius, radius, radius}, {t1_fixed, t2[k], 0.8, 0.9}});
    }
    return s;
}

SceneSpec brain_like_preset(Dims dims, int variant)
{
    if (variant != 0 && variant != 1) throw ConfigError("brain-like preset: variant must be 0 or 1");
    const bool b = variant == 1;
    SceneSpec s;
    s.dims = dims;
    s.background = {1000.0, 100.0, 0.0, 1.0};
    s.b1 = b ? B1Field{B1Field::Kind::linear_gradient, 1.0, 1.15, 0.85}
             : B1Field{B1Field::Kind::linear_gradient, 1.0, 0.85, 1.15};
    const double nx = dims.nx, ny = dims.ny;
    const double cx = 0.5 * (nx - 1) + (b ? 0.05 * nx : 0.0);
    const double cy = 0.5 * (ny - 1) - (b ? 0.03 * ny : 0.0);
    const double cz = 0.5 * (dims.nz - 1);
    const double g = b ? 0.9 : 1.0;  // overall head size
    const double rz = 4.0 * dims.nz;  // columns through every slice

    const TissueParams wm = b ? TissueParams{900.0, 62.0, 0.68, 0.9} : TissueParams{830.0, 55.0, 0.7, 0.9};
    const TissueParams gm = b ? TissueParams{1450.0, 95.0, 0.82, 0.88} : TissueParams{1330.0, 80.0, 0.8, 0.9};
    const TissueParams fluid = b ? TissueParams{3800.0, 1800.0, 1.0, 0.9} : TissueParams{4000.0, 2000.0, 1.0, 0.9};

    s.regions = {
        ellipse("fluid_outer", {cx, cy, cz}, {0.44 * g * nx, 0.48 * g * ny, rz}, fluid),
        ellipse("gray_matter", {cx, cy, cz}, {0.40 * g * nx, 0.44 * g * ny, rz}, gm),
        ellipse("white_matter", {cx, cy, cz}, {0.30 * g * nx, 0.34 * g * ny, rz}, wm),
        ellipse("gray_nucleus_left", {cx - 0.13 * g * nx, cy + 0.04 * g * ny, cz}, {0.05 * g * nx, 0.08 * g * ny, rz}, gm),
        ellipse("gray_nucleus_right", {cx + 0.13 * g * nx, cy + 0.04 * g * ny, cz}, {0.05 * g * nx, 0.08 * g * ny, rz}, gm),
        ellipse("fluid_left", {cx - 0.06 * g * nx, cy - 0.02 * g * ny, cz}, {0.03 * g * nx, 0.13 * g * ny, rz}, fluid),
        ellipse("fluid_right", {cx + 0.06 * g * nx, cy - 0.02 * g * ny, cz}, {0.03 * g * nx, 0.13 * g * ny, rz}, fluid),
    };
    return s;
}

} // namespace qalas
