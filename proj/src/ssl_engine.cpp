#include "qalas/ssl_engine.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "qalas/autodiff.hpp"
#include "qalas/errors.hpp"
#include "qalas/hash.hpp"
#include "qalas/parallel.hpp"

namespace qalas {

namespace {

constexpr int kQnetVersion = 1;
constexpr char kQnetMagic[] = "QNET\n";
constexpr const char* kMapKeys[4] = {"T1", "T2", "PD", "IE"};

double uniform01(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

std::string kernel_name(KernelKind k) { return k == KernelKind::k1x1 ? "1x1" : "3x3"; }

void reject_unknown(const Json& j, std::initializer_list<const char*> known, const char* what)
{
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || item.key() == k;
        if (!ok) throw ConfigError(std::string("unknown ") + what + " key '" + item.key() + "'");
    }
}

// Head value in [0, 1] after the safety margin, then the physical map value.
double head_unit(double pre) { return (1.0 - 2.0 * kHeadMargin) * ad::kernel::sigmoid(pre) + kHeadMargin; }
double head_map(double unit, const OutputRange& r) { return (r.hi - r.lo) * unit + r.lo; }

ad::NDArray slice_input(const Volume& nv, int z)
{
    const Dims& d = nv.dims();
    const int v = static_cast<int>(d.slice_voxels());
    ad::NDArray x({6, v});
    const std::size_t base = d.index(0, 0, z);
    for (int c = 0; c < 6; ++c) std::memcpy(x.data() + static_cast<std::size_t>(c) * v, nv.channel(c).data() + base, v * sizeof(double));
    return x;
}

// Per-voxel loss weights: 1 everywhere, or foreground-only.
std::vector<double> loss_mask(const Volume& nv, bool foreground)
{
    std::vector<double> mask(nv.voxels(), 1.0);
    if (!foreground) return mask;
    for (std::size_t i = 0; i < nv.voxels(); ++i) {
        double m = 0.0;
        for (int c = 0; c < 5; ++c) m = std::max(m, std::abs(nv.at(c, i)));
        mask[i] = m >= kForegroundFraction ? 1.0 : 0.0;
    }
    return mask;
}

struct TapeNet {
    std::vector<ad::Var> w;
    std::vector<ad::Var> b;
};

TapeNet place_weights(ad::Tape& t, const NetworkWeights& weights, bool differentiable)
{
    TapeNet net;
    for (const auto& l : weights.layers) {
        std::vector<int> shape = l.k == 1 ? std::vector<int>{l.cout, l.cin} : std::vector<int>{l.cout, l.cin, 3, 3};
        ad::NDArray w(shape, l.w);
        ad::NDArray b({l.cout}, l.b);
        net.w.push_back(differentiable ? t.leaf(std::move(w)) : t.constant(std::move(w)));
        net.b.push_back(differentiable ? t.leaf(std::move(b)) : t.constant(std::move(b)));
    }
    return net;
}

struct Heads {
    std::array<ad::Var, 4> unit;
    std::array<ad::Var, 4> maps;
};

Heads forward_tape(const TapeNet& net, const NetworkWeights& weights, ad::Var x, int nx, int ny)
{
    const NetworkConfig& c = weights.config;
    auto layer = [&](std::size_t i, ad::Var in) {
        return weights.layers[i].k == 1 ? ad::matmul_channels(net.w[i], net.b[i], in)
                                        : ad::conv3x3(net.w[i], net.b[i], in, nx, ny);
    };
    for (int i = 0; i < c.n_blocks; ++i) x = ad::leaky_relu(ad::instance_norm(layer(i, x), c.norm_eps), c.leaky_slope);
    const ad::Var out = layer(c.n_blocks, x);
    Heads h;
    for (int m = 0; m < 4; ++m) {
        const auto& r = c.output_ranges[m];
        h.unit[m] = ad::affine(ad::sigmoid(ad::row(out, m)), 1.0 - 2.0 * kHeadMargin, kHeadMargin);
        h.maps[m] = ad::affine(h.unit[m], r.hi - r.lo, r.lo);
    }
    return h;
}

double inv_sin_flip(const SequenceTiming& timing) { return 1.0 / std::sin(timing.flip_angle_deg * std::numbers::pi / 180.0); }

// TV of one slice given four range-normalized maps.
ad::Var slice_tv(const std::array<ad::Var, 4>& unit, int nx, int ny)
{
    ad::Var tv{};
    bool first = true;
    for (int m = 0; m < 4; ++m)
        for (int axis : {0, 1}) {
            if ((axis == 0 && nx < 2) || (axis == 1 && ny < 2)) continue;
            const ad::Var term = ad::mean(ad::abs_smoothless(ad::spatial_diff(unit[m], nx, ny, axis)));
            tv = first ? term : ad::add(tv, term);
            first = false;
        }
    return first ? unit[0].tape->constant(ad::NDArray::scalar(0.0)) : tv;
}

struct SliceTerms {
    double loss = 0.0;
    std::vector<double> grad;  // flattened, same order as NetworkWeights::flatten
};

// sse_scale * sum of masked squared residuals + tv_scale * TV for one slice.
SliceTerms slice_objective(const NetworkWeights& weights, const Volume& nv, const std::vector<double>& mask, int z,
                           const SequenceTiming& timing, double sse_scale, double tv_scale, bool with_grad)
{
    const Dims& d = nv.dims();
    const std::size_t v = d.slice_voxels();
    const std::size_t base = d.index(0, 0, z);
    ad::Tape t;
    const TapeNet net = place_weights(t, weights, with_grad);
    const Heads h = forward_tape(net, weights, t.constant(slice_input(nv, z)), d.nx, d.ny);
    SliceTerms out;
    // Non-finite weights surface here; the caller reports epoch and batch.
    for (const auto& m : h.maps)
        if (!std::all_of(m.value().values().begin(), m.value().values().end(), [](double x) { return std::isfinite(x); })) {
            out.loss = std::numeric_limits<double>::quiet_NaN();
            out.grad.assign(with_grad ? weights.parameter_count() : 0, 0.0);
            return out;
        }
    const ad::Var pd = ad::affine(h.maps[2], inv_sin_flip(timing), 0.0);
    const std::span<const double> b1(nv.channel(5).data() + base, v);
    const auto s = ad::signal_model_node(h.maps[0], h.maps[1], pd, h.maps[3], b1, timing);

    const bool masked = std::any_of(mask.begin() + base, mask.begin() + base + v, [](double m) { return m != 1.0; });
    const ad::Var mvar = t.constant(ad::NDArray({static_cast<int>(v)}, std::vector<double>(mask.begin() + base, mask.begin() + base + v)));
    ad::Var sse{};
    for (int c = 0; c < 5; ++c) {
        const ad::Var y = t.constant(ad::NDArray({static_cast<int>(v)}, std::vector<double>(nv.channel(c).data() + base, nv.channel(c).data() + base + v)));
        ad::Var r = ad::sub(s[c], y);
        if (masked) r = ad::mul(r, mvar);
        const ad::Var term = ad::sum(ad::square(r));
        sse = c == 0 ? term : ad::add(sse, term);
    }
    ad::Var loss = ad::affine(sse, sse_scale, 0.0);
    if (tv_scale > 0.0) loss = ad::add(loss, ad::affine(slice_tv(h.unit, d.nx, d.ny), tv_scale, 0.0));

    out.loss = loss.value()[0];
    if (with_grad) {
        t.backward(loss);
        for (std::size_t i = 0; i < net.w.size(); ++i) {
            const auto& gw = net.w[i].grad().values();
            out.grad.insert(out.grad.end(), gw.begin(), gw.end());
            const auto& gb = net.b[i].grad().values();
            out.grad.insert(out.grad.end(), gb.begin(), gb.end());
        }
    }
    return out;
}

struct BatchTerms {
    double loss = 0.0;
    std::vector<double> grad;
};

// Loss over a set of slices: masked mean squared residual over voxels x 5
// plus tv_weight * mean slice TV. Slices run on independent tapes and are
// reduced in list order.
BatchTerms batch_objective(const NetworkWeights& weights, const Volume& nv, const std::vector<double>& mask,
                           const std::vector<int>& slices, const SequenceTiming& timing, double tv_weight,
                           bool with_grad, int threads)
{
    const Dims& d = nv.dims();
    double count = 0.0;
    for (int z : slices) {
        const std::size_t base = d.index(0, 0, z);
        for (std::size_t i = 0; i < d.slice_voxels(); ++i) count += mask[base + i];
    }
    const double sse_scale = 1.0 / (5.0 * std::max(count, 1.0));
    const double tv_scale = tv_weight / static_cast<double>(slices.size());

    std::vector<SliceTerms> terms(slices.size());
    parallel_for(slices.size(), threads, [&](std::size_t first, std::size_t last) {
        for (std::size_t i = first; i < last; ++i)
            terms[i] = slice_objective(weights, nv, mask, slices[i], timing, sse_scale, tv_scale, with_grad);
    });
    BatchTerms out;
    if (with_grad) out.grad.assign(weights.parameter_count(), 0.0);
    for (const auto& s : terms) {
        out.loss += s.loss;
        for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += s.grad[k];
    }
    return out;
}

// Tapeless forward pass of one slice: writes the four head maps.
void forward_slice(const NetworkWeights& weights, const Volume& nv, int z, ParameterMaps& out)
{
    const NetworkConfig& c = weights.config;
    const Dims& d = nv.dims();
    const std::size_t v = d.slice_voxels();
    const ad::NDArray in = slice_input(nv, z);
    std::vector<double> x(in.values()), y, col;
    int channels = 6;
    auto layer = [&](const Layer& l) {
        y.assign(static_cast<std::size_t>(l.cout) * v, 0.0);
        if (l.k == 1) {
            ad::kernel::matmul_channels(l.w.data(), l.b.data(), x.data(), y.data(), l.cout, l.cin, v);
        } else {
            col.assign(static_cast<std::size_t>(l.cin) * 9 * v, 0.0);
            ad::kernel::im2col3x3(x.data(), col.data(), l.cin, d.nx, d.ny);
            ad::kernel::matmul_channels(l.w.data(), l.b.data(), col.data(), y.data(), l.cout, l.cin * 9, v);
        }
        channels = l.cout;
    };
    for (int i = 0; i < c.n_blocks; ++i) {
        layer(weights.layers[i]);
        x.resize(y.size());
        ad::kernel::instance_norm(y.data(), x.data(), nullptr, channels, v, c.norm_eps);
        for (double& e : x) e = ad::kernel::leaky_relu(e, c.leaky_slope);
    }
    layer(weights.layers[c.n_blocks]);
    const std::size_t base = d.index(0, 0, z);
    for (int m = 0; m < 4; ++m)
        for (std::size_t i = 0; i < v; ++i)
            out[m][base + i] = head_map(head_unit(y[static_cast<std::size_t>(m) * v + i]), c.output_ranges[m]);
}

ParameterMaps forward_all(const NetworkWeights& weights, const Volume& nv, int threads)
{
    if (nv.channels() != 6)
        throw ShapeError("network input needs 6 channels (5 contrasts + B1), got " + std::to_string(nv.channels()));
    ParameterMaps out(nv.dims());
    parallel_for(static_cast<std::size_t>(nv.dims().nz), threads, [&](std::size_t first, std::size_t last) {
        for (std::size_t z = first; z < last; ++z) forward_slice(weights, nv, static_cast<int>(z), out);
    });
    return out;
}

InferResult infer_unchecked(const NetworkWeights& weights, const Volume& volume, const SequenceTiming& timing,
                            int threads)
{
    const auto t0 = std::chrono::steady_clock::now();
    const NormalizedVolume nv = normalize_input(volume);
    InferResult r;
    r.maps = forward_all(weights, nv.volume, threads);
    const double pd_scale = inv_sin_flip(timing) * nv.scale;
    for (double& p : r.maps[kPD]) p = p * pd_scale;
    r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

void adam_step(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m, std::vector<double>& v,
               long step, const TrainConfig& c)
{
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p[i] -= c.lr * mh / (std::sqrt(vh) + c.adam_eps);
    }
}

std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

void NetworkConfig::validate() const
{
    if (n_blocks < 1) throw ConfigError("network: n_blocks must be >= 1");
    if (features < 1) throw ConfigError("network: features must be >= 1");
    if (in_channels != 6) throw ConfigError("network: in_channels must be 6 (five contrasts + B1)");
    if (out_channels != 4) throw ConfigError("network: out_channels must be 4 (T1, T2, PD, IE)");
    if (!(leaky_slope >= 0.0) || !std::isfinite(leaky_slope)) throw ConfigError("network: leaky_slope must be >= 0");
    if (!(norm_eps > 0.0)) throw ConfigError("network: norm_eps must be positive");
    for (int m = 0; m < 4; ++m) {
        const auto& r = output_ranges[m];
        if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || !(r.lo < r.hi))
            throw ConfigError(std::string("network: output range ") + kMapKeys[m] + " needs finite lo < hi");
        if (r.lo < 0.0) throw ConfigError(std::string("network: output range ") + kMapKeys[m] + " must be non-negative");
    }
    if (output_ranges[3].lo < kMinIe || output_ranges[3].hi > kMaxIe)
        throw ConfigError("network: IE range must lie within [0.5, 1.0]");
}

Json network_config_to_json(const NetworkConfig& c)
{
    Json ranges = Json::object();
    for (int m = 0; m < 4; ++m) ranges[kMapKeys[m]] = {c.output_ranges[m].lo, c.output_ranges[m].hi};
    return Json{{"n_blocks", c.n_blocks},       {"features", c.features},     {"kernel", kernel_name(c.kernel)},
                {"leaky_slope", c.leaky_slope}, {"in_channels", c.in_channels}, {"out_channels", c.out_channels},
                {"norm_eps", c.norm_eps},       {"output_ranges", ranges}};
}

NetworkConfig network_config_from_json(const Json& j)
{
    if (!j.is_object()) throw ConfigError("network config must be a JSON object");
    reject_unknown(j,
                   {"n_blocks", "features", "kernel", "leaky_slope", "in_channels", "out_channels", "norm_eps",
                    "output_ranges"},
                   "network config");
    NetworkConfig c;
    try {
        c.n_blocks = j.value("n_blocks", c.n_blocks);
        c.features = j.value("features", c.features);
        const auto k = j.value("kernel", std::string("1x1"));
        if (k == "1x1") c.kernel = KernelKind::k1x1;
        else if (k == "3x3") c.kernel = KernelKind::k3x3;
        else throw ConfigError("network: kernel must be \"1x1\" or \"3x3\"");
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
        c.in_channels = j.value("in_channels", c.in_channels);
        c.out_channels = j.value("out_channels", c.out_channels);
        c.norm_eps = j.value("norm_eps", c.norm_eps);
        if (j.contains("output_ranges")) {
            const Json& r = j.at("output_ranges");
            reject_unknown(r, {"T1", "T2", "PD", "IE"}, "output range");
            for (int m = 0; m < 4; ++m)
                if (r.contains(kMapKeys[m])) {
                    const auto pair = r.at(kMapKeys[m]).get<std::array<double, 2>>();
                    c.output_ranges[m] = {pair[0], pair[1]};
                }
        }
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("network config: ") + e.what());
    }
    c.validate();
    return c;
}

std::uint64_t network_fingerprint(const NetworkConfig& config) { return fnv1a64(network_config_to_json(config).dump()); }

void TrainConfig::validate() const
{
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_slices < 1) throw ConfigError("train: batch_slices must be >= 1");
    if (val_every < 1) throw ConfigError("train: val_every must be >= 1");
    if (!(tv_weight >= 0.0) || !std::isfinite(tv_weight)) throw ConfigError("train: tv_weight must be >= 0");
}

Json train_config_to_json(const TrainConfig& c)
{
    return Json{{"lr", c.lr},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"epochs", c.epochs},
                {"batch_slices", c.batch_slices},
                {"val_every", c.val_every},
                {"tv_weight", c.tv_weight},
                {"foreground_mask", c.foreground_mask},
                {"seed", c.seed}};
}

TrainConfig train_config_from_json(const Json& j)
{
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    reject_unknown(j,
                   {"lr", "beta1", "beta2", "adam_eps", "epochs", "batch_slices", "val_every", "tv_weight",
                    "foreground_mask", "seed"},
                   "train config");
    TrainConfig c;
    try {
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_slices = j.value("batch_slices", c.batch_slices);
        c.val_every = j.value("val_every", c.val_every);
        c.tv_weight = j.value("tv_weight", c.tv_weight);
        c.foreground_mask = j.value("foreground_mask", c.foreground_mask);
        c.seed = j.value("seed", c.seed);
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

std::size_t NetworkWeights::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers) n += l.w.size() + l.b.size();
    return n;
}

std::vector<double> NetworkWeights::flatten() const
{
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers) {
        out.insert(out.end(), l.w.begin(), l.w.end());
        out.insert(out.end(), l.b.begin(), l.b.end());
    }
    return out;
}

void NetworkWeights::unflatten(const std::vector<double>& params)
{
    if (params.size() != parameter_count()) throw ShapeError("parameter vector size does not match the network");
    std::size_t k = 0;
    for (auto& l : layers) {
        for (double& w : l.w) w = params[k++];
        for (double& b : l.b) b = params[k++];
    }
}

NetworkWeights init_weights(const NetworkConfig& config, std::uint64_t seed)
{
    config.validate();
    NetworkWeights w;
    w.config = config;
    w.seed = seed;
    std::mt19937_64 rng(seed);
    const int k = config.kernel == KernelKind::k1x1 ? 1 : 3;
    int cin = config.in_channels;
    for (int i = 0; i <= config.n_blocks; ++i) {
        Layer l;
        l.cout = i < config.n_blocks ? config.features : config.out_channels;
        l.cin = cin;
        l.k = k;
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
        l.w.resize(static_cast<std::size_t>(l.cout) * cin * k * k);
        for (double& x : l.w) x = bound * (2.0 * uniform01(rng) - 1.0);
        l.b.assign(l.cout, 0.0);
        w.layers.push_back(std::move(l));
        cin = config.features;
    }
    return w;
}

double percentile(std::vector<double> values, double q)
{
    if (values.empty()) throw DegenerateError("percentile of an empty set");
    const double rank = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const double frac = rank - static_cast<double>(lo);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = values[lo];
    if (frac == 0.0 || lo + 1 >= values.size()) return a;
    const double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return a + frac * (b - a);
}

NormalizedVolume normalize_input(const Volume& volume)
{
    require_signal_volume(volume);
    const std::size_t n = volume.voxels();
    std::vector<double> mags(5 * n);
    double peak = 0.0;
    for (int c = 0; c < 5; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            mags[c * n + i] = std::abs(volume.at(c, i));
            peak = std::max(peak, mags[c * n + i]);
        }
    if (!(peak > 0.0)) throw DegenerateError("cannot normalize an all-zero volume");
    double scale = percentile(std::move(mags), 99.0);
    // Mostly-empty volumes can have a zero p99; fall back to the peak.
    if (!(scale > 0.0)) scale = peak;

    NormalizedVolume out{Volume(volume.dims(), 6, kSignalNames), scale};
    out.volume.voxel_size_mm = volume.voxel_size_mm;
    for (int c = 0; c < 5; ++c)
        for (std::size_t i = 0; i < n; ++i) out.volume.at(c, i) = volume.at(c, i) / scale;
    for (std::size_t i = 0; i < n; ++i) out.volume.at(5, i) = has_b1(volume) ? clamp_b1(volume.at(5, i)) : 1.0;
    return out;
}

ParameterMaps forward_maps(const NetworkWeights& weights, const Volume& normalized)
{
    return forward_all(weights, normalized, 1);
}

double model_pd(double pd_head, const SequenceTiming& timing) { return pd_head * inv_sin_flip(timing); }

double total_variation(const ParameterMaps& maps, const std::array<OutputRange, 4>& ranges)
{
    const Dims& d = maps.dims;
    double total = 0.0;
    for (int z = 0; z < d.nz; ++z) {
        double tv = 0.0;
        for (int m = 0; m < 4; ++m) {
            const double span = ranges[m].hi - ranges[m].lo;
            auto unit = [&](int x, int y) { return (maps[m][d.index(x, y, z)] - ranges[m].lo) / span; };
            if (d.nx >= 2) {
                double acc = 0.0;
                for (int y = 0; y < d.ny; ++y)
                    for (int x = 0; x + 1 < d.nx; ++x) acc += std::abs(unit(x + 1, y) - unit(x, y));
                tv += acc / static_cast<double>((d.nx - 1) * d.ny);
            }
            if (d.ny >= 2) {
                double acc = 0.0;
                for (int y = 0; y + 1 < d.ny; ++y)
                    for (int x = 0; x < d.nx; ++x) acc += std::abs(unit(x, y + 1) - unit(x, y));
                tv += acc / static_cast<double>(d.nx * (d.ny - 1));
            }
        }
        total += tv;
    }
    return total / static_cast<double>(d.nz);
}

double physics_loss(const ParameterMaps& maps, const Volume& volume, const SequenceTiming& timing,
                    const LossOptions& options)
{
    require_signal_volume(volume);
    if (!(maps.dims == volume.dims())) throw ShapeError("maps and volume dims differ");
    std::vector<double> mask(volume.voxels(), 1.0);
    if (options.foreground_mask) mask = loss_mask(normalize_input(volume).volume, true);
    double sse = 0.0, count = 0.0;
    for (std::size_t i = 0; i < volume.voxels(); ++i) {
        if (mask[i] == 0.0) continue;
        const TissueParams t{maps[kT1][i], maps[kT2][i], maps[kPD][i], maps[kIE][i]};
        const double b1 = has_b1(volume) ? clamp_b1(volume.at(5, i)) : 1.0;
        SignalVector s{};
        if (t.pd != 0.0) s = simulate(timing, t, b1);
        for (int c = 0; c < 5; ++c) {
            const double r = volume.at(c, i) - s[c];
            sse += r * r;
        }
        count += 1.0;
    }
    double loss = sse / (5.0 * std::max(count, 1.0));
    if (options.tv_weight > 0.0) loss += options.tv_weight * total_variation(maps, options.ranges);
    return loss;
}

ObjectiveValue training_objective(const NetworkWeights& weights, const Volume& normalized,
                                  const std::vector<int>& slices, const SequenceTiming& timing, double tv_weight,
                                  bool foreground_mask, int threads)
{
    if (normalized.channels() != 6) throw ShapeError("training objective needs a normalized 6-channel volume");
    for (int z : slices)
        if (z < 0 || z >= normalized.dims().nz) throw ShapeError("slice index out of range");
    const auto mask = loss_mask(normalized, foreground_mask);
    BatchTerms t = batch_objective(weights, normalized, mask, slices, timing, tv_weight, true, threads);
    return {t.loss, std::move(t.grad)};
}

std::vector<int> validation_slices(int nz)
{
    std::vector<int> out;
    for (int z = 0; z < nz; ++z)
        if ((z + 1) % 8 == 0) out.push_back(z);
    if (out.empty()) out.push_back(nz - 1);
    return out;
}

TrainResult train(const Volume& volume, const SequenceTiming& timing, const NetworkWeights& initial,
                  const TrainConfig& tc)
{
    tc.validate();
    timing.validate();
    initial.config.validate();
    require_signal_volume(volume);
    const LossOptions loss_opts{tc.tv_weight, tc.foreground_mask, initial.config.output_ranges};

    TrainResult result;
    result.final_weights = initial;
    result.best_weights = initial;
    result.best_val_loss = std::numeric_limits<double>::quiet_NaN();
    if (tc.epochs == 0) {
        result.final_loss = physics_loss(infer_unchecked(initial, volume, timing, tc.threads).maps, volume, timing, loss_opts);
        return result;
    }

    const NormalizedVolume nv = normalize_input(volume);
    const int nz = volume.dims().nz;
    const std::vector<int> val = validation_slices(nz);
    std::vector<int> train_slices;
    for (int z = 0; z < nz; ++z)
        if (nz == 1 || std::find(val.begin(), val.end(), z) == val.end()) train_slices.push_back(z);
    const std::vector<double> mask = loss_mask(nv.volume, tc.foreground_mask);

    NetworkWeights weights = initial;
    std::vector<double> params = weights.flatten();
    std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
    std::mt19937_64 rng(tc.seed);
    long step = 0;
    double best = std::numeric_limits<double>::infinity();

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::vector<int> order = train_slices;
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
            std::swap(order[i - 1], order[std::min(j, i - 1)]);
        }
        double epoch_loss = 0.0;
        int batch = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_slices, ++batch) {
            const std::vector<int> slices(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch_slices)));
            const BatchTerms terms =
                batch_objective(weights, nv.volume, mask, slices, timing, tc.tv_weight, true, tc.threads);
            if (!std::isfinite(terms.loss))
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch));
            adam_step(params, terms.grad, m, v, ++step, tc);
            weights.unflatten(params);
            epoch_loss += terms.loss * static_cast<double>(slices.size());
        }
        HistoryRow row{epoch, epoch_loss / static_cast<double>(order.size()), std::numeric_limits<double>::quiet_NaN()};
        if (epoch % tc.val_every == 0) {
            row.val_loss = batch_objective(weights, nv.volume, mask, val, timing, tc.tv_weight, false, tc.threads).loss;
            if (!std::isfinite(row.val_loss))
                throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
            if (row.val_loss < best) {
                best = row.val_loss;
                result.best_weights = weights;
            }
        }
        result.history.push_back(row);
    }

    weights.timing_fingerprint = timing_fingerprint(timing);
    result.final_weights = weights;
    if (std::isfinite(best)) {
        result.best_val_loss = best;
        result.best_weights.timing_fingerprint = weights.timing_fingerprint;
    } else {
        result.best_weights = weights;
    }
    result.final_loss = physics_loss(infer_unchecked(weights, volume, timing, tc.threads).maps, volume, timing, loss_opts);
    return result;
}

InferResult infer(const NetworkWeights& weights, const Volume& volume, const SequenceTiming& timing, int threads)
{
    timing.validate();
    const std::uint64_t fp = timing_fingerprint(timing);
    if (weights.timing_fingerprint != 0 && weights.timing_fingerprint != fp)
        throw CompatibilityError("checkpoint was trained under timing fingerprint " + hex64(weights.timing_fingerprint) +
                                 " but inference uses " + hex64(fp));
    return infer_unchecked(weights, volume, timing, threads);
}

void require_compatible(const NetworkWeights& weights, const NetworkConfig& expected)
{
    const auto have = network_fingerprint(weights.config);
    const auto want = network_fingerprint(expected);
    if (have != want)
        throw CompatibilityError("network fingerprint " + hex64(have) + " does not match the expected config " + hex64(want));
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path)
{
    std::string out = "epoch,train_loss,val_loss\n";
    for (const auto& r : history)
        out += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + (std::isnan(r.val_loss) ? "" : fmt(r.val_loss)) + "\n";
    write_text_atomic(path, out);
}

void save_checkpoint(const NetworkWeights& weights, const std::filesystem::path& path)
{
    const Json meta{{"format", "qnet"},
                    {"version", kQnetVersion},
                    {"config", network_config_to_json(weights.config)},
                    {"seed", weights.seed},
                    {"fingerprint", hex64(network_fingerprint(weights.config))},
                    {"timing_fingerprint", hex64(weights.timing_fingerprint)},
                    {"n_params", weights.parameter_count()}};
    std::string out = kQnetMagic + meta.dump() + "\n";
    const std::size_t offset = out.size();
    const auto params = weights.flatten();
    out.resize(offset + 8 * params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(params[i]);
        for (int k = 0; k < 8; ++k) out[offset + 8 * i + k] = static_cast<char>((bits >> (8 * k)) & 0xff);
    }
    write_text_atomic(path, out);
}

NetworkWeights load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string magic(sizeof(kQnetMagic) - 1, '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != kQnetMagic) throw FormatError(path.string() + ": not a .qnet checkpoint");
    std::string line;
    std::getline(in, line);
    NetworkWeights w;
    std::size_t n_params = 0;
    std::uint64_t stored_fp = 0;
    try {
        const Json meta = Json::parse(line);
        if (meta.at("version").get<int>() != kQnetVersion)
            throw FormatError(path.string() + ": unsupported checkpoint version " + meta.at("version").dump());
        w.config = network_config_from_json(meta.at("config"));
        w.seed = meta.at("seed").get<std::uint64_t>();
        stored_fp = parse_hex64(meta.at("fingerprint").get<std::string>());
        w.timing_fingerprint = parse_hex64(meta.at("timing_fingerprint").get<std::string>());
        n_params = meta.at("n_params").get<std::size_t>();
    } catch (const Json::exception& e) {
        throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (stored_fp != network_fingerprint(w.config))
        throw CompatibilityError(path.string() + ": stored network fingerprint " + hex64(stored_fp) +
                                 " does not match its config (" + hex64(network_fingerprint(w.config)) + ")");
    const std::uint64_t timing_fp = w.timing_fingerprint;
    w = init_weights(w.config, w.seed);
    w.timing_fingerprint = timing_fp;
    if (w.parameter_count() != n_params)
        throw FormatError(path.string() + ": header lists " + std::to_string(n_params) + " parameters, config implies " +
                          std::to_string(w.parameter_count()));
    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (payload.size() != 8 * n_params)
        throw FormatError(path.string() + ": payload has " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(8 * n_params));
    std::vector<double> params(n_params);
    for (std::size_t i = 0; i < n_params; ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[8 * i + k])) << (8 * k);
        params[i] = std::bit_cast<double>(bits);
        if (!std::isfinite(params[i])) throw FormatError(path.string() + ": non-finite weight at index " + std::to_string(i));
    }
    w.unflatten(params);
    return w;
}

} // namespace qalas
