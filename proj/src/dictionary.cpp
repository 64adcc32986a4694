#include "qalas/dictionary.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "qalas/errors.hpp"
#include "qalas/hash.hpp"
#include "qalas/parallel.hpp"

namespace qalas {

namespace {

constexpr int kDictVersion = 1;
constexpr char kDictMagic[] = "QDICT\n";
// Slack on the k-d tree score bound; far above the rounding of unit-vector
// identities, far below any meaningful score gap.
constexpr double kBoundSlack = 1e-9;

double score5(const double* q, const double* a)
{
    return q[0] * a[0] + q[1] * a[1] + q[2] * a[2] + q[3] * a[3] + q[4] * a[4];
}

double norm5(const SignalVector& s)
{
    double acc = 0.0;
    for (double v : s) acc += v * v;
    return std::sqrt(acc);
}

bool better(double score, std::int64_t index, double best, std::int64_t best_index)
{
    return score > best || (score == best && index < best_index);
}

MatchResult finish(const SignalVector& signal, double signal_norm, const Dictionary& dict, std::int64_t k,
                   double score)
{
    MatchResult r;
    r.index = k;
    r.score = score;
    const auto atom = dict.atom(static_cast<std::size_t>(k));
    double proj = 0.0;
    for (int i = 0; i < 5; ++i) proj += signal[i] * atom[i];
    r.params = dict.params(static_cast<std::size_t>(k));
    r.params.pd = proj / dict.norms[k];
    double res = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double d = signal[i] - r.params.pd * dict.norms[k] * atom[i];
        res += d * d;
    }
    r.residual = std::sqrt(res) / signal_norm;
    return r;
}

Json segments_to_json(const std::vector<GridSegment>& segs)
{
    Json out = Json::array();
    for (const auto& s : segs) out.push_back({s.start, s.end, s.step});
    return out;
}

std::vector<GridSegment> segments_from_json(const Json& j, const char* axis)
{
    if (!j.is_array()) throw ConfigError(std::string("grid axis '") + axis + "' must be an array of [start, end, step]");
    std::vector<GridSegment> out;
    for (const auto& s : j) {
        if (!s.is_array() || s.size() != 3)
            throw ConfigError(std::string("grid axis '") + axis + "': each segment is [start, end, step]");
        out.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>()});
    }
    return out;
}

void validate_axis(const std::vector<GridSegment>& segs, const char* axis)
{
    const std::string name(axis);
    if (segs.empty()) throw ConfigError("grid axis " + name + " has no segments (empty expansion)");
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& s = segs[i];
        if (!(s.step > 0.0)) throw ConfigError("grid axis " + name + ": step must be positive");
        if (!(s.start <= s.end)) throw ConfigError("grid axis " + name + ": segment start exceeds end");
        if (i > 0 && !(segs[i - 1].end <= s.start))
            throw ConfigError("grid axis " + name + ": segments must be sorted and non-overlapping");
    }
}

std::uint32_t le32(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

} // namespace

GridSpec GridSpec::defaults()
{
    GridSpec g;
    g.t1 = {{5.0, 3000.0, 5.0}, {3000.0, 5000.0, 100.0}};
    g.t2 = {{1.0, 350.0, 2.0}, {350.0, 1000.0, 20.0}, {1000.0, 2500.0, 200.0}};
    g.ie = {{0.5, 1.0, 0.02}};
    return g;
}

void GridSpec::validate() const
{
    validate_axis(t1, "t1");
    validate_axis(t2, "t2");
    validate_axis(ie, "ie");
    if (!(t1.front().start > 0.0)) throw ConfigError("grid axis t1 must be positive");
    if (!(t2.front().start > 0.0)) throw ConfigError("grid axis t2 must be positive");
    if (ie.front().start < kMinIe || ie.back().end > kMaxIe) throw ConfigError("grid axis ie must lie in [0.5, 1.0]");
}

Json grid_to_json(const GridSpec& g)
{
    return Json{{"t1", segments_to_json(g.t1)}, {"t2", segments_to_json(g.t2)}, {"ie", segments_to_json(g.ie)}};
}

std::uint64_t grid_fingerprint(const GridSpec& grid) { return fnv1a64(grid_to_json(grid).dump()); }

GridSpec grid_from_json(const Json& j)
{
    if (!j.is_object()) throw ConfigError("grid spec must be a JSON object");
    GridSpec g;
    try {
        g.t1 = segments_from_json(j.at("t1"), "t1");
        g.t2 = segments_from_json(j.at("t2"), "t2");
        g.ie = segments_from_json(j.at("ie"), "ie");
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("grid spec: ") + e.what());
    }
    g.validate();
    return g;
}

std::vector<double> expand_axis(std::span<const GridSegment> segments)
{
    std::vector<double> values;
    for (const auto& s : segments) {
        const double tol = 1e-9 * std::max(1.0, std::abs(s.end));
        for (long i = 0;; ++i) {
            const double v = s.start + static_cast<double>(i) * s.step;
            if (v >= s.end - tol) break;
            values.push_back(v);
        }
        values.push_back(s.end);
    }
    std::sort(values.begin(), values.end());
    std::vector<double> unique;
    for (double v : values)
        if (unique.empty() || v - unique.back() > 1e-9 * std::max(1.0, std::abs(v))) unique.push_back(v);
    if (unique.empty()) throw ConfigError("grid axis expands to no values");
    return unique;
}

GridAxes expand_grid(const GridSpec& grid)
{
    grid.validate();
    return {expand_axis(grid.t1), expand_axis(grid.t2), expand_axis(grid.ie)};
}

int B1Bins::bin_of(double b1) const
{
    const double c = std::clamp(b1, lo, hi);
    // The nudge puts values on a bin edge (1.0 with the default bins) in the
    // upper bin despite the rounding of (c - lo) / width.
    const int bin = static_cast<int>(std::floor((c - lo) / width() + 1e-9));
    return std::clamp(bin, 0, n_bins - 1);
}

TissueParams Dictionary::params(std::size_t k) const
{
    const std::size_t n2 = axes.t2.size(), n3 = axes.ie.size();
    return {axes.t1[k / (n2 * n3)], axes.t2[(k / n3) % n2], 1.0, axes.ie[k % n3]};
}

Dictionary generate_dictionary(const SequenceTiming& timing, const GridSpec& grid, double b1_value, int threads)
{
    timing.validate();
    Dictionary d;
    d.grid = grid;
    d.axes = expand_grid(grid);
    d.timing = timing;
    d.timing_fingerprint = timing_fingerprint(timing);
    d.b1_value = b1_value;
    const std::size_t n2 = d.axes.t2.size(), n3 = d.axes.ie.size();
    const std::size_t k_total = d.axes.size();
    if (k_total > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("dictionary grid too large");
    d.atoms.resize(5 * k_total);
    d.norms.resize(k_total);

    parallel_for(d.axes.t1.size(), threads, [&](std::size_t first, std::size_t last) {
        for (std::size_t i = first; i < last; ++i) {
            const double t1 = d.axes.t1[i];
            const RecoveryBlock block = make_recovery_block(timing, t1, b1_value);
            for (std::size_t j = 0; j < n2; ++j)
                for (std::size_t l = 0; l < n3; ++l) {
                    const std::size_t k = (i * n2 + j) * n3 + l;
                    const double t2 = d.axes.t2[j], ie = d.axes.ie[l];
                    SignalVector s;
                    try {
                        s = simulate_unit_pd(timing, block, t2, ie);
                    } catch (const NumericError& e) {
                        std::ostringstream msg;
                        msg << "dictionary atom (T1=" << t1 << ", T2=" << t2 << ", IE=" << ie << "): " << e.what();
                        throw NumericError(msg.str());
                    }
                    const double n = norm5(s);
                    if (!(n > 0.0) || !std::isfinite(n)) {
                        std::ostringstream msg;
                        msg << "dictionary atom (T1=" << t1 << ", T2=" << t2 << ", IE=" << ie << ") has norm " << n;
                        throw NumericError(msg.str());
                    }
                    d.norms[k] = n;
                    for (int c = 0; c < 5; ++c) d.atoms[5 * k + c] = s[c] / n;
                }
        }
    });
    return d;
}

MatchResult match_voxel(const SignalVector& signal, const Dictionary& dict)
{
    const double n = norm5(signal);
    if (n == 0.0) return {};
    double q[5];
    for (int i = 0; i < 5; ++i) q[i] = signal[i] / n;
    double best = -std::numeric_limits<double>::infinity();
    std::int64_t best_k = -1;
    const double* a = dict.atoms.data();
    for (std::size_t k = 0; k < dict.size(); ++k) {
        const double s = score5(q, a + 5 * k);
        if (s > best) {
            best = s;
            best_k = static_cast<std::int64_t>(k);
        }
    }
    return finish(signal, n, dict, best_k, best);
}

AtomSearchTree::AtomSearchTree(const Dictionary& dict, int leaf_size) : dict_(dict), leaf_size_(std::max(1, leaf_size))
{
    const std::size_t k = dict.size();
    if (k == 0) throw ConfigError("cannot index an empty dictionary");
    order_.resize(k);
    for (std::size_t i = 0; i < k; ++i) order_[i] = static_cast<std::uint32_t>(i);
    nodes_.reserve(2 * k / leaf_size_ + 1);
    build(0, static_cast<std::uint32_t>(k));
    points_.resize(5 * k);
    for (std::size_t i = 0; i < k; ++i) std::memcpy(&points_[5 * i], dict.atoms.data() + 5 * order_[i], 5 * sizeof(double));
}

std::int32_t AtomSearchTree::build(std::uint32_t begin, std::uint32_t end)
{
    Node node;
    node.lo.fill(std::numeric_limits<double>::infinity());
    node.hi.fill(-std::numeric_limits<double>::infinity());
    for (std::uint32_t i = begin; i < end; ++i) {
        const double* a = dict_.atoms.data() + 5 * order_[i];
        for (int c = 0; c < 5; ++c) {
            node.lo[c] = std::min(node.lo[c], a[c]);
            node.hi[c] = std::max(node.hi[c], a[c]);
        }
    }
    node.begin = begin;
    node.end = end;
    node.left = node.right = -1;
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= static_cast<std::uint32_t>(leaf_size_)) return id;

    int dim = 0;
    for (int c = 1; c < 5; ++c)
        if (node.hi[c] - node.lo[c] > node.hi[dim] - node.lo[dim]) dim = c;
    const std::uint32_t mid = begin + (end - begin) / 2;
    const double* atoms = dict_.atoms.data();
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t x, std::uint32_t y) {
                         const double vx = atoms[5 * x + dim], vy = atoms[5 * y + dim];
                         return vx < vy || (vx == vy && x < y);
                     });
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

MatchResult AtomSearchTree::match(const SignalVector& signal) const
{
    const double n = norm5(signal);
    if (n == 0.0) return {};
    double q[5];
    for (int i = 0; i < 5; ++i) q[i] = signal[i] / n;

    auto min_dist2 = [&](const Node& node) {
        double acc = 0.0;
        for (int c = 0; c < 5; ++c) {
            double d = 0.0;
            if (q[c] < node.lo[c]) d = node.lo[c] - q[c];
            else if (q[c] > node.hi[c]) d = q[c] - node.hi[c];
            acc += d * d;
        }
        return acc;
    };

    double best = -std::numeric_limits<double>::infinity();
    std::int64_t best_k = -1;
    struct Pending {
        std::int32_t node;
        double bound;
    };
    std::vector<Pending> stack;
    stack.reserve(64);
    stack.push_back({0, std::numeric_limits<double>::infinity()});
    while (!stack.empty()) {
        const Pending p = stack.back();
        stack.pop_back();
        if (p.bound < best - kBoundSlack) continue;
        const Node& node = nodes_[p.node];
        if (node.left < 0) {
            for (std::uint32_t i = node.begin; i < node.end; ++i) {
                const double s = score5(q, &points_[5 * static_cast<std::size_t>(i)]);
                const std::int64_t k = order_[i];
                if (better(s, k, best, best_k)) {
                    best = s;
                    best_k = k;
                }
            }
            continue;
        }
        const double bl = 1.0 - 0.5 * min_dist2(nodes_[node.left]);
        const double br = 1.0 - 0.5 * min_dist2(nodes_[node.right]);
        // Visit the more promising child first.
        if (bl >= br) {
            stack.push_back({node.right, br});
            stack.push_back({node.left, bl});
        } else {
            stack.push_back({node.left, bl});
            stack.push_back({node.right, br});
        }
    }
    return finish(signal, n, dict_, best_k, best);
}

void save_dictionary(const Dictionary& dict, const std::filesystem::path& path)
{
    const Json header{{"format", "qdict"},
                      {"version", kDictVersion},
                      {"grids", grid_to_json(dict.grid)},
                      {"b1_value", dict.b1_value},
                      {"timing", timing_to_json(dict.timing)},
                      {"timing_fingerprint", hex64(dict.timing_fingerprint)},
                      {"K", dict.size()},
                      {"payload", "atoms f32le K x 5 row-major, then norms f32le K"}};
    std::string out = kDictMagic;
    out += header.dump();
    out += "\n";
    const std::size_t offset = out.size();
    out.resize(offset + 4 * (dict.atoms.size() + dict.norms.size()));
    char* p = out.data() + offset;
    auto put = [&](double v) {
        const std::uint32_t bits = le32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        std::memcpy(p, &bits, 4);
        p += 4;
    };
    for (double v : dict.atoms) put(v);
    for (double v : dict.norms) put(v);
    write_text_atomic(path, out);
}

Dictionary load_dictionary(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string magic(sizeof(kDictMagic) - 1, '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != kDictMagic) throw FormatError(path.string() + ": not a .qdict file");
    std::string line;
    std::getline(in, line);
    Dictionary d;
    std::size_t k_total = 0;
    try {
        const Json h = Json::parse(line);
        if (h.at("version").get<int>() != kDictVersion) throw FormatError(path.string() + ": unsupported qdict version");
        d.grid = grid_from_json(h.at("grids"));
        d.timing = timing_from_json(h.at("timing"));
        d.b1_value = h.at("b1_value").get<double>();
        d.timing_fingerprint = parse_hex64(h.at("timing_fingerprint").get<std::string>());
        k_total = h.at("K").get<std::size_t>();
    } catch (const Json::exception& e) {
        throw FormatError(path.string() + ": bad header: " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (d.timing_fingerprint != timing_fingerprint(d.timing))
        throw FormatError(path.string() + ": timing fingerprint does not match the embedded timing");
    d.axes = expand_grid(d.grid);
    if (d.axes.size() != k_total)
        throw FormatError(path.string() + ": K = " + std::to_string(k_total) + " but grids expand to " +
                          std::to_string(d.axes.size()));

    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t expected = 4 * 6 * k_total;
    if (payload.size() != expected)
        throw FormatError(path.string() + ": payload has " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(expected));
    auto get = [&](std::size_t i) {
        std::uint32_t bits;
        std::memcpy(&bits, payload.data() + 4 * i, 4);
        return static_cast<double>(std::bit_cast<float>(le32(bits)));
    };
    d.atoms.resize(5 * k_total);
    d.norms.resize(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
        double a[5], n2 = 0.0;
        for (int c = 0; c < 5; ++c) {
            a[c] = get(5 * k + c);
            n2 += a[c] * a[c];
        }
        const double n = std::sqrt(n2);
        if (!(n > 0.0) || !std::isfinite(n)) throw FormatError(path.string() + ": degenerate atom " + std::to_string(k));
        for (int c = 0; c < 5; ++c) d.atoms[5 * k + c] = a[c] / n;
        d.norms[k] = get(5 * k_total + k);
        if (!(d.norms[k] > 0.0)) throw FormatError(path.string() + ": non-positive norm at atom " + std::to_string(k));
    }
    return d;
}

std::shared_ptr<const Dictionary> DictionaryCache::get(const SequenceTiming& timing, const GridSpec& grid,
                                                       const B1Bins& bins, int bin, int threads)
{
    const Key key{timing_fingerprint(timing), grid_fingerprint(grid), bin};
    ++clock_;
    if (auto it = entries_.find(key); it != entries_.end()) {
        it->second.last_use = clock_;
        return it->second.dict;
    }
    auto dict = std::make_shared<const Dictionary>(generate_dictionary(timing, grid, bins.center(bin), threads));
    ++generated_;
    evict_if_full();
    entries_[key] = Entry{dict, clock_, false};
    return dict;
}

void DictionaryCache::insert(std::shared_ptr<const Dictionary> dict, const B1Bins& bins)
{
    const Key key{dict->timing_fingerprint, grid_fingerprint(dict->grid), bins.bin_of(dict->b1_value)};
    entries_[key] = Entry{std::move(dict), ++clock_, true};
}

void DictionaryCache::preload(const std::filesystem::path& dir, const B1Bins& bins)
{
    if (!std::filesystem::is_directory(dir)) throw FormatError("dictionary directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".qdict") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) insert(std::make_shared<const Dictionary>(load_dictionary(f)), bins);
}

void DictionaryCache::evict_if_full()
{
    std::size_t unpinned = 0;
    for (const auto& [key, e] : entries_) unpinned += e.pinned ? 0 : 1;
    while (unpinned >= capacity_ && unpinned > 0) {
        auto victim = entries_.end();
        for (auto it = entries_.begin(); it != entries_.end(); ++it)
            if (!it->second.pinned && (victim == entries_.end() || it->second.last_use < victim->second.last_use))
                victim = it;
        entries_.erase(victim);
        --unpinned;
    }
}

ParameterMaps match_volume(const Volume& volume, const SequenceTiming& timing, const GridSpec& grid,
                           const MatchVolumeOptions& options)
{
    require_signal_volume(volume);
    timing.validate();
    grid.validate();
    const std::size_t n = volume.voxels();
    ParameterMaps out(volume.dims());
    DictionaryCache private_cache(1);
    DictionaryCache& cache = options.cache ? *options.cache : private_cache;

    std::vector<std::vector<std::size_t>> by_bin(options.bins.n_bins);
    for (std::size_t v = 0; v < n; ++v) {
        bool silent = true;
        for (int c = 0; c < 5; ++c) silent = silent && volume.at(c, v) == 0.0;
        if (silent) continue;
        const double b1 = has_b1(volume) ? volume.at(5, v) : 1.0;
        by_bin[options.bins.bin_of(b1)].push_back(v);
    }

    for (int bin = 0; bin < options.bins.n_bins; ++bin) {
        const auto& voxels = by_bin[bin];
        if (voxels.empty()) continue;
        const auto dict = cache.get(timing, grid, options.bins, bin, options.threads);
        const AtomSearchTree tree(*dict);
        parallel_for(voxels.size(), options.threads, [&](std::size_t first, std::size_t last) {
            for (std::size_t i = first; i < last; ++i) {
                const std::size_t v = voxels[i];
                SignalVector s;
                for (int c = 0; c < 5; ++c) s[c] = volume.at(c, v);
                const MatchResult r = tree.match(s);
                out[kT1][v] = r.params.t1_ms;
                out[kT2][v] = r.params.t2_ms;
                out[kPD][v] = r.params.pd;
                out[kIE][v] = r.params.ie;
            }
        });
    }
    return out;
}

} // namespace qalas
