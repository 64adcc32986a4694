#pragma once

// Bloch-simulated dictionary over a (T1, T2, IE) grid and voxel-wise matching.
//
// Atoms are unit-norm magnitude signal vectors simulated at PD = 1 for one B1
// value. A voxel is matched to the atom with the largest normalized inner
// product (ties go to the lowest row); PD is the least-squares scale of the
// unnormalized simulated signal onto the measurement.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <tuple>
#include <vector>

#include "qalas/config_io.hpp"
#include "qalas/signal_model.hpp"
#include "qalas/volume.hpp"

namespace qalas {

struct GridSegment {
    double start = 0.0;
    double end = 0.0;
    double step = 1.0;
};

struct GridSpec {
    std::vector<GridSegment> t1;
    std::vector<GridSegment> t2;
    std::vector<GridSegment> ie;

    // T1 5..3000 step 5, 3000..5000 step 100; T2 1..350 step 2, 350..1000
    // step 20, 1000..2500 step 200; IE 0.5..1.0 step 0.02.
    static GridSpec defaults();
    void validate() const;
};

Json grid_to_json(const GridSpec& grid);
std::uint64_t grid_fingerprint(const GridSpec& grid);
GridSpec grid_from_json(const Json& json);

// Sorted unique values of one axis: each segment expands to start, start+step,
// ... below end, plus end itself; shared segment boundaries appear once.
std::vector<double> expand_axis(std::span<const GridSegment> segments);

struct GridAxes {
    std::vector<double> t1;
    std::vector<double> t2;
    std::vector<double> ie;
    std::size_t size() const { return t1.size() * t2.size() * ie.size(); }
};

GridAxes expand_grid(const GridSpec& grid);

struct B1Bins {
    double lo = kB1Min;
    double hi = kB1Max;
    int n_bins = 100;

    double width() const { return (hi - lo) / n_bins; }
    // Clamps to [lo, hi] first, so every B1 value has exactly one bin.
    int bin_of(double b1) const;
    double center(int bin) const { return lo + (bin + 0.5) * width(); }
};

class Dictionary {
public:
    GridSpec grid;
    GridAxes axes;
    SequenceTiming timing;
    std::uint64_t timing_fingerprint = 0;
    double b1_value = 1.0;
    std::vector<double> atoms;  // K x 5, row-major, unit l2 norm
    std::vector<double> norms;  // K, l2 norm of the PD = 1 signal

    std::size_t size() const { return norms.size(); }
    std::span<const double, 5> atom(std::size_t k) const
    {
        return std::span<const double, 5>(atoms.data() + 5 * k, 5);
    }
    // Rows are ordered lexicographically by (T1, T2, IE). PD is 1.
    TissueParams params(std::size_t k) const;
};

Dictionary generate_dictionary(const SequenceTiming& timing, const GridSpec& grid, double b1_value,
                               int threads = 1);

struct MatchResult {
    TissueParams params{0.0, 0.0, 0.0, 0.0};
    double score = 0.0;
    double residual = 0.0;
    std::int64_t index = -1;  // -1 for the zero-signal sentinel
};

// Exhaustive scan over every atom.
MatchResult match_voxel(const SignalVector& signal, const Dictionary& dict);

// Exact nearest-atom search over a k-d tree of the unit atoms. For unit
// vectors <q, a> = 1 - |q - a|^2 / 2, so a box whose minimum distance to the
// query bounds every score below the current best can be skipped; surviving
// candidates are scored with the same inner product as the exhaustive scan.
class AtomSearchTree {
public:
    explicit AtomSearchTree(const Dictionary& dict, int leaf_size = 16);

    MatchResult match(const SignalVector& signal) const;
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::array<double, 5> lo;
        std::array<double, 5> hi;
        std::uint32_t begin;
        std::uint32_t end;
        std::int32_t left;
        std::int32_t right;
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);

    const Dictionary& dict_;
    int leaf_size_;
    std::vector<std::uint32_t> order_;  // tree position -> dictionary row
    std::vector<double> points_;        // atoms in tree order
    std::vector<Node> nodes_;
};

// File layout: "QDICT\n", one line of JSON header, then K x 5 little-endian
// float32 atoms (row-major) followed by K float32 norms. Atoms are
// renormalized in double precision on load.
void save_dictionary(const Dictionary& dict, const std::filesystem::path& path);
Dictionary load_dictionary(const std::filesystem::path& path);

// Sub-dictionaries keyed by (timing fingerprint, grid fingerprint, B1 bin).
// Holds at most `capacity` generated entries, evicting the least recently used.
class DictionaryCache {
public:
    explicit DictionaryCache(std::size_t capacity = 2) : capacity_(capacity) {}

    std::shared_ptr<const Dictionary> get(const SequenceTiming& timing, const GridSpec& grid, const B1Bins& bins,
                                          int bin, int threads = 1);
    void insert(std::shared_ptr<const Dictionary> dict, const B1Bins& bins);
    // Loads every *.qdict in a directory.
    void preload(const std::filesystem::path& dir, const B1Bins& bins);

    std::size_t generated() const { return generated_; }
    std::size_t size() const { return entries_.size(); }

private:
    using Key = std::tuple<std::uint64_t, std::uint64_t, int>;
    struct Entry {
        std::shared_ptr<const Dictionary> dict;
        std::uint64_t last_use = 0;
        bool pinned = false;  // preloaded from disk, never evicted
    };
    void evict_if_full();

    std::size_t capacity_;
    std::size_t generated_ = 0;
    std::uint64_t clock_ = 0;
    std::map<Key, Entry> entries_;
};

struct MatchVolumeOptions {
    B1Bins bins;
    int threads = 1;
    DictionaryCache* cache = nullptr;  // a private cache is used when null
};

// B1 (channel 5, or 1.0 when absent) is clamped and binned; each occupied bin
// is matched against its own sub-dictionary. Zero-signal voxels get zero maps.
ParameterMaps match_volume(const Volume& volume, const SequenceTiming& timing, const GridSpec& grid,
                           const MatchVolumeOptions& options = {});

} // namespace qalas
