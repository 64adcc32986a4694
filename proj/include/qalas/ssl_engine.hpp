#pragma once

// Self-supervised per-voxel mapping network trained through the signal model.
//
// The network sees one z-slice at a time (the instance for instance
// normalization): n_blocks of (channel-linear or 3x3 conv -> instance_norm ->
// leaky_relu), then a linear layer to four heads lo + (hi - lo) * sigmoid.
// Training minimizes the mean squared difference between the normalized
// acquired contrasts and the contrasts re-synthesized from the head outputs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qalas/config_io.hpp"
#include "qalas/signal_model.hpp"
#include "qalas/volume.hpp"

namespace qalas {

enum class KernelKind { k1x1, k3x3 };

struct OutputRange {
    double lo = 0.0;
    double hi = 1.0;
};

struct NetworkConfig {
    int n_blocks = 5;
    int features = 64;
    KernelKind kernel = KernelKind::k1x1;
    double leaky_slope = 0.01;
    int in_channels = 6;
    int out_channels = 4;
    double norm_eps = 1e-5;
    // T1 ms, T2 ms, PD (normalized units), IE.
    std::array<OutputRange, 4> output_ranges{{{0.0, 5000.0}, {0.0, 2500.0}, {0.0, 2.0}, {0.5, 1.0}}};

    void validate() const;
};

Json network_config_to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const Json& json);
std::uint64_t network_fingerprint(const NetworkConfig& config);

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 500;
    int batch_slices = 4;
    int val_every = 10;
    double tv_weight = 0.0;
    bool foreground_mask = false;
    std::uint64_t seed = 1;
    int threads = 1;

    void validate() const;
};

Json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const Json& json);

struct Layer {
    int cout = 0;
    int cin = 0;
    int k = 1;                  // 1 or 3
    std::vector<double> w;      // cout x cin x k x k
    std::vector<double> b;      // cout
};

struct NetworkWeights {
    NetworkConfig config;
    std::uint64_t seed = 0;
    // Timing the weights were trained under; 0 until trained.
    std::uint64_t timing_fingerprint = 0;
    std::vector<Layer> layers;  // n_blocks hidden layers, then the output layer

    std::size_t parameter_count() const;
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& params);
};

// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases 0.
NetworkWeights init_weights(const NetworkConfig& config, std::uint64_t seed);

// Heads are squeezed into [lo + m(hi-lo), hi - m(hi-lo)] with m = 1e-6 so
// outputs stay strictly inside the range even when the sigmoid saturates.
inline constexpr double kHeadMargin = 1e-6;

struct NormalizedVolume {
    Volume volume;       // 6 channels: contrasts / scale, clamped B1
    double scale = 1.0;  // p99 of pooled contrast magnitudes
};

// Linear-interpolated percentile (q in [0, 100]) of the values.
double percentile(std::vector<double> values, double q);

NormalizedVolume normalize_input(const Volume& volume);

// Raw head outputs (PD in normalized units) for a normalized 6-channel volume.
ParameterMaps forward_maps(const NetworkWeights& weights, const Volume& normalized);

// PD fed to the signal model for a normalized PD head value. Heads live on a
// unit scale; the model needs PD / sin(flip) to reach normalized signals.
double model_pd(double pd_head, const SequenceTiming& timing);

struct LossOptions {
    double tv_weight = 0.0;
    bool foreground_mask = false;
    std::array<OutputRange, 4> ranges = NetworkConfig{}.output_ranges;
};

// Voxels whose largest contrast magnitude is below this fraction of the
// volume's p99 are background when the foreground mask is on.
inline constexpr double kForegroundFraction = 0.05;

// Mean over voxels x 5 contrasts of (acquired - simulated)^2, plus
// tv_weight * total_variation(maps). maps are in acquired units.
double physics_loss(const ParameterMaps& maps, const Volume& volume, const SequenceTiming& timing,
                    const LossOptions& options = {});

// Sum over the four maps of the mean in-plane anisotropic forward difference
// |dx| + |dy| of the range-normalized map, averaged over slices.
double total_variation(const ParameterMaps& maps, const std::array<OutputRange, 4>& ranges);

struct ObjectiveValue {
    double loss = 0.0;
    std::vector<double> grad;  // same order as NetworkWeights::flatten
};

// Training objective over the given z-slices of a normalized volume, with its
// gradient from the tape. Equals physics_loss(infer(weights), raw) / scale^2
// when every slice is included and the mask is off.
ObjectiveValue training_objective(const NetworkWeights& weights, const Volume& normalized,
                                  const std::vector<int>& slices, const SequenceTiming& timing, double tv_weight,
                                  bool foreground_mask, int threads = 1);

struct HistoryRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN when not evaluated
};

struct TrainResult {
    NetworkWeights final_weights;
    NetworkWeights best_weights;  // lowest validation loss seen (final when never validated)
    std::vector<HistoryRow> history;
    double best_val_loss = 0.0;
    // physics_loss of infer(final_weights) on the training volume.
    double final_loss = 0.0;
};

// Validation slices: every z with (z + 1) % 8 == 0; with none, the last slice
// when nz >= 2; a single-slice volume validates on its training slice.
std::vector<int> validation_slices(int nz);

// Scan-specific training from `initial` (fine-tuning / transfer when the
// weights come from elsewhere). epochs == 0 returns `initial` unchanged.
TrainResult train(const Volume& volume, const SequenceTiming& timing, const NetworkWeights& initial,
                  const TrainConfig& train_config);

struct InferResult {
    ParameterMaps maps;  // PD in acquired units
    double elapsed_s = 0.0;
};

// Throws CompatibilityError when the weights were trained under another timing.
InferResult infer(const NetworkWeights& weights, const Volume& volume, const SequenceTiming& timing,
                  int threads = 1);

// Throws CompatibilityError when the weights' config differs from `expected`.
void require_compatible(const NetworkWeights& weights, const NetworkConfig& expected);

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

// "QNET\n", one line of JSON metadata, then little-endian float64 parameters.
void save_checkpoint(const NetworkWeights& weights, const std::filesystem::path& path);
NetworkWeights load_checkpoint(const std::filesystem::path& path);

} // namespace qalas
