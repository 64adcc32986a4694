#pragma once

// Forward model of one 3D-QALAS repetition.
//
// Longitudinal magnetization Mz (in units of M0) evolves between events by
// affine maps Mz' = a*Mz + b. Every block of the sequence (free recovery,
// T2 preparation, inversion, a Look-Locker readout train) is such a map, so a
// whole repetition is their composition and the periodic steady state is the
// fixed point of that composition.
//
// Timeline of one TR (time origin = start of readout train 1):
//
//   [T2-prep, te]  train1  gap  INV  inv_delay  train2  gap  train3  gap
//   train4  gap  train5  final gap  | next TR
//
// Train k starts at (k-1)*acq_spacing. The inversion pulse sits inv_delay
// before train 2. The T2-prep occupies the last te of the TR and applies pure
// T2 attenuation (no T1 recovery during the prep). The steady state is defined
// at the start of the T2-prep.

#include <array>
#include <cstdint>
#include <string>

#include "qalas/dual.hpp"

namespace qalas {

enum class SignalMode { magnitude, signed_value };

struct SequenceTiming {
    double tr_ms = 4500.0;
    int n_acq = 5;
    double acq_spacing_ms = 900.0;
    double echo_spacing_ms = 5.8;
    int turbo_factor = 127;
    double flip_angle_deg = 4.0;
    double t2prep_te_ms = 110.0;
    double inv_delay_ms = 100.0;
    int center_echo_index = 63;
    SignalMode signal_mode = SignalMode::magnitude;

    // Throws ConfigError on any violated invariant or negative derived gap.
    void validate() const;

    double train_duration_ms() const { return turbo_factor * echo_spacing_ms; }
    // Free recovery between the end of train 1 and the inversion pulse.
    double gap_to_inversion_ms() const { return acq_spacing_ms - inv_delay_ms - train_duration_ms(); }
    // Free recovery between the end of train k and the start of train k+1 (k >= 2).
    double inter_train_gap_ms() const { return acq_spacing_ms - train_duration_ms(); }
    // Free recovery between the end of train 5 and the start of the next T2-prep.
    double final_gap_ms() const
    {
        return tr_ms - (n_acq - 1) * acq_spacing_ms - train_duration_ms() - t2prep_te_ms;
    }
};

// FNV-1a over the canonical JSON form; identifies the timing a dictionary was built for.
std::uint64_t timing_fingerprint(const SequenceTiming& timing);

struct TissueParams {
    double t1_ms = 1000.0;
    double t2_ms = 100.0;
    double pd = 1.0;
    double ie = 1.0;
};

inline constexpr double kMinIe = 0.5;
inline constexpr double kMaxIe = 1.0;

template <class T>
struct BasicAffineOp {
    T a = T(1.0);
    T b = T(0.0);

    T apply(const T& mz) const { return a * mz + b; }
};

using AffineOp = BasicAffineOp<double>;

// outer o inner: apply `inner` first, then `outer`.
template <class T>
BasicAffineOp<T> compose(const BasicAffineOp<T>& outer, const BasicAffineOp<T>& inner)
{
    return {inner.a * outer.a, outer.a * inner.b + outer.b};
}

// n-fold self composition by repeated squaring.
template <class T>
BasicAffineOp<T> repeat(BasicAffineOp<T> op, int n)
{
    BasicAffineOp<T> result{T(1.0), T(0.0)};
    while (n > 0) {
        if (n & 1) result = compose(op, result);
        op = compose(op, op);
        n >>= 1;
    }
    return result;
}

using SignalVector = std::array<double, 5>;
// Rows: the five acquisitions. Columns: d/dT1, d/dT2, d/dPD, d/dIE.
using SignalJacobian = std::array<std::array<double, 4>, 5>;

AffineOp relax_op(double duration_ms, double t1_ms);
AffineOp t2prep_op(double te_ms, double t2_ms);
AffineOp inversion_op(double ie);

struct ReadoutTrain {
    AffineOp op;               // all N echoes
    AffineOp to_center;        // echoes before center_echo_index; Mz read at this point
    AffineOp echo;             // one echo: cos saturation then relaxation over tau
    double sample_gain = 0.0;  // sin(b1 * flip)
};

ReadoutTrain readout_train_op(const SequenceTiming& timing, double t1_ms, double b1);

struct TrOperators {
    AffineOp tr;                        // T2-prep start -> next T2-prep start
    std::array<AffineOp, 5> to_sample;  // T2-prep start -> center echo of train k
    std::array<double, 5> sample_gain{};
};

TrOperators compose_tr(const SequenceTiming& timing, const TissueParams& tissue, double b1);

double steady_state(const AffineOp& tr_op);

SignalVector simulate(const SequenceTiming& timing, const TissueParams& tissue, double b1);

struct SignalWithJacobian {
    SignalVector signal{};
    SignalJacobian jacobian{};
};

SignalWithJacobian simulate_with_jacobian(const SequenceTiming& timing, const TissueParams& tissue,
                                          double b1);

// The T1/B1-dependent half of the model, precomputed once and reused across
// (T2, IE) combinations. simulate() runs through exactly this path, so results
// from a hoisted block are bit-identical to direct calls.
struct RecoveryBlock {
    ReadoutTrain train;
    AffineOp gap_to_inversion;
    AffineOp inversion_delay;
    AffineOp inter_train;
    AffineOp final_gap;
};

RecoveryBlock make_recovery_block(const SequenceTiming& timing, double t1_ms, double b1);

// Signal at PD = 1.
SignalVector simulate_unit_pd(const SequenceTiming& timing, const RecoveryBlock& block, double t2_ms,
                              double ie);

std::string to_string(SignalMode mode);
SignalMode signal_mode_from_string(const std::string& name);

} // namespace qalas
