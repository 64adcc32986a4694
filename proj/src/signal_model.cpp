#include "qalas/signal_model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "qalas/config_io.hpp"
#include "qalas/errors.hpp"
#include "qalas/hash.hpp"

namespace qalas {

namespace {

using Dual3 = Dual<3>;
constexpr int kSlotT1 = 0;
constexpr int kSlotT2 = 1;
constexpr int kSlotIe = 2;

double flip_rad(const SequenceTiming& timing, double b1)
{
    return b1 * timing.flip_angle_deg * std::numbers::pi / 180.0;
}

template <class T>
BasicAffineOp<T> relax(double duration_ms, const T& t1_ms)
{
    using std::exp;
    const T a = exp(-(duration_ms / t1_ms));
    return {a, 1.0 - a};
}

template <class T>
struct BasicRecoveryBlock {
    BasicAffineOp<T> echo;
    BasicAffineOp<T> train;
    BasicAffineOp<T> to_center;
    BasicAffineOp<T> gap_to_inversion;
    BasicAffineOp<T> inversion_delay;
    BasicAffineOp<T> inter_train;
    BasicAffineOp<T> final_gap;
    double gain = 0.0;
};

template <class T>
BasicRecoveryBlock<T> recovery_block(const SequenceTiming& timing, const T& t1_ms, double b1)
{
    const double alpha = flip_rad(timing, b1);
    const BasicAffineOp<T> saturate{T(std::cos(alpha)), T(0.0)};
    BasicRecoveryBlock<T> block;
    block.echo = compose(relax(timing.echo_spacing_ms, t1_ms), saturate);
    block.train = repeat(block.echo, timing.turbo_factor);
    block.to_center = repeat(block.echo, timing.center_echo_index);
    block.gap_to_inversion = relax(timing.gap_to_inversion_ms(), t1_ms);
    block.inversion_delay = relax(timing.inv_delay_ms, t1_ms);
    block.inter_train = relax(timing.inter_train_gap_ms(), t1_ms);
    block.final_gap = relax(timing.final_gap_ms(), t1_ms);
    block.gain = std::sin(alpha);
    return block;
}

template <class T>
struct BasicTr {
    BasicAffineOp<T> tr;
    std::array<BasicAffineOp<T>, 5> to_sample;
};

template <class T>
BasicTr<T> chain(const BasicRecoveryBlock<T>& block, double te_ms, const T& t2_ms, const T& ie)
{
    using std::exp;
    BasicTr<T> out;
    BasicAffineOp<T> op{exp(-(te_ms / t2_ms)), T(0.0)};
    out.to_sample[0] = compose(block.to_center, op);
    op = compose(block.train, op);
    op = compose(block.gap_to_inversion, op);
    op = compose(BasicAffineOp<T>{-ie, T(0.0)}, op);
    op = compose(block.inversion_delay, op);
    for (int k = 1; k < 5; ++k) {
        if (k > 1) op = compose(block.inter_train, op);
        out.to_sample[k] = compose(block.to_center, op);
        op = compose(block.train, op);
    }
    out.tr = compose(block.final_gap, op);
    return out;
}

template <class T>
T fixed_point(const BasicAffineOp<T>& tr)
{
    if (!(std::abs(value_of(tr.a)) < 1.0)) {
        std::ostringstream msg;
        msg << "steady state undefined: |a| = " << std::abs(value_of(tr.a)) << " >= 1";
        throw NumericError(msg.str());
    }
    return tr.b / (1.0 - tr.a);
}

// Unit-PD signals before the magnitude operation.
template <class T>
std::array<T, 5> unit_signals(const SequenceTiming& timing, const BasicRecoveryBlock<T>& block,
                              const T& t2_ms, const T& ie)
{
    const BasicTr<T> tr = chain(block, timing.t2prep_te_ms, t2_ms, ie);
    const T mz0 = fixed_point(tr.tr);
    std::array<T, 5> out;
    for (int k = 0; k < 5; ++k) out[k] = block.gain * tr.to_sample[k].apply(mz0);
    return out;
}

void check_tissue(const TissueParams& tissue)
{
    if (!(tissue.t1_ms > 0.0)) throw DomainError("T1 must be positive");
    if (!(tissue.t2_ms > 0.0)) throw DomainError("T2 must be positive");
    if (!(tissue.pd >= 0.0)) throw DomainError("PD must be non-negative");
    if (!(tissue.ie >= kMinIe && tissue.ie <= kMaxIe)) throw DomainError("IE must lie in [0.5, 1.0]");
}

void check_b1(double b1)
{
    if (!(b1 > 0.0) || !std::isfinite(b1)) throw DomainError("B1 scale must be positive and finite");
}

AffineOp to_plain(const BasicAffineOp<double>& op) { return op; }

} // namespace

void SequenceTiming::validate() const
{
    auto fail = [](const std::string& what) { throw ConfigError("invalid sequence timing: " + what); };
    if (n_acq != 5) fail("n_acq must be 5");
    if (!(tr_ms > 0 && acq_spacing_ms > 0 && echo_spacing_ms > 0 && t2prep_te_ms > 0 && inv_delay_ms > 0))
        fail("all durations must be strictly positive");
    if (turbo_factor <= 0) fail("turbo_factor must be positive");
    if (!(n_acq * acq_spacing_ms <= tr_ms)) fail("n_acq * acq_spacing_ms exceeds tr_ms");
    if (!(train_duration_ms() < acq_spacing_ms)) fail("readout train longer than acquisition spacing");
    if (center_echo_index < 0 || center_echo_index >= turbo_factor) fail("center_echo_index out of range");
    if (!std::isfinite(flip_angle_deg)) fail("flip angle not finite");
    if (gap_to_inversion_ms() < 0) fail("inversion pulse overlaps readout train 1");
    if (final_gap_ms() < 0) fail("T2-prep does not fit after readout train 5");
}

std::uint64_t timing_fingerprint(const SequenceTiming& timing)
{
    return fnv1a64(timing_to_json(timing).dump());
}

AffineOp relax_op(double duration_ms, double t1_ms)
{
    if (!(t1_ms > 0.0)) throw DomainError("relax_op: T1 must be positive");
    if (!(duration_ms >= 0.0)) throw DomainError("relax_op: duration must be non-negative");
    return relax(duration_ms, t1_ms);
}

AffineOp t2prep_op(double te_ms, double t2_ms)
{
    if (!(t2_ms > 0.0)) throw DomainError("t2prep_op: T2 must be positive");
    if (!(te_ms >= 0.0)) throw DomainError("t2prep_op: TE must be non-negative");
    return {std::exp(-(te_ms / t2_ms)), 0.0};
}

AffineOp inversion_op(double ie)
{
    if (!(ie >= kMinIe && ie <= kMaxIe)) throw DomainError("inversion_op: IE must lie in [0.5, 1.0]");
    return {-ie, 0.0};
}

ReadoutTrain readout_train_op(const SequenceTiming& timing, double t1_ms, double b1)
{
    timing.validate();
    if (!(t1_ms > 0.0)) throw DomainError("readout_train_op: T1 must be positive");
    check_b1(b1);
    const auto block = recovery_block(timing, t1_ms, b1);
    return {block.train, block.to_center, block.echo, block.gain};
}

RecoveryBlock make_recovery_block(const SequenceTiming& timing, double t1_ms, double b1)
{
    timing.validate();
    if (!(t1_ms > 0.0)) throw DomainError("T1 must be positive");
    check_b1(b1);
    const auto b = recovery_block(timing, t1_ms, b1);
    RecoveryBlock out;
    out.train = {b.train, b.to_center, b.echo, b.gain};
    out.gap_to_inversion = b.gap_to_inversion;
    out.inversion_delay = b.inversion_delay;
    out.inter_train = b.inter_train;
    out.final_gap = b.final_gap;
    return out;
}

TrOperators compose_tr(const SequenceTiming& timing, const TissueParams& tissue, double b1)
{
    timing.validate();
    check_tissue(tissue);
    check_b1(b1);
    const auto block = recovery_block(timing, tissue.t1_ms, b1);
    const auto tr = chain(block, timing.t2prep_te_ms, tissue.t2_ms, tissue.ie);
    TrOperators out;
    out.tr = to_plain(tr.tr);
    for (int k = 0; k < 5; ++k) {
        out.to_sample[k] = tr.to_sample[k];
        out.sample_gain[k] = block.gain;
    }
    return out;
}

double steady_state(const AffineOp& tr_op) { return fixed_point(tr_op); }

SignalVector simulate_unit_pd(const SequenceTiming& timing, const RecoveryBlock& block, double t2_ms,
                              double ie)
{
    BasicRecoveryBlock<double> b;
    b.echo = block.train.echo;
    b.train = block.train.op;
    b.to_center = block.train.to_center;
    b.gap_to_inversion = block.gap_to_inversion;
    b.inversion_delay = block.inversion_delay;
    b.inter_train = block.inter_train;
    b.final_gap = block.final_gap;
    b.gain = block.train.sample_gain;
    const auto u = unit_signals(timing, b, t2_ms, ie);
    SignalVector s;
    for (int k = 0; k < 5; ++k) s[k] = timing.signal_mode == SignalMode::magnitude ? std::abs(u[k]) : u[k];
    return s;
}

SignalVector simulate(const SequenceTiming& timing, const TissueParams& tissue, double b1)
{
    timing.validate();
    check_tissue(tissue);
    check_b1(b1);
    const auto block = recovery_block(timing, tissue.t1_ms, b1);
    const auto u = unit_signals(timing, block, tissue.t2_ms, tissue.ie);
    SignalVector s;
    for (int k = 0; k < 5; ++k) {
        const double v = timing.signal_mode == SignalMode::magnitude ? std::abs(u[k]) : u[k];
        s[k] = tissue.pd * v;
    }
    return s;
}

SignalWithJacobian simulate_with_jacobian(const SequenceTiming& timing, const TissueParams& tissue,
                                          double b1)
{
    timing.validate();
    check_tissue(tissue);
    check_b1(b1);
    const Dual3 t1 = Dual3::variable(tissue.t1_ms, kSlotT1);
    const Dual3 t2 = Dual3::variable(tissue.t2_ms, kSlotT2);
    const Dual3 ie = Dual3::variable(tissue.ie, kSlotIe);
    const auto block = recovery_block(timing, t1, b1);
    const auto u = unit_signals(timing, block, t2, ie);

    SignalWithJacobian out;
    for (int k = 0; k < 5; ++k) {
        double sign = 1.0;
        if (timing.signal_mode == SignalMode::magnitude) sign = u[k].v > 0 ? 1.0 : (u[k].v < 0 ? -1.0 : 0.0);
        const double unit = timing.signal_mode == SignalMode::magnitude ? std::abs(u[k].v) : u[k].v;
        out.signal[k] = tissue.pd * unit;
        auto& row = out.jacobian[k];
        row[0] = tissue.pd * sign * u[k].d[kSlotT1];
        row[1] = tissue.pd * sign * u[k].d[kSlotT2];
        row[2] = unit;
        row[3] = tissue.pd * sign * u[k].d[kSlotIe];
    }
    return out;
}

std::string to_string(SignalMode mode) { return mode == SignalMode::magnitude ? "magnitude" : "signed"; }

SignalMode signal_mode_from_string(const std::string& name)
{
    if (name == "magnitude") return SignalMode::magnitude;
    if (name == "signed") return SignalMode::signed_value;
    throw ConfigError("unknown signal_mode '" + name + "'");
}

} // namespace qalas
