// Acceptance runner: one PASS/FAIL line per criterion.
//
//   qalas_acceptance          run all
//   qalas_acceptance 5 9      run a subset
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles/bloch_oracle.hpp"
#include "qalas/dictionary.hpp"
#include "qalas/eval_metrics.hpp"
#include "qalas/parallel.hpp"
#include "qalas/phantom.hpp"
#include "qalas/signal_model.hpp"
#include "qalas/ssl_engine.hpp"
#include "test_support.hpp"

using namespace qalas;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int threads() { return resolve_threads(0); }

TissueParams draw_tissue(testing::Rng& rng)
{
    TissueParams t;
    t.t1_ms = rng.log_uniform(100.0, 5000.0);
    t.t2_ms = rng.log_uniform(10.0, 2500.0);
    t.pd = rng.uniform(0.2, 2.0);
    t.ie = rng.uniform(0.55, 0.95);
    return t;
}

double max_abs(const SignalVector& s)
{
    double m = 0.0;
    for (double v : s) m = std::max(m, std::abs(v));
    return m;
}

double clean_p99(const ParameterMaps& maps, const std::vector<double>& b1, const SequenceTiming& timing)
{
    const auto clean = acquire(maps, b1, timing, NoiseSpec{}, threads());
    std::vector<double> mags;
    for (int c = 0; c < 5; ++c)
        for (double v : clean.channel(c)) mags.push_back(std::abs(v));
    return percentile(std::move(mags), 99.0);
}

Volume rician(const RenderedScene& scene, const SequenceTiming& timing, double rel_sigma, std::uint64_t seed)
{
    NoiseSpec noise{NoiseSpec::Model::rician, rel_sigma * clean_p99(scene.truth, scene.b1, timing), seed};
    return acquire(scene.truth, scene.b1, timing, noise, threads());
}

// Settings for the synthetic-phantom SSL runs. lr is raised from the library
// default because a 64x64 phantom yields few optimizer steps per epoch.
TrainConfig phantom_training(int epochs)
{
    TrainConfig tc;
    tc.epochs = epochs;
    tc.lr = 5e-3;
    tc.foreground_mask = true;
    tc.seed = 1;
    tc.threads = threads();
    return tc;
}

// ------------------------------------------------------------------------

Outcome forward_model_oracle()
{
    const SequenceTiming timing;
    testing::Rng rng(101);
    double worst = 0.0, sim_s = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 100; ++i) {
        const auto tissue = draw_tissue(rng);
        const double b1 = rng.uniform(0.65, 1.35);
        const auto ts = std::chrono::steady_clock::now();
        const auto s = simulate(timing, tissue, b1);
        sim_s += seconds_since(ts);
        const auto ref = oracle::bloch_signals(timing, tissue.t1_ms, tissue.t2_ms, tissue.pd, tissue.ie, b1);
        const double scale = max_abs(ref.signal);
        for (int k = 0; k < 5; ++k) worst = std::max(worst, std::abs(s[k] - ref.signal[k]) / scale);
    }
    const double total = seconds_since(t0);
    return {worst < 1e-6 && total < 10.0,
            fmt("100 draws, max |S - S_bloch| / max|S_bloch| = %.2e (< 1e-6); simulate %.4f s, total with oracle %.2f s (< 10 s)",
                worst, sim_s, total)};
}

Outcome steady_state_fixed_point()
{
    const SequenceTiming timing;
    testing::Rng rng(202);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto tissue = draw_tissue(rng);
        const auto ops = compose_tr(timing, tissue, rng.uniform(0.65, 1.35));
        const double mz0 = steady_state(ops.tr);
        worst = std::max(worst, std::abs(ops.tr.apply(mz0) - mz0));
    }
    return {worst < 1e-12, fmt("1000 draws, max |tr_op(mz0) - mz0| = %.2e (< 1e-12)", worst)};
}

Volume random_signal_volume(const Dims& d, std::uint64_t seed)
{
    testing::Rng rng(seed);
    const SequenceTiming timing;
    Volume v(d, 6, kSignalNames);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                const TissueParams t{rng.log_uniform(400.0, 3000.0), rng.log_uniform(30.0, 250.0),
                                     rng.uniform(0.3, 1.2), rng.uniform(0.6, 1.0)};
                const double b1 = 0.8 + 0.4 * (x + 0.5) / d.nx;
                const auto s = simulate(timing, t, b1);
                for (int c = 0; c < 5; ++c) v.at(c, i) = s[c];
                v.at(5, i) = b1;
            }
    return v;
}

Outcome gradient_suite()
{
    const SequenceTiming timing;

    // Signal Jacobian, step 1e-3 relative, error per unit log-parameter over the signal scale.
    testing::Rng rng(303);
    double worst_j = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto tissue = draw_tissue(rng);
        const double b1 = rng.uniform(0.65, 1.35);
        const auto sj = simulate_with_jacobian(timing, tissue, b1);
        const double scale = max_abs(sj.signal);
        for (int p = 0; p < 4; ++p) {
            auto plus = tissue, minus = tissue;
            auto field = [p](TissueParams& t) -> double& {
                return p == 0 ? t.t1_ms : p == 1 ? t.t2_ms : p == 2 ? t.pd : t.ie;
            };
            const double theta = field(plus);
            const double h = 1e-3 * theta;
            field(plus) += h;
            field(minus) -= h;
            const auto sp = simulate(timing, plus, b1);
            const auto sm = simulate(timing, minus, b1);
            for (int k = 0; k < 5; ++k) {
                const double fd = (sp[k] - sm[k]) / (2.0 * h);
                worst_j = std::max(worst_j, std::abs(sj.jacobian[k][p] - fd) * theta / scale);
            }
        }
    }

    // Network + physics: tape gradient against central differences of the
    // tapeless inference loss, default architecture, TV term on.
    const Dims d{5, 4, 2};
    const Volume raw = random_signal_volume(d, 17);
    const auto norm = normalize_input(raw);
    const NetworkConfig cfg;
    const auto w = init_weights(cfg, 23);
    const double tv = 1e-3;
    auto loss = [&](const NetworkWeights& x) {
        const ParameterMaps heads = forward_maps(x, norm.volume);
        ParameterMaps maps = heads;
        for (double& p : maps[kPD]) p = model_pd(p, timing) * norm.scale;
        return physics_loss(maps, raw, timing) / (norm.scale * norm.scale) + tv * total_variation(heads, cfg.output_ranges);
    };
    std::vector<int> slices(d.nz);
    std::iota(slices.begin(), slices.end(), 0);
    const auto obj = training_objective(w, norm.volume, slices, timing, tv, false);
    double gmax = 0.0;
    for (double g : obj.grad) gmax = std::max(gmax, std::abs(g));
    const auto p0 = w.flatten();
    testing::Rng prng(31);
    double worst_n = 0.0;
    for (int probe = 0; probe < 20; ++probe) {
        const std::size_t k = prng.next() % p0.size();
        const double h = 1e-5 * std::max(std::abs(p0[k]), 1e-2);
        auto pp = p0, pm = p0;
        pp[k] += h;
        pm[k] -= h;
        auto wp = w, wm = w;
        wp.unflatten(pp);
        wm.unflatten(pm);
        const double fd = (loss(wp) - loss(wm)) / (2.0 * h);
        worst_n = std::max(worst_n, testing::rel_err(obj.grad[k], fd, 1e-2 * gmax));
    }
    return {worst_j < 1e-6 && worst_n < 1e-5,
            fmt("signal Jacobian 100 probes max err %.2e (< 1e-6); network+physics 20 probes max rel err %.2e (< 1e-5)",
                worst_j, worst_n)};
}

// Full scan written independently of the production matcher.
std::int64_t scan_oracle(const SignalVector& s, const Dictionary& d)
{
    double n = 0.0;
    for (double v : s) n += v * v;
    n = std::sqrt(n);
    std::int64_t best = -1;
    double best_score = -2.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
        double score = 0.0;
        for (int i = 0; i < 5; ++i) score += (s[i] / n) * d.atoms[5 * k + i];
        if (score > best_score) {
            best_score = score;
            best = static_cast<std::int64_t>(k);
        }
    }
    return best;
}

// Exact recovery of atom k from its own signal scaled by c.
bool recovered(const MatchResult& r, const Dictionary& d, std::size_t k, double c)
{
    const auto want = d.params(k);
    return r.index == static_cast<std::int64_t>(k) && r.params.t1_ms == want.t1_ms && r.params.t2_ms == want.t2_ms &&
           r.params.ie == want.ie && std::abs(r.params.pd - c) <= 1e-9 * c;
}

SignalVector scaled_atom(const Dictionary& d, std::size_t k, double c)
{
    SignalVector s;
    for (int i = 0; i < 5; ++i) s[i] = c * d.norms[k] * d.atoms[5 * k + i];
    return s;
}

Outcome atom_recovery()
{
    const SequenceTiming timing;
    testing::Rng rng(404);

    // Every atom of a grid whose atoms are pairwise distinguishable.
    GridSpec coarse;
    coarse.t1 = {{200.0, 2000.0, 100.0}};
    coarse.t2 = {{20.0, 300.0, 20.0}};
    coarse.ie = {{0.5, 1.0, 0.1}};
    const auto dc = generate_dictionary(timing, coarse, 1.0, threads());
    const AtomSearchTree tc(dc);
    std::size_t exact_all = 0;
    for (std::size_t k = 0; k < dc.size(); ++k) {
        const double c = rng.uniform(0.1, 3.0);
        exact_all += recovered(tc.match(scaled_atom(dc, k, c)), dc, k, c);
    }

    // Default grid, 2000 sampled atoms. It contains atoms the sequence cannot
    // tell apart (T1 far below the readout spacing, T2 far below the prep
    // time): their unit signals agree to rounding. Such a miss is accepted only
    // when the returned atom scores at least as high on the query as the true
    // one, the two atoms agree to 1e-15 in cosine, and the scan agrees.
    const auto d = generate_dictionary(timing, GridSpec::defaults(), 1.0, threads());
    const AtomSearchTree tree(d);
    const int n_atoms = 2000;
    int exact = 0, twins = 0, bad = 0;
    for (int n = 0; n < n_atoms; ++n) {
        const std::size_t k = rng.next() % d.size();
        const double c = rng.uniform(0.1, 3.0);
        const auto s = scaled_atom(d, k, c);
        const auto r = tree.match(s);
        if (recovered(r, d, k, c)) {
            ++exact;
            continue;
        }
        const std::size_t j = static_cast<std::size_t>(r.index);
        double norm = 0.0, score_k = 0.0, score_j = 0.0, cos_kj = 0.0;
        for (int i = 0; i < 5; ++i) norm += s[i] * s[i];
        norm = std::sqrt(norm);
        for (int i = 0; i < 5; ++i) {
            score_k += (s[i] / norm) * d.atoms[5 * k + i];
            score_j += (s[i] / norm) * d.atoms[5 * j + i];
            cos_kj += d.atoms[5 * k + i] * d.atoms[5 * j + i];
        }
        const bool twin = score_j >= score_k && 1.0 - cos_kj <= 1e-15 && r.index == scan_oracle(s, d);
        (twin ? twins : bad) += 1;
    }

    int agree = 0;
    for (int n = 0; n < 1000; ++n) {
        const TissueParams t{rng.log_uniform(10.0, 4900.0), rng.log_uniform(2.0, 2400.0), rng.uniform(0.3, 1.5),
                             rng.uniform(0.5, 1.0)};
        const auto s = simulate(timing, t, rng.uniform(0.65, 1.35));
        agree += tree.match(s).index == scan_oracle(s, d);
    }
    return {exact_all == dc.size() && bad == 0 && agree == 1000,
            fmt("all %zu/%zu atoms of a distinguishable grid recovered exactly; default grid (K = %zu): %d/%d exact, "
                "%d misses on atoms identical to another to rounding, %d wrong; matcher = full scan on %d/1000 off-grid signals",
                exact_all, dc.size(), d.size(), exact, n_atoms, twins, bad, agree)};
}

Outcome nist_regression()
{
    const SequenceTiming timing;
    const auto scene = render_scene(nist_like_preset({64, 64, 8}));
    const auto vol = acquire(scene.truth, scene.b1, timing, NoiseSpec{}, threads());
    const auto labels = scene.labels.channel(0);

    const auto t0 = std::chrono::steady_clock::now();
    const auto dmaps = match_volume(vol, timing, GridSpec::defaults(), {B1Bins{}, threads(), nullptr});
    const double dict_s = seconds_since(t0);

    const auto t1 = std::chrono::steady_clock::now();
    // Seven training slices make a small dataset: full-batch steps at the
    // default lr converge more steadily than batches of four.
    TrainConfig tc = phantom_training(1500);
    tc.lr = 1e-3;
    tc.batch_slices = 8;
    const auto result = train(vol, timing, init_weights(NetworkConfig{}, 1), tc);
    const double train_s = seconds_since(t1);
    const auto smaps = infer(result.final_weights, vol, timing, threads()).maps;

    bool pass = train_s <= 30.0 * 60.0;
    std::string detail;
    for (const auto& [name, maps] : {std::pair{"dict", &dmaps}, std::pair{"ssl", &smaps}})
        for (int c : {kT1, kT2}) {
            const auto r = regress_rois(roi_means(scene.truth[c], labels), roi_means((*maps)[c], labels));
            pass = pass && r.n == 14 && r.slope >= 0.95 && r.slope <= 1.05 && r.r_squared >= 0.999;
            detail += fmt("%s %s slope %.4f R2 %.5f; ", name, c == kT1 ? "T1" : "T2", r.slope, r.r_squared);
        }
    detail += fmt("dict %.0f s, SSL training %.0f s on %d thread(s) (<= 1800 s)", dict_s, train_s, threads());
    return {pass, detail};
}

Outcome engine_agreement()
{
    const SequenceTiming timing;
    const auto scene = render_scene(brain_like_preset({64, 64, 1}, 0));
    const auto vol = rician(scene, timing, 0.005, 7);
    const auto dmaps = match_volume(vol, timing, GridSpec::defaults(), {B1Bins{}, threads(), nullptr});
    const auto result = train(vol, timing, init_weights(NetworkConfig{}, 1), phantom_training(500));
    const auto smaps = infer(result.final_weights, vol, timing, threads()).maps;
    const auto mask = fluid_mask(dmaps[kT1], {mask_from_labels(scene.labels.channel(0)), 3000.0});
    const double e1 = nrmse_percent(smaps[kT1], dmaps[kT1], mask);
    const double e2 = nrmse_percent(smaps[kT2], dmaps[kT2], mask);
    return {e1 <= 15.0 && e2 <= 15.0,
            fmt("Rician sigma 0.5%% of p99, %zu fluid-excluded voxels: NRMSE SSL vs dict T1 %.2f%% T2 %.2f%% (<= 15%%)",
                mask_count(mask), e1, e2)};
}

Outcome transfer()
{
    const SequenceTiming timing;
    const auto scene_a = render_scene(brain_like_preset({64, 64, 1}, 0));
    const auto scene_b = render_scene(brain_like_preset({64, 64, 1}, 1));
    const auto va = rician(scene_a, timing, 0.005, 11);
    const auto vb = rician(scene_b, timing, 0.005, 12);
    const auto w0 = init_weights(NetworkConfig{}, 1);
    const auto pretrained = train(va, timing, w0, phantom_training(500)).final_weights;
    const auto scan_b = train(vb, timing, w0, phantom_training(500)).final_weights;
    const auto tuned = train(vb, timing, pretrained, phantom_training(50)).final_weights;

    const auto ref = infer(scan_b, vb, timing, threads()).maps;
    const auto mp = infer(pretrained, vb, timing, threads()).maps;
    const auto mf = infer(tuned, vb, timing, threads()).maps;
    const auto mask = fluid_mask(ref[kT1], {mask_from_labels(scene_b.labels.channel(0)), 3000.0});
    const double p1 = nrmse_percent(mp[kT1], ref[kT1], mask), p2 = nrmse_percent(mp[kT2], ref[kT2], mask);
    const double f1 = nrmse_percent(mf[kT1], ref[kT1], mask), f2 = nrmse_percent(mf[kT2], ref[kT2], mask);
    return {f1 <= p1 && f2 <= p2,
            fmt("vs B scan-specific: pre-trained T1 %.2f%% T2 %.2f%%, fine-tuned (50 epochs) T1 %.2f%% T2 %.2f%%", p1, p2,
                f1, f2)};
}

Outcome inference_speed()
{
    const SequenceTiming timing;
    const Dims d{176, 176, 160};
    // One brain-like slice acquired at full in-plane size, repeated along z.
    const auto scene = render_scene(brain_like_preset({d.nx, d.ny, 1}, 0));
    const auto slice = rician(scene, timing, 0.01, 5);
    Volume vol(d, 6, kSignalNames);
    for (int c = 0; c < 6; ++c)
        for (int z = 0; z < d.nz; ++z)
            std::copy(slice.channel(c).begin(), slice.channel(c).end(), vol.channel(c).begin() + z * d.slice_voxels());
    const auto w = init_weights(NetworkConfig{}, 1);
    const auto r = infer(w, vol, timing, threads());
    return {r.elapsed_s < 60.0, fmt("176x176x160 inference %.1f s on %d thread(s) (< 60 s)", r.elapsed_s, threads())};
}

Outcome tv_variant()
{
    const SequenceTiming timing;
    const auto scene = render_scene(brain_like_preset({64, 64, 1}, 0));
    const auto vol = rician(scene, timing, 0.02, 9);
    const NetworkConfig cfg;
    const auto w0 = init_weights(cfg, 3);
    auto map_tv = [&](double lambda) {
        auto tc = phantom_training(300);
        tc.tv_weight = lambda;
        const auto w = train(vol, timing, w0, tc).final_weights;
        return total_variation(forward_maps(w, normalize_input(vol).volume), cfg.output_ranges);
    };
    const double plain = map_tv(0.0);
    const double smooth = map_tv(1e-3);
    return {smooth < plain, fmt("Rician sigma 2%% of p99, 300 epochs: map TV lambda=1e-3 %.5f vs lambda=0 %.5f", smooth, plain)};
}

#ifndef QALAS_CLI_PATH
#define QALAS_CLI_PATH "qalas"
#endif

int sh(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()); }

Outcome manifest_replay()
{
    const fs::path dir = fs::temp_directory_path() / "qalas_acceptance_replay";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream g(dir / "grid.json");
        g << R"({"t1": [[100, 3000, 50], [3000, 5000, 200]], "t2": [[10, 400, 5]], "ie": [[0.8, 1.0, 0.05]]})";
    }
    const std::string q = std::string("cd ") + dir.string() + " && QALAS_THREADS=1 " + QALAS_CLI_PATH + " ";
    const std::vector<std::pair<std::string, std::string>> steps{
        {"phantom --preset brain-like --dims 24 24 2 -o scene", "scene/manifest.json"},
        {"simulate --maps scene/truth.qvol --b1 scene/b1.qvol --noise rician --sigma-rel 0.01 --seed 4 -o sig.qvol",
         "sig.qvol.manifest.json"},
        {"dict match --in sig.qvol --grid grid.json -o dict.qvol", "dict.qvol.manifest.json"},
        {"train --in sig.qvol --epochs 4 --lr 5e-3 --seed 2 -o net", "net/manifest.json"},
        {"finetune --in sig.qvol --init net/final.qnet --epochs 2 -o tuned", "tuned/manifest.json"},
        {"infer --checkpoint tuned/final.qnet --in sig.qvol -o ssl.qvol", "ssl.qvol.manifest.json"},
        {"eval nrmse --a ssl.qvol --b dict.qvol --labels scene/labels.qvol -o nrmse", "nrmse/manifest.json"},
        {"eval regress --truth scene/truth.qvol --maps dict.qvol --labels scene/labels.qvol -o regress",
         "regress/manifest.json"},
        {"preview --in ssl.qvol --channel T1 -o t1.pgm", "t1.pgm.manifest.json"},
    };
    for (const auto& [args, _] : steps)
        if (sh(q + args) != 0) return {false, "pipeline step failed: " + args};
    // Replays run in reverse so a later step's inputs are still the originals when checked.
    int identical = 0;
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) identical += sh(q + "replay --manifest " + it->second) == 0;
    return {identical == static_cast<int>(steps.size()),
            fmt("%d/%zu pipeline manifests replayed with byte-identical outputs", identical, steps.size())};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv)
{
    const std::vector<Criterion> all{
        {1, "forward model vs Bloch integration", forward_model_oracle},
        {2, "steady-state fixed point", steady_state_fixed_point},
        {3, "gradient suite", gradient_suite},
        {4, "dictionary atom recovery", atom_recovery},
        {5, "NIST-like regression, both engines", nist_regression},
        {6, "dictionary vs SSL agreement", engine_agreement},
        {7, "transfer by fine-tuning", transfer},
        {8, "inference speed", inference_speed},
        {9, "TV regularization lowers map TV", tv_variant},
        {10, "manifest replay determinism", manifest_replay},
    };
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("criterion %2d %s  %s: %s [%.1f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
