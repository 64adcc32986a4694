// qalas: batch front end for phantoms, simulation, dictionary and network mapping.
//
// Every artifact-producing subcommand writes a manifest next to its outputs
// (DIR/manifest.json for directory outputs, <file>.manifest.json otherwise).
// `qalas replay --manifest m.json` reruns the recorded command and compares
// output hashes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qalas/config_io.hpp"
#include "qalas/dictionary.hpp"
#include "qalas/errors.hpp"
#include "qalas/eval_metrics.hpp"
#include "qalas/parallel.hpp"
#include "qalas/phantom.hpp"
#include "qalas/signal_model.hpp"
#include "qalas/ssl_engine.hpp"
#include "qalas/volume.hpp"

#ifndef QALAS_VERSION
#define QALAS_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace qalas;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kFormat = 3, kNumeric = 4 };

int exit_code_for(const Error& e)
{
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DomainError*>(&e) ||
        dynamic_cast<const ContractError*>(&e))
        return kUsage;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegenerateError*>(&e)) return kNumeric;
    return kFormat;
}

void report_error(const std::string& kind, int code, const std::string& message)
{
    std::cerr << Json{{"error", kind}, {"exit", code}, {"message", message}}.dump() << std::endl;
}

void report_warning(const std::string& message) { std::cerr << Json{{"warning", message}}.dump() << std::endl; }

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// FNV-1a 64 over the file bytes.
std::string file_hash(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return hex64(h);
}

// Bookkeeping for one run; becomes the manifest.
struct Run {
    std::string subcommand;
    std::vector<std::string> argv;
    int threads = 1;
    std::optional<std::uint64_t> seed;
    Json configs = Json::object();
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;

    void input(const fs::path& p)
    {
        inputs.push_back(p);
        if (p.extension() == ".qvol") inputs.push_back(qvol_header_path(p));
    }
    void output(const fs::path& p)
    {
        outputs.push_back(p);
        if (p.extension() == ".qvol") outputs.push_back(qvol_header_path(p));
    }
};

Json hash_table(const std::vector<fs::path>& paths)
{
    Json out = Json::object();
    for (const auto& p : paths) out[p.string()] = file_hash(p);
    return out;
}

void write_manifest(const Run& run, const fs::path& path, double wall_s)
{
    Json m;
    m["tool"] = "qalas";
    m["version"] = QALAS_VERSION;
    m["subcommand"] = run.subcommand;
    m["argv"] = run.argv;
    m["cwd"] = fs::current_path().string();
    m["threads"] = run.threads;
    m["seed"] = run.seed ? Json(*run.seed) : Json(nullptr);
    m["configs"] = run.configs;
    m["inputs"] = hash_table(run.inputs);
    m["outputs"] = hash_table(run.outputs);
    m["wall_time_s"] = wall_s;
    write_json_file(path, m);
}

fs::path file_manifest(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void ensure_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError("cannot create directory " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file)
{
    if (file.has_parent_path()) ensure_dir(file.parent_path());
}

SequenceTiming timing_arg(const std::string& path, Run& run)
{
    SequenceTiming t;
    if (!path.empty()) {
        t = load_timing(path);
        run.input(path);
    }
    t.validate();
    run.configs["timing"] = timing_to_json(t);
    return t;
}

GridSpec grid_arg(const std::string& path, Run& run)
{
    GridSpec g = GridSpec::defaults();
    if (!path.empty()) {
        g = grid_from_json(read_json_file(path));
        run.input(path);
    }
    g.validate();
    run.configs["grid"] = grid_to_json(g);
    return g;
}

NetworkConfig net_arg(const std::string& path, Run& run)
{
    NetworkConfig n;
    if (!path.empty()) {
        n = network_config_from_json(read_json_file(path));
        run.input(path);
    }
    n.validate();
    run.configs["network"] = network_config_to_json(n);
    return n;
}

Volume read_input(const std::string& path, Run& run)
{
    auto v = read_qvol(path);
    run.input(path);
    return v;
}

Dims dims_arg(const std::vector<int>& d, Dims fallback)
{
    if (d.empty()) return fallback;
    if (d.size() != 3) throw ConfigError("--dims takes three integers");
    return {d[0], d[1], d[2]};
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
    std::string preset;
    std::string spec;
    int variant = 0;
    std::vector<int> dims;
    std::string out;
};

void cmd_phantom(const PhantomArgs& a, Run& run)
{
    SceneSpec spec;
    if (!a.spec.empty()) {
        if (!a.preset.empty()) throw ConfigError("--preset and --spec are exclusive");
        spec = scene_from_json(read_json_file(a.spec));
        run.input(a.spec);
    } else if (a.preset == "nist-like") {
        spec = nist_like_preset(dims_arg(a.dims, {64, 64, 8}));
    } else if (a.preset == "brain-like") {
        if (a.variant != 0 && a.variant != 1) throw ConfigError("--variant must be 0 or 1");
        spec = brain_like_preset(dims_arg(a.dims, {64, 64, 1}), a.variant);
    } else {
        throw ConfigError("one of --preset nist-like|brain-like or --spec is required");
    }
    spec.validate();
    run.configs["scene"] = scene_to_json(spec);

    const auto scene = render_scene(spec);
    for (const auto& w : scene.warnings) report_warning(w);

    const fs::path dir(a.out);
    ensure_dir(dir);
    write_json_file(dir / "scene.json", scene_to_json(spec));
    run.outputs.push_back(dir / "scene.json");
    write_qvol(scene.truth.to_volume(), dir / "truth.qvol");
    run.output(dir / "truth.qvol");
    write_qvol(scene.labels, dir / "labels.qvol");
    run.output(dir / "labels.qvol");
    Volume b1(spec.dims, 1, {"B1"});
    std::copy(scene.b1.begin(), scene.b1.end(), b1.channel(0).begin());
    write_qvol(b1, dir / "b1.qvol");
    run.output(dir / "b1.qvol");
    std::cout << "phantom: " << spec.regions.size() << " regions, " << to_string(spec.dims) << " -> " << dir.string()
              << "\n";
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    std::string maps;
    std::string b1;
    std::string timing;
    std::string noise = "none";
    double sigma = 0.0;
    double sigma_rel = 0.0;
    std::uint64_t seed = 1;
    std::string out;
};

void cmd_simulate(const SimulateArgs& a, Run& run)
{
    const auto timing = timing_arg(a.timing, run);
    const auto maps = ParameterMaps::from_volume(read_input(a.maps, run));
    std::vector<double> b1(maps.dims.voxels(), 1.0);
    if (!a.b1.empty()) {
        const auto bv = read_input(a.b1, run);
        if (bv.channels() < 1) throw ShapeError(a.b1 + ": no channels");
        const auto src = bv.channel(bv.channels() - 1);
        if (bv.dims() == maps.dims) b1.assign(src.begin(), src.end());
        else b1 = resample_b1(src, bv.dims(), maps.dims);
    }

    NoiseSpec noise;
    if (a.noise == "gaussian") noise.model = NoiseSpec::Model::gaussian;
    else if (a.noise == "rician") noise.model = NoiseSpec::Model::rician;
    else if (a.noise != "none") throw ConfigError("--noise must be none, gaussian or rician");
    if (a.sigma > 0.0 && a.sigma_rel > 0.0) throw ConfigError("--sigma and --sigma-rel are exclusive");
    noise.seed = a.seed;
    run.seed = a.seed;
    noise.sigma = a.sigma;
    if (a.sigma_rel > 0.0) {
        // Relative to the p99 of the noiseless contrast magnitudes.
        const auto clean = acquire(maps, b1, timing, NoiseSpec{}, run.threads);
        std::vector<double> mags;
        mags.reserve(5 * clean.voxels());
        for (int c = 0; c < 5; ++c)
            for (double v : clean.channel(c)) mags.push_back(std::abs(v));
        noise.sigma = a.sigma_rel * percentile(std::move(mags), 99.0);
    }
    if (noise.model != NoiseSpec::Model::none && !(noise.sigma > 0.0))
        throw ConfigError("noise model " + a.noise + " needs --sigma or --sigma-rel > 0");
    noise.validate();
    run.configs["noise"] = noise_to_json(noise);

    auto vol = acquire(maps, b1, timing, noise, run.threads);
    ensure_parent(a.out);
    write_qvol(vol, a.out);
    run.output(a.out);
    std::cout << "simulate: " << to_string(maps.dims) << ", noise sigma " << noise.sigma << " -> " << a.out << "\n";
}

// ---------------------------------------------------------------- dict

struct DictBuildArgs {
    std::string timing;
    std::string grid;
    double b1 = 1.0;
    std::string out;
};

void cmd_dict_build(const DictBuildArgs& a, Run& run)
{
    const auto timing = timing_arg(a.timing, run);
    const auto grid = grid_arg(a.grid, run);
    run.configs["b1"] = a.b1;
    const auto dict = generate_dictionary(timing, grid, a.b1, run.threads);
    ensure_parent(a.out);
    save_dictionary(dict, a.out);
    run.output(a.out);
    std::cout << "dict build: " << dict.size() << " atoms at B1 " << a.b1 << " -> " << a.out << "\n";
}

struct DictMatchArgs {
    std::string in;
    std::string timing;
    std::string grid;
    std::string dict_dir;
    int cache_size = 2;
    std::string out;
};

void cmd_dict_match(const DictMatchArgs& a, Run& run)
{
    const auto timing = timing_arg(a.timing, run);
    const auto grid = grid_arg(a.grid, run);
    const auto vol = read_input(a.in, run);
    require_signal_volume(vol);
    if (a.cache_size < 1) throw ConfigError("--cache-size must be at least 1");

    DictionaryCache cache(static_cast<std::size_t>(a.cache_size));
    MatchVolumeOptions opt;
    opt.threads = run.threads;
    opt.cache = &cache;
    if (!a.dict_dir.empty()) {
        if (!fs::is_directory(a.dict_dir)) throw FormatError("no such dictionary directory " + a.dict_dir);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.dict_dir))
            if (e.path().extension() == ".qdict") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) run.input(f);
        cache.preload(a.dict_dir, opt.bins);
    }
    const auto maps = match_volume(vol, timing, grid, opt);
    ensure_parent(a.out);
    write_qvol(maps.to_volume(), a.out);
    run.output(a.out);
    std::cout << "dict match: " << to_string(vol.dims()) << ", " << cache.generated()
              << " sub-dictionaries generated -> " << a.out << "\n";
}

// ---------------------------------------------------------------- train / finetune / infer

struct TrainArgs {
    std::string in;
    std::string timing;
    std::string net;
    std::string train;
    std::string init;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<double> tv_weight;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void cmd_train(const TrainArgs& a, Run& run, bool finetune)
{
    const auto timing = timing_arg(a.timing, run);
    const auto vol = read_input(a.in, run);
    require_signal_volume(vol);

    TrainConfig tc;
    if (!a.train.empty()) {
        tc = train_config_from_json(read_json_file(a.train));
        run.input(a.train);
    } else if (finetune) {
        tc.epochs = 50;
    }
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.lr) tc.lr = *a.lr;
    if (a.tv_weight) tc.tv_weight = *a.tv_weight;
    if (a.seed) tc.seed = *a.seed;
    tc.threads = run.threads;
    tc.validate();
    run.seed = tc.seed;
    run.configs["train"] = train_config_to_json(tc);

    NetworkWeights initial;
    if (!a.init.empty()) {
        initial = load_checkpoint(a.init);
        run.input(a.init);
        if (!a.net.empty()) require_compatible(initial, net_arg(a.net, run));
        run.configs["network"] = network_config_to_json(initial.config);
    } else {
        if (finetune) throw ConfigError("finetune requires --init");
        initial = init_weights(net_arg(a.net, run), tc.seed);
    }

    const auto result = train(vol, timing, initial, tc);
    const fs::path dir(a.out);
    ensure_dir(dir);
    save_checkpoint(result.final_weights, dir / "final.qnet");
    run.outputs.push_back(dir / "final.qnet");
    save_checkpoint(result.best_weights, dir / "best.qnet");
    run.outputs.push_back(dir / "best.qnet");
    write_history_csv(result.history, dir / "history.csv");
    run.outputs.push_back(dir / "history.csv");
    if (tc.epochs > 0) {
        const auto maps = infer(result.final_weights, vol, timing, run.threads).maps;
        write_qvol(maps.to_volume(), dir / "maps.qvol");
        run.output(dir / "maps.qvol");
    }
    std::cout << run.subcommand << ": " << tc.epochs << " epochs, final loss " << result.final_loss << " -> "
              << dir.string() << "\n";
}

struct InferArgs {
    std::string checkpoint;
    std::string in;
    std::string timing;
    std::string net;
    std::string out;
};

void cmd_infer(const InferArgs& a, Run& run)
{
    const auto timing = timing_arg(a.timing, run);
    const auto weights = load_checkpoint(a.checkpoint);
    run.input(a.checkpoint);
    if (!a.net.empty()) require_compatible(weights, net_arg(a.net, run));
    run.configs["network"] = network_config_to_json(weights.config);
    const auto vol = read_input(a.in, run);
    const auto result = infer(weights, vol, timing, run.threads);
    ensure_parent(a.out);
    write_qvol(result.maps.to_volume(), a.out);
    run.output(a.out);
    std::cout << "infer: " << to_string(vol.dims()) << " in " << result.elapsed_s << " s -> " << a.out << "\n";
}

// ---------------------------------------------------------------- eval

const std::vector<std::string> kEvalMaps{"T1", "T2", "PD", "IE"};

std::vector<int> map_channels(const std::vector<std::string>& names)
{
    std::vector<int> out;
    for (const auto& n : names) {
        const auto it = std::find(kEvalMaps.begin(), kEvalMaps.end(), n);
        if (it == kEvalMaps.end()) throw ConfigError("unknown map '" + n + "' (use T1, T2, PD, IE)");
        out.push_back(static_cast<int>(it - kEvalMaps.begin()));
    }
    return out;
}

struct RegressArgs {
    std::string truth;
    std::string maps;
    std::string labels;
    std::vector<std::string> params{"T1", "T2"};
    std::string out;
};

void cmd_eval_regress(const RegressArgs& a, Run& run)
{
    const auto truth = ParameterMaps::from_volume(read_input(a.truth, run));
    const auto est = ParameterMaps::from_volume(read_input(a.maps, run));
    const auto labels = read_input(a.labels, run);
    if (!(truth.dims == est.dims) || !(labels.dims() == truth.dims))
        throw ShapeError("truth, maps and labels must share dims");
    const auto lab = labels.channel(0);

    std::vector<NamedRoiStats> stats;
    std::vector<NamedRegression> regs;
    for (int c : map_channels(a.params)) {
        const auto rt = roi_means(truth[c], lab);
        const auto re = roi_means(est[c], lab);
        stats.push_back({kEvalMaps[c] + ":reference", rt});
        stats.push_back({kEvalMaps[c] + ":estimate", re});
        regs.push_back({kEvalMaps[c], regress_rois(rt, re)});
    }
    const fs::path dir(a.out);
    ensure_dir(dir);
    write_roi_stats_csv(stats, dir / "roi_stats.csv");
    run.outputs.push_back(dir / "roi_stats.csv");
    write_regression_csv(regs, dir / "regression.csv");
    run.outputs.push_back(dir / "regression.csv");
    for (const auto& r : regs)
        std::printf("%s: slope %.4f intercept %.3f R2 %.5f n %zu\n", r.map.c_str(), r.result.slope,
                    r.result.intercept, r.result.r_squared, r.result.n);
}

struct NrmseArgs {
    std::string a;
    std::string b;
    std::string labels;
    double fluid_t1 = 3000.0;
    double pd_threshold = 0.0;
    std::vector<std::string> params{"T1", "T2"};
    std::string out;
};

void cmd_eval_nrmse(const NrmseArgs& a, Run& run)
{
    const auto est = ParameterMaps::from_volume(read_input(a.a, run));
    const auto ref = ParameterMaps::from_volume(read_input(a.b, run));
    if (!(est.dims == ref.dims)) throw ShapeError("--a and --b must share dims");
    MaskSpec spec;
    spec.fluid_t1_ms = a.fluid_t1;
    if (!a.labels.empty()) {
        const auto labels = read_input(a.labels, run);
        if (!(labels.dims() == ref.dims)) throw ShapeError("labels dims differ from maps");
        spec.base = mask_from_labels(labels.channel(0));
    } else {
        spec.base = mask_from_threshold(ref[kPD], a.pd_threshold);
    }
    const auto mask = fluid_mask(ref[kT1], spec);
    run.configs["mask"] = {{"fluid_t1_ms", a.fluid_t1},
                           {"base", a.labels.empty() ? "reference PD > " + std::to_string(a.pd_threshold) : "labels > 0"}};

    std::vector<NamedNrmse> rows;
    for (int c : map_channels(a.params)) rows.push_back({kEvalMaps[c], nrmse_percent(est[c], ref[c], mask), mask_count(mask)});
    const fs::path dir(a.out);
    ensure_dir(dir);
    write_nrmse_csv(rows, dir / "nrmse.csv");
    run.outputs.push_back(dir / "nrmse.csv");
    for (const auto& r : rows) std::printf("%s: NRMSE %.3f %% over %zu voxels\n", r.map.c_str(), r.percent, r.voxels);
}

// ---------------------------------------------------------------- preview

struct PreviewArgs {
    std::string in;
    std::string channel = "0";
    std::optional<int> slice;
    std::vector<double> window;
    std::string out;
};

void cmd_preview(const PreviewArgs& a, Run& run)
{
    const auto vol = read_input(a.in, run);
    int c = vol.channel_index(a.channel);
    if (c < 0) {
        try {
            std::size_t used = 0;
            c = std::stoi(a.channel, &used);
            if (used != a.channel.size()) c = -1;
        } catch (const std::exception&) {
            c = -1;
        }
    }
    if (c < 0 || c >= vol.channels()) throw ConfigError("no channel '" + a.channel + "' in " + a.in);
    const int z = a.slice.value_or(vol.dims().nz / 2);
    if (z < 0 || z >= vol.dims().nz) throw ConfigError("--slice out of range");
    const auto s = extract_slice(vol, c, z);
    double lo, hi;
    if (a.window.empty()) {
        const auto [mn, mx] = std::minmax_element(s.begin(), s.end());
        lo = *mn;
        hi = *mx > *mn ? *mx : *mn + 1.0;
    } else if (a.window.size() == 2 && a.window[1] > a.window[0]) {
        lo = a.window[0];
        hi = a.window[1];
    } else {
        throw ConfigError("--window takes lo,hi with hi > lo");
    }
    run.configs["preview"] = {{"channel", c}, {"slice", z}, {"window", {lo, hi}}};
    ensure_parent(a.out);
    export_pgm_preview(s, vol.dims().nx, vol.dims().ny, lo, hi, a.out);
    run.outputs.push_back(a.out);
    std::cout << "preview: channel " << c << " slice " << z << " -> " << a.out << "\n";
}

// ---------------------------------------------------------------- dispatch

int run_command(const std::vector<std::string>& args);

int cmd_replay(const std::string& manifest_path)
{
    const auto m = read_json_file(manifest_path);
    if (!m.contains("argv") || !m.contains("outputs") || !m.contains("cwd"))
        throw FormatError(manifest_path + ": not a qalas manifest");
    const auto argv = m.at("argv").get<std::vector<std::string>>();
    const auto prev = fs::current_path();
    fs::current_path(m.at("cwd").get<std::string>());
    struct Restore {
        fs::path p;
        ~Restore() { fs::current_path(p); }
    } restore{prev};

    for (const auto& [path, hash] : m.at("inputs").items()) {
        if (!fs::exists(path)) throw FormatError("replay input missing: " + path);
        if (file_hash(path) != hash.get<std::string>()) throw FormatError("replay input changed: " + path);
    }
    // Keep the recorded manifest; the rerun would overwrite it.
    const auto saved = fs::path(manifest_path).is_absolute() ? fs::path(manifest_path)
                                                               : prev / fs::path(manifest_path);
    std::string original;
    {
        std::ifstream in(saved, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        original = ss.str();
    }
    const int rc = run_command(argv);
    write_text_atomic(saved, original);
    if (rc != kOk) return rc;

    int mismatches = 0;
    for (const auto& [path, hash] : m.at("outputs").items()) {
        const bool same = fs::exists(path) && file_hash(path) == hash.get<std::string>();
        std::cout << (same ? "identical " : "DIFFERENT ") << path << "\n";
        mismatches += !same;
    }
    if (mismatches) {
        report_error("replay", kFailure, std::to_string(mismatches) + " output(s) differ from the manifest");
        return kFailure;
    }
    std::cout << "replay: all outputs identical\n";
    return kOk;
}

int run_command(const std::vector<std::string>& args)
{
    CLI::App app{"qalas: quantitative T1/T2/PD/IE mapping from 3D-QALAS contrasts"};
    app.set_version_flag("--version", QALAS_VERSION);
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: QALAS_THREADS or 1)")->check(CLI::NonNegativeNumber);

    PhantomArgs pa;
    auto* phantom = app.add_subcommand("phantom", "render a synthetic scene: truth maps, labels, B1");
    phantom->add_option("--preset", pa.preset, "nist-like | brain-like")->check(CLI::IsMember({"nist-like", "brain-like"}));
    phantom->add_option("--spec", pa.spec, "scene JSON");
    phantom->add_option("--variant", pa.variant, "brain-like subject (0 or 1)");
    phantom->add_option("--dims", pa.dims, "nx ny nz")->expected(3);
    phantom->add_option("-o,--out", pa.out, "output directory")->required();

    SimulateArgs sa;
    auto* simulate = app.add_subcommand("simulate", "maps + timing -> five contrasts and B1");
    simulate->add_option("--maps", sa.maps, "4-channel maps .qvol")->required();
    simulate->add_option("--b1", sa.b1, ".qvol whose last channel is B1 (default 1.0)");
    simulate->add_option("--timing", sa.timing, "timing JSON (default timing when omitted)");
    simulate->add_option("--noise", sa.noise, "none | gaussian | rician");
    simulate->add_option("--sigma", sa.sigma, "noise sigma in signal units");
    simulate->add_option("--sigma-rel", sa.sigma_rel, "noise sigma as a fraction of the clean p99");
    simulate->add_option("--seed", sa.seed, "noise seed");
    simulate->add_option("-o,--out", sa.out, "output .qvol")->required();

    auto* dict = app.add_subcommand("dict", "dictionary build and match");
    dict->require_subcommand(1);
    DictBuildArgs dba;
    auto* dict_build = dict->add_subcommand("build", "simulate one dictionary at a fixed B1");
    dict_build->add_option("--timing", dba.timing, "timing JSON");
    dict_build->add_option("--grid", dba.grid, "grid JSON (default grid when omitted)");
    dict_build->add_option("--b1", dba.b1, "B1 scale");
    dict_build->add_option("-o,--out", dba.out, "output .qdict")->required();
    DictMatchArgs dma;
    auto* dict_match = dict->add_subcommand("match", "B1-binned dictionary matching of a signal volume");
    dict_match->add_option("--in", dma.in, "signal .qvol")->required();
    dict_match->add_option("--timing", dma.timing, "timing JSON");
    dict_match->add_option("--grid", dma.grid, "grid JSON");
    dict_match->add_option("--dict-dir", dma.dict_dir, "directory of prebuilt .qdict files");
    dict_match->add_option("--cache-size", dma.cache_size, "generated sub-dictionaries kept in memory");
    dict_match->add_option("-o,--out", dma.out, "output maps .qvol")->required();

    auto add_train_options = [](CLI::App* sub, TrainArgs& ta) {
        sub->add_option("--in", ta.in, "signal .qvol")->required();
        sub->add_option("--timing", ta.timing, "timing JSON");
        sub->add_option("--net", ta.net, "network JSON");
        sub->add_option("--train", ta.train, "training JSON");
        sub->add_option("--init", ta.init, "initial checkpoint");
        sub->add_option("--epochs", ta.epochs, "override epochs");
        sub->add_option("--lr", ta.lr, "override learning rate");
        sub->add_option("--tv-weight", ta.tv_weight, "override TV weight");
        sub->add_option("--seed", ta.seed, "init and shuffle seed");
        sub->add_option("-o,--out", ta.out, "output directory")->required();
    };
    TrainArgs ta, fa;
    auto* train_cmd = app.add_subcommand("train", "scan-specific self-supervised training");
    add_train_options(train_cmd, ta);
    auto* finetune_cmd = app.add_subcommand("finetune", "continue training a checkpoint on new data (default 50 epochs)");
    add_train_options(finetune_cmd, fa);

    InferArgs ia;
    auto* infer_cmd = app.add_subcommand("infer", "apply a checkpoint to a signal volume");
    infer_cmd->add_option("--checkpoint", ia.checkpoint, ".qnet")->required();
    infer_cmd->add_option("--in", ia.in, "signal .qvol")->required();
    infer_cmd->add_option("--timing", ia.timing, "timing JSON");
    infer_cmd->add_option("--net", ia.net, "expected network JSON");
    infer_cmd->add_option("-o,--out", ia.out, "output maps .qvol")->required();

    auto* eval = app.add_subcommand("eval", "ROI regression and masked NRMSE");
    eval->require_subcommand(1);
    RegressArgs ra;
    auto* regress = eval->add_subcommand("regress", "ROI means of estimate vs reference, with OLS fit");
    regress->add_option("--truth", ra.truth, "reference maps .qvol")->required();
    regress->add_option("--maps", ra.maps, "estimated maps .qvol")->required();
    regress->add_option("--labels", ra.labels, "label .qvol")->required();
    regress->add_option("--params", ra.params, "maps to evaluate")->delimiter(',');
    regress->add_option("-o,--out", ra.out, "output directory")->required();
    NrmseArgs na;
    auto* nrmse = eval->add_subcommand("nrmse", "fluid-excluded NRMSE of --a against reference --b");
    nrmse->add_option("--a", na.a, "estimated maps .qvol")->required();
    nrmse->add_option("--b", na.b, "reference maps .qvol")->required();
    nrmse->add_option("--labels", na.labels, "restrict to labels > 0");
    nrmse->add_option("--fluid-t1", na.fluid_t1, "exclude voxels with reference T1 at or above this (ms)");
    nrmse->add_option("--pd-threshold", na.pd_threshold, "without labels, keep reference PD above this");
    nrmse->add_option("--params", na.params, "maps to evaluate")->delimiter(',');
    nrmse->add_option("-o,--out", na.out, "output directory")->required();

    PreviewArgs pv;
    auto* preview = app.add_subcommand("preview", "8-bit PGM of one slice of one channel");
    preview->add_option("--in", pv.in, ".qvol")->required();
    preview->add_option("--channel", pv.channel, "channel name or index");
    preview->add_option("--slice", pv.slice, "z index (default middle)");
    preview->add_option("--window", pv.window, "lo,hi")->delimiter(',');
    preview->add_option("-o,--out", pv.out, "output .pgm")->required();

    std::string manifest;
    auto* replay = app.add_subcommand("replay", "rerun a manifest and compare output hashes");
    replay->add_option("--manifest", manifest, "manifest JSON")->required();

    std::vector<const char*> cargv{"qalas"};
    for (const auto& s : args) cargv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", kUsage, e.what());
        return kUsage;
    }

    if (replay->parsed()) return cmd_replay(manifest);

    Run run;
    run.argv = args;
    run.threads = resolve_threads(threads);
    const auto t0 = std::chrono::steady_clock::now();
    fs::path manifest_path;

    if (phantom->parsed()) {
        run.subcommand = "phantom";
        cmd_phantom(pa, run);
        manifest_path = fs::path(pa.out) / "manifest.json";
    } else if (simulate->parsed()) {
        run.subcommand = "simulate";
        cmd_simulate(sa, run);
        manifest_path = file_manifest(sa.out);
    } else if (dict_build->parsed()) {
        run.subcommand = "dict build";
        cmd_dict_build(dba, run);
        manifest_path = file_manifest(dba.out);
    } else if (dict_match->parsed()) {
        run.subcommand = "dict match";
        cmd_dict_match(dma, run);
        manifest_path = file_manifest(dma.out);
    } else if (train_cmd->parsed()) {
        run.subcommand = "train";
        cmd_train(ta, run, false);
        manifest_path = fs::path(ta.out) / "manifest.json";
    } else if (finetune_cmd->parsed()) {
        run.subcommand = "finetune";
        cmd_train(fa, run, true);
        manifest_path = fs::path(fa.out) / "manifest.json";
    } else if (infer_cmd->parsed()) {
        run.subcommand = "infer";
        cmd_infer(ia, run);
        manifest_path = file_manifest(ia.out);
    } else if (regress->parsed()) {
        run.subcommand = "eval regress";
        cmd_eval_regress(ra, run);
        manifest_path = fs::path(ra.out) / "manifest.json";
    } else if (nrmse->parsed()) {
        run.subcommand = "eval nrmse";
        cmd_eval_nrmse(na, run);
        manifest_path = fs::path(na.out) / "manifest.json";
    } else if (preview->parsed()) {
        run.subcommand = "preview";
        cmd_preview(pv, run);
        manifest_path = file_manifest(pv.out);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(run, manifest_path, wall);
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run_command(args);
    } catch (const Error& e) {
        const int code = exit_code_for(e);
        report_error(e.kind(), code, e.what());
        return code;
    } catch (const fs::filesystem_error& e) {
        report_error("format", kFormat, e.what());
        return kFormat;
    } catch (const std::exception& e) {
        report_error("internal", kFailure, e.what());
        return kFailure;
    }
}
