#include "qalas/config_io.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qalas/errors.hpp"
#include "qalas/hash.hpp"

namespace qalas {

std::string hex64(std::uint64_t value)
{
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << value;
    return os.str();
}

std::uint64_t parse_hex64(const std::string& text)
{
    try {
        std::size_t used = 0;
        const auto v = std::stoull(text, &used, 16);
        if (used != text.size()) throw FormatError("bad hex value '" + text + "'");
        return v;
    } catch (const std::logic_error&) {
        throw FormatError("bad hex value '" + text + "'");
    }
}

Json timing_to_json(const SequenceTiming& t)
{
    return Json{{"tr_ms", t.tr_ms},
                {"n_acq", t.n_acq},
                {"acq_spacing_ms", t.acq_spacing_ms},
                {"echo_spacing_ms", t.echo_spacing_ms},
                {"turbo_factor", t.turbo_factor},
                {"flip_angle_deg", t.flip_angle_deg},
                {"t2prep_te_ms", t.t2prep_te_ms},
                {"inv_delay_ms", t.inv_delay_ms},
                {"center_echo_index", t.center_echo_index},
                {"signal_mode", to_string(t.signal_mode)}};
}

SequenceTiming timing_from_json(const Json& j)
{
    if (!j.is_object()) throw ConfigError("sequence timing must be a JSON object");
    static const char* known[] = {"tr_ms",          "n_acq",          "acq_spacing_ms", "echo_spacing_ms",
                                  "turbo_factor",   "flip_angle_deg", "t2prep_te_ms",   "inv_delay_ms",
                                  "center_echo_index", "signal_mode"};
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || item.key() == k;
        if (!ok) throw ConfigError("unknown sequence timing key '" + item.key() + "'");
    }
    SequenceTiming t;
    try {
        t.tr_ms = j.value("tr_ms", t.tr_ms);
        t.n_acq = j.value("n_acq", t.n_acq);
        t.acq_spacing_ms = j.value("acq_spacing_ms", t.acq_spacing_ms);
        t.echo_spacing_ms = j.value("echo_spacing_ms", t.echo_spacing_ms);
        t.turbo_factor = j.value("turbo_factor", t.turbo_factor);
        t.flip_angle_deg = j.value("flip_angle_deg", t.flip_angle_deg);
        t.t2prep_te_ms = j.value("t2prep_te_ms", t.t2prep_te_ms);
        t.inv_delay_ms = j.value("inv_delay_ms", t.inv_delay_ms);
        t.center_echo_index = j.value("center_echo_index", t.turbo_factor / 2);
        t.signal_mode = signal_mode_from_string(j.value("signal_mode", std::string("magnitude")));
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("sequence timing: ") + e.what());
    }
    t.validate();
    return t;
}

Json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text)
{
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp);
        out << text;
        if (!out) throw FormatError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

void write_json_file(const std::filesystem::path& path, const Json& json)
{
    write_text_atomic(path, json.dump(2) + "\n");
}

SequenceTiming load_timing(const std::filesystem::path& path) { return timing_from_json(read_json_file(path)); }

} // namespace qalas
