#include "qalas/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "qalas/config_io.hpp"
#include "qalas/errors.hpp"

namespace qalas {

namespace {

constexpr int kQvolVersion = 1;

std::uint32_t to_little(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

std::string sample_type_name(SampleType t) { return t == SampleType::float32 ? "float32" : "uint8"; }

std::size_t sample_bytes(SampleType t) { return t == SampleType::float32 ? 4 : 1; }

} // namespace

std::string to_string(const Dims& d)
{
    std::ostringstream os;
    os << d.nx << "x" << d.ny << "x" << d.nz;
    return os.str();
}

Volume::Volume(Dims dims, int channels, std::vector<std::string> channel_names)
    : dims_(dims), channels_(channels), names_(std::move(channel_names))
{
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw ShapeError("volume dims must be positive");
    if (channels != 1 && channels != 4 && channels != 5 && channels != 6)
        throw ShapeError("volume channel count must be 1, 4, 5 or 6 (got " + std::to_string(channels) + ")");
    if (names_.empty()) {
        if (channels == 4) names_ = kMapNames;
        else if (channels == 5) names_ = kContrastNames;
        else if (channels == 6) names_ = kSignalNames;
        else names_ = {"value"};
    }
    if (static_cast<int>(names_.size()) != channels) throw ShapeError("channel name count mismatch");
    data_.assign(dims.voxels() * channels, 0.0);
}

std::span<double> Volume::channel(int c) { return {data_.data() + c * voxels(), voxels()}; }

std::span<const double> Volume::channel(int c) const { return {data_.data() + c * voxels(), voxels()}; }

int Volume::channel_index(const std::string& name) const
{
    for (int c = 0; c < channels_; ++c)
        if (names_[c] == name) return c;
    return -1;
}

void require_signal_volume(const Volume& volume)
{
    if (volume.channels() != 5 && volume.channels() != 6)
        throw ShapeError("signal volume needs 5 contrasts (+ optional B1), got " +
                         std::to_string(volume.channels()) + " channels");
}

bool has_b1(const Volume& volume) { return volume.channels() == 6; }

ParameterMaps::ParameterMaps(Dims d) : dims(d)
{
    for (auto& m : maps) m.assign(d.voxels(), 0.0);
}

Volume ParameterMaps::to_volume() const
{
    Volume v(dims, 4, kMapNames);
    for (int m = 0; m < 4; ++m) std::copy(maps[m].begin(), maps[m].end(), v.channel(m).begin());
    return v;
}

ParameterMaps ParameterMaps::from_volume(const Volume& volume)
{
    if (volume.channels() != 4) throw ShapeError("parameter maps need exactly 4 channels");
    ParameterMaps out(volume.dims());
    for (int m = 0; m < 4; ++m) {
        const auto ch = volume.channel(m);
        out.maps[m].assign(ch.begin(), ch.end());
    }
    return out;
}

std::filesystem::path qvol_header_path(const std::filesystem::path& path) { return path.string() + ".json"; }

void write_qvol(const Volume& volume, const std::filesystem::path& path)
{
    const Dims& d = volume.dims();
    Json header{{"magic", "QVOL"},
                {"version", kQvolVersion},
                {"dims", {d.nx, d.ny, d.nz}},
                {"channels", volume.channels()},
                {"voxel_size_mm", volume.voxel_size_mm},
                {"channel_names", volume.channel_names()},
                {"endian", "little"},
                {"sample_type", sample_type_name(volume.sample_type)}};

    const auto& data = volume.data();
    std::string payload;
    if (volume.sample_type == SampleType::float32) {
        payload.resize(data.size() * 4);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const float f = static_cast<float>(data[i]);
            if (!std::isfinite(f)) throw FormatError("refusing to write non-finite sample to " + path.string());
            const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(f));
            std::memcpy(payload.data() + 4 * i, &bits, 4);
        }
    } else {
        payload.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double v = std::clamp(std::round(data[i]), 0.0, 255.0);
            payload[i] = static_cast<char>(static_cast<std::uint8_t>(v));
        }
    }
    write_text_atomic(path, payload);
    write_json_file(qvol_header_path(path), header);
}

Volume read_qvol(const std::filesystem::path& path)
{
    const Json h = read_json_file(qvol_header_path(path));
    Dims d;
    int channels = 0;
    std::vector<std::string> names;
    SampleType type = SampleType::float32;
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    try {
        if (h.at("magic").get<std::string>() != "QVOL") throw FormatError(path.string() + ": bad magic");
        if (h.at("version").get<int>() != kQvolVersion)
            throw FormatError(path.string() + ": unsupported qvol version " + h.at("version").dump());
        if (h.at("endian").get<std::string>() != "little") throw FormatError(path.string() + ": payload not little-endian");
        const auto dims = h.at("dims").get<std::vector<int>>();
        if (dims.size() != 3) throw FormatError(path.string() + ": dims must have 3 entries");
        d = {dims[0], dims[1], dims[2]};
        channels = h.at("channels").get<int>();
        names = h.at("channel_names").get<std::vector<std::string>>();
        voxel_size = h.at("voxel_size_mm").get<std::array<double, 3>>();
        const auto t = h.value("sample_type", std::string("float32"));
        if (t == "float32") type = SampleType::float32;
        else if (t == "uint8") type = SampleType::uint8;
        else throw FormatError(path.string() + ": unknown sample_type '" + t + "'");
    } catch (const Json::exception& e) {
        throw FormatError(path.string() + ": bad header: " + e.what());
    }

    Volume volume;
    try {
        volume = Volume(d, channels, names);
    } catch (const ShapeError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    volume.sample_type = type;
    volume.voxel_size_mm = voxel_size;

    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t expected = d.voxels() * channels * sample_bytes(type);
    if (payload.size() != expected) {
        throw FormatError(path.string() + ": payload has " + std::to_string(payload.size()) +
                          " bytes, header implies " + std::to_string(expected));
    }
    auto& data = volume.data();
    if (type == SampleType::float32) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, payload.data() + 4 * i, 4);
            const float f = std::bit_cast<float>(to_little(bits));
            if (!std::isfinite(f)) throw FormatError(path.string() + ": non-finite sample at index " + std::to_string(i));
            data[i] = f;
        }
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<std::uint8_t>(payload[i]);
    }
    return volume;
}

double clamp_b1(double b1) { return std::clamp(b1, kB1Min, kB1Max); }

std::vector<double> resample_b1(std::span<const double> b1, const Dims& source, const Dims& target)
{
    if (b1.size() != source.voxels()) throw ShapeError("B1 data does not match its dims");
    if (target.nx <= 0 || target.ny <= 0 || target.nz <= 0) throw ShapeError("target dims must be positive");

    // Source coordinate of each target voxel centre along one axis.
    struct Tap {
        int lo, hi;
        double w;
    };
    auto taps = [](int n_src, int n_dst) {
        std::vector<Tap> out(n_dst);
        const double ratio = static_cast<double>(n_src) / n_dst;
        for (int i = 0; i < n_dst; ++i) {
            double s = (i + 0.5) * ratio - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(n_src - 1));
            const int lo = static_cast<int>(std::floor(s));
            const int hi = std::min(lo + 1, n_src - 1);
            out[i] = {lo, hi, s - lo};
        }
        return out;
    };
    const auto tx = taps(source.nx, target.nx);
    const auto ty = taps(source.ny, target.ny);
    const auto tz = taps(source.nz, target.nz);

    std::vector<double> out(target.voxels());
    for (int z = 0; z < target.nz; ++z)
        for (int y = 0; y < target.ny; ++y)
            for (int x = 0; x < target.nx; ++x) {
                const auto& X = tx[x];
                const auto& Y = ty[y];
                const auto& Z = tz[z];
                auto at = [&](int xi, int yi, int zi) { return b1[source.index(xi, yi, zi)]; };
                const double c00 = at(X.lo, Y.lo, Z.lo) * (1 - X.w) + at(X.hi, Y.lo, Z.lo) * X.w;
                const double c10 = at(X.lo, Y.hi, Z.lo) * (1 - X.w) + at(X.hi, Y.hi, Z.lo) * X.w;
                const double c01 = at(X.lo, Y.lo, Z.hi) * (1 - X.w) + at(X.hi, Y.lo, Z.hi) * X.w;
                const double c11 = at(X.lo, Y.hi, Z.hi) * (1 - X.w) + at(X.hi, Y.hi, Z.hi) * X.w;
                const double c0 = c00 * (1 - Y.w) + c10 * Y.w;
                const double c1 = c01 * (1 - Y.w) + c11 * Y.w;
                out[target.index(x, y, z)] = clamp_b1(c0 * (1 - Z.w) + c1 * Z.w);
            }
    return out;
}

std::vector<double> extract_slice(const Volume& volume, int channel, int z)
{
    const Dims& d = volume.dims();
    if (channel < 0 || channel >= volume.channels()) throw ShapeError("channel out of range");
    if (z < 0 || z >= d.nz) throw ShapeError("slice index out of range");
    const auto ch = volume.channel(channel);
    const auto first = ch.begin() + static_cast<std::ptrdiff_t>(d.index(0, 0, z));
    return {first, first + static_cast<std::ptrdiff_t>(d.slice_voxels())};
}

std::string pgm_bytes(std::span<const double> slice, int width, int height, double lo, double hi)
{
    if (!(lo < hi)) throw ConfigError("preview window needs lo < hi");
    if (slice.size() != static_cast<std::size_t>(width) * height) throw ShapeError("slice size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.reserve(out.size() + slice.size());
    for (double v : slice) {
        int g;
        if (!(v > lo)) g = 0;
        else if (v >= hi) g = 255;
        else g = static_cast<int>(std::floor((v - lo) / (hi - lo) * 255.0 + 0.5));
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(g)));
    }
    return out;
}

void export_pgm_preview(std::span<const double> slice, int width, int height, double lo, double hi,
                        const std::filesystem::path& path)
{
    write_text_atomic(path, pgm_bytes(slice, width, height, lo, hi));
}

} // namespace qalas
