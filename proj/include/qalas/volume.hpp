#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qalas {

struct Dims {
    int nx = 0;
    int ny = 0;
    int nz = 0;

    std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }
    std::size_t slice_voxels() const { return static_cast<std::size_t>(nx) * ny; }
    std::size_t index(int x, int y, int z) const
    {
        return (static_cast<std::size_t>(z) * ny + y) * nx + x;
    }
    bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& dims);

enum class SampleType { float32, uint8 };

// Multi-channel 3D volume. In memory 64-bit; on disk 32-bit float (or 8-bit
// for label volumes). Layout is channel-major, then z, y, x row-major, so each
// channel is one contiguous run of dims.voxels() samples.
class Volume {
public:
    Volume() = default;
    Volume(Dims dims, int channels, std::vector<std::string> channel_names = {});

    const Dims& dims() const { return dims_; }
    int channels() const { return channels_; }
    std::size_t voxels() const { return dims_.voxels(); }

    std::span<double> channel(int c);
    std::span<const double> channel(int c) const;
    double& at(int c, std::size_t voxel) { return data_[c * voxels() + voxel]; }
    double at(int c, std::size_t voxel) const { return data_[c * voxels() + voxel]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    const std::vector<std::string>& channel_names() const { return names_; }
    int channel_index(const std::string& name) const;  // -1 when absent

    std::array<double, 3> voxel_size_mm{1.0, 1.0, 1.0};
    SampleType sample_type = SampleType::float32;

private:
    Dims dims_;
    int channels_ = 0;
    std::vector<std::string> names_;
    std::vector<double> data_;
};

// Channel naming conventions.
inline const std::vector<std::string> kContrastNames{"S1", "S2", "S3", "S4", "S5"};
inline const std::vector<std::string> kSignalNames{"S1", "S2", "S3", "S4", "S5", "B1"};
inline const std::vector<std::string> kMapNames{"T1", "T2", "PD", "IE"};

// A SignalVolume is a Volume with the five contrasts in channels 0..4 and an
// optional B1 channel 5.
void require_signal_volume(const Volume& volume);
bool has_b1(const Volume& volume);

enum MapChannel { kT1 = 0, kT2 = 1, kPD = 2, kIE = 3 };

// Four co-registered maps: T1 (ms), T2 (ms), PD, IE.
struct ParameterMaps {
    Dims dims;
    std::array<std::vector<double>, 4> maps;

    ParameterMaps() = default;
    explicit ParameterMaps(Dims d);
    Volume to_volume() const;
    static ParameterMaps from_volume(const Volume& volume);
    std::vector<double>& operator[](int m) { return maps[m]; }
    const std::vector<double>& operator[](int m) const { return maps[m]; }
};

// <path> holds the little-endian payload, <path>.json the header.
void write_qvol(const Volume& volume, const std::filesystem::path& path);
Volume read_qvol(const std::filesystem::path& path);
std::filesystem::path qvol_header_path(const std::filesystem::path& path);

inline constexpr double kB1Min = 0.65;
inline constexpr double kB1Max = 1.35;
double clamp_b1(double b1);

// Trilinear resampling (voxel centres aligned, edge-clamped) onto target dims,
// then clamped to [0.65, 1.35].
std::vector<double> resample_b1(std::span<const double> b1, const Dims& source, const Dims& target);

// One axial slice of one channel.
std::vector<double> extract_slice(const Volume& volume, int channel, int z);

// 8-bit binary PGM (P5) with linear windowing; round-half-up between lo and hi.
std::string pgm_bytes(std::span<const double> slice, int width, int height, double lo, double hi);
void export_pgm_preview(std::span<const double> slice, int width, int height, double lo, double hi,
                        const std::filesystem::path& path);

} // namespace qalas
