#pragma once

// ROI statistics, linear regression and masked percent NRMSE.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qalas {

using Mask = std::vector<std::uint8_t>;  // 1 = included

struct RoiStats {
    int label = 0;
    std::size_t count = 0;
    double mean = 0.0;  // NaN when count == 0
    double std = 0.0;   // population standard deviation
};

// One entry per label 1..max(labels); label 0 is background and skipped.
// Labels are rounded to the nearest integer.
std::vector<RoiStats> roi_means(std::span<const double> map, std::span<const double> labels);

struct RegressionResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t n = 0;
};

// Ordinary least squares y = slope * x + intercept.
RegressionResult linear_regress(std::span<const double> x, std::span<const double> y);

// Regression over ROIs present (count > 0) in both tables, matched by label.
RegressionResult regress_rois(const std::vector<RoiStats>& x, const std::vector<RoiStats>& y);

// 100 * ||a - b|| / ||b|| over the mask.
double nrmse_percent(std::span<const double> a, std::span<const double> b, const Mask& mask);

struct MaskSpec {
    Mask base;                    // empty: every voxel
    double fluid_t1_ms = 3000.0;  // voxels at or above this reference T1 are fluid
};

// Base-mask voxels whose reference T1 lies below the fluid threshold.
Mask fluid_mask(std::span<const double> t1_map, const MaskSpec& spec);

Mask mask_from_labels(std::span<const double> labels);
Mask mask_from_threshold(std::span<const double> values, double threshold);
std::size_t mask_count(const Mask& mask);

struct NamedRoiStats {
    std::string map;
    std::vector<RoiStats> rois;
};
struct NamedRegression {
    std::string map;
    RegressionResult result;
};
struct NamedNrmse {
    std::string map;
    double percent = 0.0;
    std::size_t voxels = 0;
};

// map,label,count,mean,std
void write_roi_stats_csv(const std::vector<NamedRoiStats>& rows, const std::filesystem::path& path);
// map,slope,intercept,r_squared,n
void write_regression_csv(const std::vector<NamedRegression>& rows, const std::filesystem::path& path);
// map,nrmse_percent,mask_voxels
void write_nrmse_csv(const std::vector<NamedNrmse>& rows, const std::filesystem::path& path);

} // namespace qalas
