#include "qalas/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "qalas/config_io.hpp"
#include "qalas/errors.hpp"

namespace qalas {

namespace {

std::string fmt(double v)
{
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int label_of(double v) { return static_cast<int>(std::lround(v)); }

} // namespace

std::vector<RoiStats> roi_means(std::span<const double> map, std::span<const double> labels)
{
    if (map.size() != labels.size()) throw ShapeError("roi_means: map and labels differ in size");
    int max_label = 0;
    for (double l : labels) max_label = std::max(max_label, label_of(l));
    std::vector<RoiStats> out(max_label);
    std::vector<double> sum(max_label, 0.0);
    for (int k = 0; k < max_label; ++k) out[k].label = k + 1;
    for (std::size_t i = 0; i < map.size(); ++i) {
        const int l = label_of(labels[i]);
        if (l <= 0) continue;
        ++out[l - 1].count;
        sum[l - 1] += map[i];
    }
    for (int k = 0; k < max_label; ++k)
        out[k].mean = out[k].count ? sum[k] / static_cast<double>(out[k].count) : std::numeric_limits<double>::quiet_NaN();
    // Second pass about the mean, which is stable for large counts.
    std::vector<double> ss(max_label, 0.0);
    for (std::size_t i = 0; i < map.size(); ++i) {
        const int l = label_of(labels[i]);
        if (l <= 0) continue;
        const double dv = map[i] - out[l - 1].mean;
        ss[l - 1] += dv * dv;
    }
    for (int k = 0; k < max_label; ++k)
        out[k].std = out[k].count ? std::sqrt(ss[k] / static_cast<double>(out[k].count)) : std::numeric_limits<double>::quiet_NaN();
    return out;
}

RegressionResult linear_regress(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) throw ShapeError("linear_regress: x and y differ in length");
    const std::size_t n = x.size();
    if (n < 2) throw DegenerateError("linear_regress: need at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0)) throw DegenerateError("linear_regress: x is constant");
    RegressionResult r;
    r.n = n;
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = y[i] - (r.slope * x[i] + r.intercept);
        ss_res += e * e;
    }
    if (syy > 0.0) r.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
    else r.r_squared = ss_res == 0.0 ? 1.0 : 0.0;
    return r;
}

RegressionResult regress_rois(const std::vector<RoiStats>& x, const std::vector<RoiStats>& y)
{
    std::map<int, double> ys;
    for (const auto& r : y)
        if (r.count > 0) ys[r.label] = r.mean;
    std::vector<double> xs, yv;
    for (const auto& r : x) {
        const auto it = ys.find(r.label);
        if (r.count == 0 || it == ys.end()) continue;
        xs.push_back(r.mean);
        yv.push_back(it->second);
    }
    return linear_regress(xs, yv);
}

double nrmse_percent(std::span<const double> a, std::span<const double> b, const Mask& mask)
{
    if (a.size() != b.size() || mask.size() != a.size()) throw ShapeError("nrmse_percent: inputs differ in size");
    double err = 0.0, ref = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!mask[i]) continue;
        err += (a[i] - b[i]) * (a[i] - b[i]);
        ref += b[i] * b[i];
        ++n;
    }
    if (n == 0) throw DegenerateError("nrmse_percent: empty mask");
    if (!(ref > 0.0)) throw DegenerateError("nrmse_percent: reference is zero over the mask");
    return 100.0 * std::sqrt(err) / std::sqrt(ref);
}

Mask fluid_mask(std::span<const double> t1_map, const MaskSpec& spec)
{
    if (!(spec.fluid_t1_ms >= 0.0)) throw ConfigError("fluid threshold must be non-negative");
    if (!spec.base.empty() && spec.base.size() != t1_map.size()) throw ShapeError("fluid_mask: base mask size");
    Mask out(t1_map.size(), 0);
    for (std::size_t i = 0; i < t1_map.size(); ++i)
        out[i] = (spec.base.empty() || spec.base[i]) && t1_map[i] < spec.fluid_t1_ms;
    return out;
}

Mask mask_from_labels(std::span<const double> labels)
{
    Mask m(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = label_of(labels[i]) > 0;
    return m;
}

Mask mask_from_threshold(std::span<const double> values, double threshold)
{
    Mask m(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m[i] = values[i] > threshold;
    return m;
}

std::size_t mask_count(const Mask& mask) { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

void write_roi_stats_csv(const std::vector<NamedRoiStats>& rows, const std::filesystem::path& path)
{
    std::string out = "map,label,count,mean,std\n";
    for (const auto& r : rows)
        for (const auto& s : r.rois)
            out += r.map + "," + std::to_string(s.label) + "," + std::to_string(s.count) + "," + fmt(s.mean) + "," +
                   fmt(s.std) + "\n";
    write_text_atomic(path, out);
}

void write_regression_csv(const std::vector<NamedRegression>& rows, const std::filesystem::path& path)
{
    std::string out = "map,slope,intercept,r_squared,n\n";
    for (const auto& r : rows)
        out += r.map + "," + fmt(r.result.slope) + "," + fmt(r.result.intercept) + "," + fmt(r.result.r_squared) + "," +
               std::to_string(r.result.n) + "\n";
    write_text_atomic(path, out);
}

void write_nrmse_csv(const std::vector<NamedNrmse>& rows, const std::filesystem::path& path)
{
    std::string out = "map,nrmse_percent,mask_voxels\n";
    for (const auto& r : rows) out += r.map + "," + fmt(r.percent) + "," + std::to_string(r.voxels) + "\n";
    write_text_atomic(path, out);
}

} // namespace qalas
