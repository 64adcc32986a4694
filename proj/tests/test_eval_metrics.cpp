#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "qalas/errors.hpp"
#include "qalas/eval_metrics.hpp"
#include "qalas/phantom.hpp"
#include "test_support.hpp"

using namespace qalas;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("roi_means")
{
    SUBCASE("uniform map")
    {
        const std::vector<double> map(12, 3.25);
        const std::vector<double> labels{0, 1, 1, 2, 2, 2, 0, 1, 2, 1, 0, 2};
        const auto r = roi_means(map, labels);
        REQUIRE(r.size() == 2);
        for (const auto& s : r) {
            CHECK(s.mean == 3.25);
            CHECK(s.std == 0.0);
        }
        CHECK(r[0].count == 4);
        CHECK(r[1].count == 5);
    }

    SUBCASE("two-label checkerboard")
    {
        // 4 x 4 board, label 1 on black squares, map = x + 10 y.
        std::vector<double> map, labels;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                map.push_back(x + 10.0 * y);
                labels.push_back((x + y) % 2 == 0 ? 1 : 2);
            }
        const auto r = roi_means(map, labels);
        // Black: (0,0)=0 (2,0)=2 (1,1)=11 (3,1)=13 (0,2)=20 (2,2)=22 (1,3)=31 (3,3)=33 -> 132 / 8.
        CHECK(r[0].mean == 16.5);
        // White: 1 3 10 12 21 23 30 32 -> 132 / 8 as well.
        CHECK(r[1].mean == 16.5);
        double ss = 0.0;
        for (double v : {0.0, 2.0, 11.0, 13.0, 20.0, 22.0, 31.0, 33.0}) ss += (v - 16.5) * (v - 16.5);
        CHECK(r[0].std == doctest::Approx(std::sqrt(ss / 8.0)).epsilon(1e-15));
    }

    SUBCASE("empty label and permutation invariance")
    {
        const std::vector<double> map{1, 2, 3, 4, 5, 6};
        const std::vector<double> labels{1, 1, 3, 3, 3, 0};
        const auto r = roi_means(map, labels);
        REQUIRE(r.size() == 3);
        CHECK(r[1].count == 0);
        CHECK(std::isnan(r[1].mean));
        CHECK(r[2].mean == 4.0);

        const std::vector<std::size_t> perm{5, 2, 0, 4, 1, 3};
        std::vector<double> pm, pl;
        for (auto i : perm) {
            pm.push_back(map[i]);
            pl.push_back(labels[i]);
        }
        const auto q = roi_means(pm, pl);
        for (int k : {0, 2}) {
            CHECK(q[k].mean == r[k].mean);
            CHECK(q[k].count == r[k].count);
        }
        CHECK_THROWS_AS(roi_means(map, std::vector<double>{1.0}), ShapeError);
    }
}

TEST_CASE("linear_regress")
{
    const std::vector<double> x{1, 2, 4, 7, 11};
    std::vector<double> y2;
    for (double v : x) y2.push_back(2.0 * v + 3.0);
    const auto id = linear_regress(x, x);
    CHECK(id.slope == 1.0);
    CHECK(id.intercept == 0.0);
    CHECK(id.r_squared == 1.0);
    CHECK(id.n == 5);
    const auto r = linear_regress(x, y2);
    CHECK(r.slope == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(r.intercept == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(r.r_squared == doctest::Approx(1.0).epsilon(1e-15));

    // Hand-computed: x = 0,1,2, y = 0,2,1 -> slope 0.5, intercept 0.5, R^2 = 0.25.
    const auto h = linear_regress(std::vector<double>{0, 1, 2}, std::vector<double>{0, 2, 1});
    CHECK(h.slope == doctest::Approx(0.5));
    CHECK(h.intercept == doctest::Approx(0.5));
    CHECK(h.r_squared == doctest::Approx(0.25));

    CHECK_THROWS_AS(linear_regress(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), DegenerateError);
    CHECK_THROWS_AS(linear_regress(std::vector<double>{1}, std::vector<double>{1}), DegenerateError);

    // Any map against itself.
    testing::Rng rng(5);
    std::vector<double> m(200);
    for (double& v : m) v = rng.uniform(100.0, 3000.0);
    const auto self = linear_regress(m, m);
    CHECK(self.slope == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(self.intercept) < 1e-9);
    CHECK(self.r_squared == doctest::Approx(1.0).epsilon(1e-15));

    std::vector<RoiStats> a{{1, 10, 1.0, 0}, {2, 0, NAN, 0}, {3, 5, 3.0, 0}, {4, 5, 4.0, 0}};
    std::vector<RoiStats> b{{1, 10, 2.0, 0}, {2, 4, 9.0, 0}, {3, 5, 6.0, 0}, {4, 5, 8.0, 0}};
    const auto rr = regress_rois(a, b);
    CHECK(rr.n == 3);
    CHECK(rr.slope == doctest::Approx(2.0));
}

TEST_CASE("nrmse_percent")
{
    const std::vector<double> b{1.0, -2.0, 4.0, 8.0};
    const Mask all(4, 1);
    CHECK(nrmse_percent(b, b, all) == 0.0);
    std::vector<double> a;
    for (double v : b) a.push_back(1.1 * v);
    CHECK(nrmse_percent(a, b, all) == doctest::Approx(10.0).epsilon(1e-13));

    // 3 voxels: a = (2, 3, 5), b = (1, 3, 4): sqrt(1 + 0 + 1) / sqrt(1 + 9 + 16).
    const Mask three{1, 1, 0, 1};
    CHECK(nrmse_percent(std::vector<double>{2, 3, 9, 5}, std::vector<double>{1, 3, 100, 4}, three) ==
          doctest::Approx(100.0 * std::sqrt(2.0 / 26.0)).epsilon(1e-14));

    std::vector<double> ca, cb;
    for (std::size_t i = 0; i < b.size(); ++i) {
        ca.push_back(7.0 * (b[i] + 0.3 * i));
        cb.push_back(7.0 * b[i]);
    }
    std::vector<double> ua;
    for (std::size_t i = 0; i < b.size(); ++i) ua.push_back(b[i] + 0.3 * i);
    CHECK(nrmse_percent(ca, cb, all) == doctest::Approx(nrmse_percent(ua, b, all)).epsilon(1e-14));

    CHECK_THROWS_AS(nrmse_percent(a, b, Mask(4, 0)), DegenerateError);
    CHECK_THROWS_AS(nrmse_percent(a, std::vector<double>(4, 0.0), all), DegenerateError);
    CHECK_THROWS_AS(nrmse_percent(a, b, Mask(3, 1)), ShapeError);
}

TEST_CASE("fluid_mask")
{
    const std::vector<double> t1{800, 1300, 4000, 3500, 2900};
    MaskSpec spec;
    spec.base = {1, 1, 1, 0, 1};
    spec.fluid_t1_ms = 1e9;
    CHECK(fluid_mask(t1, spec) == spec.base);
    spec.fluid_t1_ms = 0.0;
    CHECK(mask_count(fluid_mask(t1, spec)) == 0);
    spec.fluid_t1_ms = 3000.0;
    CHECK(fluid_mask(t1, spec) == Mask{1, 1, 0, 0, 1});
    CHECK(fluid_mask(t1, MaskSpec{}) == Mask{1, 1, 0, 0, 1});

    // Brain-like phantom: every fluid-class voxel drops out at the default threshold.
    const auto scene = render_scene(brain_like_preset());
    const auto base = mask_from_threshold(scene.truth[kPD], 0.0);
    const auto m = fluid_mask(scene.truth[kT1], {base, 3000.0});
    std::size_t fluid_kept = 0, tissue_dropped = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (!base[i]) continue;
        const bool fluid = scene.truth[kT1][i] == 4000.0;
        fluid_kept += fluid && m[i];
        tissue_dropped += !fluid && !m[i];
    }
    CHECK(fluid_kept == 0);
    CHECK(tissue_dropped == 0);
    CHECK(mask_count(m) > 0);

    CHECK(mask_from_labels(std::vector<double>{0, 2, 1, 0}) == Mask{0, 1, 1, 0});
}

TEST_CASE("csv outputs")
{
    const auto dir = fs::temp_directory_path() / "qalas_test_eval";
    fs::create_directories(dir);
    write_roi_stats_csv({{"T1", {{1, 3, 1.5, 0.5}, {2, 0, NAN, NAN}}}}, dir / "roi_stats.csv");
    CHECK(slurp(dir / "roi_stats.csv") == "map,label,count,mean,std\nT1,1,3,1.5,0.5\nT1,2,0,,\n");
    write_regression_csv({{"T2", {2.0, -1.0, 0.75, 14}}}, dir / "regression.csv");
    CHECK(slurp(dir / "regression.csv") == "map,slope,intercept,r_squared,n\nT2,2,-1,0.75,14\n");
    write_nrmse_csv({{"T1", 8.5, 1200}}, dir / "nrmse.csv");
    CHECK(slurp(dir / "nrmse.csv") == "map,nrmse_percent,mask_voxels\nT1,8.5,1200\n");
}
