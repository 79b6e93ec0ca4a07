#include <doctest.h>

#include <cmath>
#include <set>

#include "common/error.hpp"
#include "maskgen/maskgen.hpp"
#include "testutil.hpp"
#include "volcore/morph.hpp"

using namespace tsyn;
using mg::MaskPolicy;
using mg::TumorSpec;
using vol::Index3;
using vol::VoxelMask;

namespace {

VoxelMask ball_organ(int n, double radius_mm) {
    VoxelMask organ({n, n, n}, {1, 1, 1});
    const double c = n / 2;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const double d2 = (i - c) * (i - c) + (j - c) * (j - c) + (k - c) * (k - c);
                if (d2 <= radius_mm * radius_mm) organ.at(i, j, k) = 1;
            }
    return organ;
}

// independent implementation of the rotated-ellipsoid inside test
bool oracle_inside(const TumorSpec& spec, double px, double py, double pz) {
    const double ax = spec.euler_rad[0], ay = spec.euler_rad[1], az = spec.euler_rad[2];
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    // R = Rz Ry Rx applied column by column to the unit axes
    double R[3][3];
    R[0][0] = cz * cy;
    R[0][1] = cz * sy * sx - sz * cx;
    R[0][2] = cz * sy * cx + sz * sx;
    R[1][0] = sz * cy;
    R[1][1] = sz * sy * sx + cz * cx;
    R[1][2] = sz * sy * cx - cz * sx;
    R[2][0] = -sy;
    R[2][1] = cy * sx;
    R[2][2] = cy * cx;
    // body coordinates: q = R^T p
    const double q0 = R[0][0] * px + R[1][0] * py + R[2][0] * pz;
    const double q1 = R[0][1] * px + R[1][1] * py + R[2][1] * pz;
    const double q2 = R[0][2] * px + R[1][2] * py + R[2][2] * pz;
    const double s = (q0 / spec.semi_axes_mm[0]) * (q0 / spec.semi_axes_mm[0]) +
                     (q1 / spec.semi_axes_mm[1]) * (q1 / spec.semi_axes_mm[1]) +
                     (q2 / spec.semi_axes_mm[2]) * (q2 / spec.semi_axes_mm[2]);
    return s <= 1.0;
}

}  // namespace

TEST_CASE("early policy never samples a spec at or above 20 mm") {
    MaskPolicy policy = MaskPolicy::early_default();
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        TumorSpec spec = mg::sample_tumor_spec(policy, rng);
        CHECK(spec.diameter_mm < 20.0);
        CHECK(spec.size_class == mg::SizeClass::Early);
    }
}

TEST_CASE("policy validation rejects early classes reaching 20 mm") {
    MaskPolicy policy = MaskPolicy::early_default();
    policy.classes[0].second.diameter_hi_mm = 25.0;
    CHECK_THROWS_AS(policy.validate(), Error);
}

TEST_CASE("aspect ratio bound 1 gives spheres; same seed gives identical specs") {
    MaskPolicy policy = MaskPolicy::early_default();
    policy.aspect_ratio_max = 1.0;
    Rng rng(2);
    TumorSpec s = mg::sample_tumor_spec(policy, rng);
    CHECK(s.semi_axes_mm[0] == doctest::Approx(s.semi_axes_mm[1]));
    CHECK(s.semi_axes_mm[0] == doctest::Approx(s.semi_axes_mm[2]));

    Rng r1(42), r2(42);
    TumorSpec a = mg::sample_tumor_spec(policy, r1);
    TumorSpec b = mg::sample_tumor_spec(policy, r2);
    CHECK(a.diameter_mm == b.diameter_mm);
    CHECK(a.semi_axes_mm == b.semi_axes_mm);
    CHECK(a.euler_rad == b.euler_rad);
    CHECK(a.seed == b.seed);
}

TEST_CASE("rasterize_ellipsoid: sphere volume within 10% of analytic") {
    TumorSpec spec;
    spec.semi_axes_mm = {5.0, 5.0, 5.0};
    spec.euler_rad = {0.3, 1.1, 2.0};  // rotation is irrelevant for a sphere
    VoxelMask m = mg::rasterize_ellipsoid(spec, {32, 32, 32}, {16, 16, 16}, {1, 1, 1});
    const double analytic = 4.0 / 3.0 * 3.14159265358979 * 125.0;
    CHECK(std::abs(m.count() - analytic) / analytic < 0.10);
}

TEST_CASE("rasterize_ellipsoid: axis-aligned bounding box extents") {
    TumorSpec spec;
    spec.semi_axes_mm = {5.0, 2.0, 2.0};
    spec.euler_rad = {0.0, 0.0, 0.0};
    VoxelMask m = mg::rasterize_ellipsoid(spec, {32, 32, 32}, {16, 16, 16}, {1, 1, 1});
    Index3 lo{99, 99, 99}, hi{-1, -1, -1};
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j)
            for (int k = 0; k < 32; ++k)
                if (m.at(i, j, k)) {
                    lo = {std::min(lo[0], i), std::min(lo[1], j), std::min(lo[2], k)};
                    hi = {std::max(hi[0], i), std::max(hi[1], j), std::max(hi[2], k)};
                }
    CHECK(hi[0] - lo[0] + 1 == 11);
    CHECK(hi[1] - lo[1] + 1 == 5);
    CHECK(hi[2] - lo[2] + 1 == 5);
}

TEST_CASE("rasterize_ellipsoid: 90-degree rotation about one axis swaps the other extents") {
    TumorSpec spec;
    // off-lattice semi-axes keep voxel centers away from the exact surface
    spec.semi_axes_mm = {6.3, 2.6, 2.6};
    spec.euler_rad = {0.0, 0.0, 0.0};
    VoxelMask a = mg::rasterize_ellipsoid(spec, {32, 32, 32}, {16, 16, 16}, {1, 1, 1});
    TumorSpec rot = spec;
    rot.euler_rad = {0.0, 0.0, 3.14159265358979 / 2.0};  // about the third axis
    VoxelMask b = mg::rasterize_ellipsoid(rot, {32, 32, 32}, {16, 16, 16}, {1, 1, 1});
    // voxel sets related by the lattice rotation (i,j) -> (j, 32-1-... ) have equal counts
    CHECK(a.count() == b.count());
    auto extent = [](const VoxelMask& m, int axis) {
        int lo = 99, hi = -1;
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j)
                for (int k = 0; k < 32; ++k)
                    if (m.at(i, j, k)) {
                        const int idx[3] = {i, j, k};
                        lo = std::min(lo, idx[axis]);
                        hi = std::max(hi, idx[axis]);
                    }
        return hi - lo + 1;
    };
    CHECK(extent(a, 0) == extent(b, 1));
    CHECK(extent(a, 1) == extent(b, 0));
    CHECK(extent(a, 2) == extent(b, 2));
}

TEST_CASE("rasterize_ellipsoid matches the brute-force oracle exactly") {
    Rng rng(3);
    MaskPolicy policy = MaskPolicy::early_default();
    for (int trial = 0; trial < 10; ++trial) {
        TumorSpec spec = mg::sample_tumor_spec(policy, rng);
        const Index3 center = {12, 14, 10};
        const vol::Vec3 sp = {1.0, 1.25, 0.75};
        VoxelMask m = mg::rasterize_ellipsoid(spec, {26, 26, 26}, center, sp);
        for (int i = 0; i < 26; ++i)
            for (int j = 0; j < 26; ++j)
                for (int k = 0; k < 26; ++k) {
                    const bool want = oracle_inside(spec, (i - center[0]) * sp[0], (j - center[1]) * sp[1],
                                                    (k - center[2]) * sp[2]);
                    CHECK(static_cast<bool>(m.at(i, j, k)) == want);
                }
    }
}

TEST_CASE("elastic_deform: identity at zero magnitude, bounded volume change, one component") {
    TumorSpec spec;
    spec.semi_axes_mm = {6.0, 4.0, 5.0};
    VoxelMask base = mg::rasterize_ellipsoid(spec, {32, 32, 32}, {16, 16, 16}, {1, 1, 1});

    spec.deform_magnitude_mm = 0.0;
    Rng rng(4);
    VoxelMask same = mg::elastic_deform(base, spec, rng);
    CHECK(same.data == base.data);

    spec.deform_magnitude_mm = 2.0;
    spec.deform_sigma_mm = 3.0;
    const double v0 = static_cast<double>(base.count());
    for (int seed = 0; seed < 100; ++seed) {
        Rng r(seed);
        VoxelMask d = mg::elastic_deform(base, spec, r);
        std::vector<int> labels;
        CHECK(vol::label_components(d, labels) == 1);
        const double v1 = static_cast<double>(d.count());
        CHECK(std::abs(v1 - v0) / v0 < 0.25);
    }
}

TEST_CASE("place_in_organ: single voxel lands inside; infeasible placements fail") {
    VoxelMask organ = ball_organ(32, 10.0);
    VoxelMask dot({32, 32, 32}, {1, 1, 1});
    dot.at(3, 3, 3) = 1;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        VoxelMask placed = mg::place_in_organ(dot, organ, rng, 1.0);
        CHECK(placed.count() == 1);
        for (std::int64_t i = 0; i < placed.voxels(); ++i)
            if (placed.data[i]) CHECK(organ.data[i] == 1);
    }

    // tumor strictly larger than the organ cannot satisfy full containment
    VoxelMask big = ball_organ(32, 14.0);
    VoxelMask small_organ = ball_organ(32, 6.0);
    Rng rng(1);
    CHECK_THROWS_WITH_AS(mg::place_in_organ(big, small_organ, rng, 1.0), doctest::Contains("no feasible"),
                         Error);
}

TEST_CASE("place_in_organ honors the containment fraction") {
    VoxelMask organ = ball_organ(40, 12.0);
    TumorSpec spec;
    spec.semi_axes_mm = {5.0, 4.0, 4.0};
    VoxelMask tumor = mg::rasterize_ellipsoid(spec, {40, 40, 40}, {20, 20, 20}, {1, 1, 1});
    const double total = static_cast<double>(tumor.count());
    for (int seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        VoxelMask placed = mg::place_in_organ(tumor, organ, rng, 0.9);
        std::int64_t inside = 0;
        for (std::int64_t i = 0; i < placed.voxels(); ++i)
            if (placed.data[i] && organ.data[i]) ++inside;
        CHECK(static_cast<double>(inside) / total >= 0.9 - 1e-9);
    }
}

TEST_CASE("generate_tumor_mask: determinism, contracts, diversity") {
    VoxelMask organ = ball_organ(48, 16.0);
    MaskPolicy policy = MaskPolicy::early_default();

    Rng r1(9), r2(9);
    auto a = mg::generate_tumor_mask(organ, policy, r1);
    auto b = mg::generate_tumor_mask(organ, policy, r2);
    CHECK(a.mask.data == b.mask.data);
    CHECK(a.spec.diameter_mm == b.spec.diameter_mm);

    std::set<std::int64_t> counts;
    std::set<std::int64_t> centroids;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        auto g = mg::generate_tumor_mask(organ, policy, rng);
        CHECK(g.mask.count() > 0);
        std::vector<int> labels;
        CHECK(vol::label_components(g.mask, labels) == 1);
        CHECK(vol::mask_diameter_mm(g.mask) < 20.0);
        // early tumors are fully contained in the organ
        for (std::int64_t i = 0; i < g.mask.voxels(); ++i)
            if (g.mask.data[i]) CHECK(organ.data[i] == 1);
        counts.insert(g.mask.count());
        std::int64_t ci = 0, cj = 0, ck = 0, n = 0;
        for (int i = 0; i < 48; ++i)
            for (int j = 0; j < 48; ++j)
                for (int k = 0; k < 48; ++k)
                    if (g.mask.at(i, j, k)) {
                        ci += i;
                        cj += j;
                        ck += k;
                        ++n;
                    }
        centroids.insert((ci / n) * 48 * 48 + (cj / n) * 48 + (ck / n));
    }
    CHECK(counts.size() >= 2);
    CHECK(centroids.size() >= 2);
}

TEST_CASE("mask policy JSON round trip and unknown-key rejection") {
    MaskPolicy p = MaskPolicy::early_default();
    MaskPolicy q = MaskPolicy::from_json(p.to_json());
    CHECK(q.classes.size() == 1);
    CHECK(q.classes[0].second.diameter_hi_mm == p.classes[0].second.diameter_hi_mm);

    json bad = p.to_json();
    bad["typo_key"] = 1;
    CHECK_THROWS_WITH_AS(MaskPolicy::from_json(bad), doctest::Contains("typo_key"), Error);
}
