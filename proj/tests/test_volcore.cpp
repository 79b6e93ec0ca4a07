#include <doctest.h>

#include <fstream>

#include "common/error.hpp"
#include "testutil.hpp"
#include "volcore/morph.hpp"
#include "volcore/volume.hpp"

using namespace tsyn;
using vol::Index3;
using vol::Volume;
using vol::VoxelMask;
using vol::WindowSpec;

namespace {

Volume labeled_volume(Index3 shape, vol::Vec3 spacing = {1, 1, 1}) {
    Volume v(shape, spacing);
    for (std::int64_t i = 0; i < v.voxels(); ++i) v.data[i] = static_cast<float>(i);
    return v;
}

}  // namespace

TEST_CASE("nifti round trip: volume and mask, gz and plain") {
    auto dir = testutil::tmp_dir("nifti");
    Rng rng(1);
    Volume v({4, 5, 6}, {1.0, 1.5, 2.0});
    v.origin = {10.0, -4.0, 2.5};
    for (auto& x : v.data) x = static_cast<float>(rng.normal() * 100.0);

    for (const char* name : {"v.nii.gz", "v.nii"}) {
        vol::save_volume(v, dir / name);
        Volume r = vol::load_volume(dir / name);
        CHECK(r.shape == v.shape);
        CHECK(r.data == v.data);  // bit-exact float32 payload
        for (int a = 0; a < 3; ++a) {
            CHECK(r.spacing[a] == doctest::Approx(v.spacing[a]));
            CHECK(r.origin[a] == doctest::Approx(v.origin[a]));
        }
        CHECK(r.axcodes == v.axcodes);
    }

    VoxelMask m({4, 5, 6}, {1.0, 1.5, 2.0});
    m.at(1, 2, 3) = 1;
    m.at(0, 0, 0) = 1;
    vol::save_mask(m, v, dir / "m.nii.gz");
    VoxelMask rm = vol::load_mask(dir / "m.nii.gz");
    CHECK(rm.data == m.data);
}

TEST_CASE("load_volume error cases are reported distinctly") {
    auto dir = testutil::tmp_dir("nifti_err");

    CHECK_THROWS_WITH_AS(vol::load_volume(dir / "nope.nii"), doctest::Contains("missing file"), Error);

    {
        std::ofstream out(dir / "garbage.nii", std::ios::binary);
        std::vector<char> junk(400, 'x');
        out.write(junk.data(), static_cast<std::streamsize>(junk.size()));
    }
    CHECK_THROWS_WITH_AS(vol::load_volume(dir / "garbage.nii"), doctest::Contains("malformed header"), Error);

    // craft a 2D payload by patching dim[0] and dim[3]
    Volume v({4, 4, 1}, {1, 1, 1});
    vol::save_volume(v, dir / "flat.nii");
    {
        std::fstream f(dir / "flat.nii", std::ios::in | std::ios::out | std::ios::binary);
        std::int16_t two = 2;
        f.seekp(40);
        f.write(reinterpret_cast<const char*>(&two), 2);
    }
    CHECK_THROWS_WITH_AS(vol::load_volume(dir / "flat.nii"), doctest::Contains("non-3D payload"), Error);
}

TEST_CASE("save_volume to an unwritable location fails") {
    Volume v({2, 2, 2}, {1, 1, 1});
    CHECK_THROWS_AS(vol::save_volume(v, "/proc/tsyn_forbidden/x.nii"), Error);
}

TEST_CASE("reorient: identity, involution, flip oracle") {
    Volume v = labeled_volume({3, 3, 3});

    Volume same = vol::reorient(v, "RAS");
    CHECK(same.data == v.data);

    for (const char* code : {"LPS", "PSR", "IRA", "SAR"}) {
        Volume fwd = vol::reorient(v, code);
        Volume back = vol::reorient(fwd, "RAS");
        CHECK(back.data == v.data);
        CHECK(back.spacing == v.spacing);
        for (int a = 0; a < 3; ++a) CHECK(back.origin[a] == doctest::Approx(v.origin[a]));
    }

    // flipping exactly one axis reverses that axis's index order
    Volume flipped = vol::reorient(v, "LAS");
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) CHECK(flipped.at(i, j, k) == v.at(2 - i, j, k));

    CHECK_THROWS_AS(vol::reorient(v, "RAX"), Error);
    CHECK_THROWS_AS(vol::reorient(v, "RRS"), Error);
}

TEST_CASE("reorient survives a save/load round trip") {
    auto dir = testutil::tmp_dir("reorient_io");
    Volume v = labeled_volume({3, 4, 5});
    v.origin = {1, 2, 3};
    Volume lps = vol::reorient(v, "LPS");
    vol::save_volume(lps, dir / "lps.nii.gz");
    Volume r = vol::load_volume(dir / "lps.nii.gz");
    CHECK(r.axcodes == std::array<char, 3>{'L', 'P', 'S'});
    Volume back = vol::reorient(r, "RAS");
    CHECK(back.data == v.data);
}

TEST_CASE("resample_isotropic: shape rule, constants, ramp oracle") {
    Volume v({10, 10, 10}, {2, 2, 2});
    for (auto& x : v.data) x = 7.5f;
    Volume r = vol::resample_isotropic(v, 1.0, vol::Interp::Linear);
    CHECK(r.shape == Index3{20, 20, 20});
    for (auto x : r.data) CHECK(x == doctest::Approx(7.5));

    // linear ramp along axis 0: value = i * spacing slope halves per voxel at half spacing
    Volume ramp({8, 4, 4}, {2, 1, 1});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) ramp.at(i, j, k) = static_cast<float>(3.0 * i);
    Volume rr = vol::resample_isotropic(ramp, 1.0, vol::Interp::Linear);
    CHECK(rr.shape[0] == 16);
    // closed-form linear interpolation: out(i) = 3 * i/2, clamped at the far edge
    for (int i = 0; i + 1 < 16; ++i) CHECK(rr.at(i, 0, 0) == doctest::Approx(1.5 * i));

    CHECK_THROWS_AS(vol::resample_isotropic(v, -1.0, vol::Interp::Linear), Error);
}

TEST_CASE("mask resampling stays binary") {
    Rng rng(3);
    VoxelMask m({9, 9, 9}, {1.7, 1.7, 1.7});
    for (auto& x : m.data) x = rng.uniform() < 0.3 ? 1 : 0;
    VoxelMask r = vol::resample_mask_isotropic(m, 1.0);
    CHECK(r.shape == Index3{15, 15, 15});
    for (auto x : r.data) CHECK((x == 0 || x == 1));
}

TEST_CASE("window_normalize: bounds, midpoint, monotone, idempotent on matched spec") {
    WindowSpec w{-175.0, 250.0, -1.0, 1.0};
    Volume v({3, 1, 1}, {1, 1, 1});
    v.data = {-175.0f, 250.0f, 37.5f};
    Volume n = vol::window_normalize(v, w);
    CHECK(n.data[0] == doctest::Approx(-1.0));
    CHECK(n.data[1] == doctest::Approx(1.0));
    CHECK(n.data[2] == doctest::Approx(0.0));

    // clipping below/above
    Volume c({2, 1, 1}, {1, 1, 1});
    c.data = {-1000.0f, 1000.0f};
    Volume nc = vol::window_normalize(c, w);
    CHECK(nc.data[0] == doctest::Approx(-1.0));
    CHECK(nc.data[1] == doctest::Approx(1.0));

    // monotone non-decreasing on random pairs
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const float a = static_cast<float>(rng.uniform(-400, 400));
        const float b = static_cast<float>(rng.uniform(-400, 400));
        Volume pair({2, 1, 1}, {1, 1, 1});
        pair.data = {a, b};
        Volume np = vol::window_normalize(pair, w);
        if (a <= b) CHECK(np.data[0] <= np.data[1]);
    }

    // idempotent once the window matches the output interval
    WindowSpec unit{-1.0, 1.0, -1.0, 1.0};
    Volume once = vol::window_normalize(n, unit);
    Volume twice = vol::window_normalize(once, unit);
    CHECK(once.data == twice.data);

    CHECK_THROWS_AS(vol::window_normalize(v, WindowSpec{5.0, -5.0, 0.0, 1.0}), Error);
}

TEST_CASE("crop_patch: identity, padding, foreground bias") {
    Volume v = labeled_volume({6, 6, 6});
    Volume full = vol::crop_patch(v, {3, 3, 3}, {6, 6, 6});
    CHECK(full.data == v.data);

    // corner crop half outside: outside voxels are the pad value
    Volume corner = vol::crop_patch(v, {0, 0, 0}, {4, 4, 4}, -9.0f);
    int pad = 0, inside = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) {
                const bool was_out = i < 2 || j < 2 || k < 2;
                if (was_out) {
                    CHECK(corner.at(i, j, k) == -9.0f);
                    ++pad;
                } else {
                    CHECK(corner.at(i, j, k) == v.at(i - 2, j - 2, k - 2));
                    ++inside;
                }
            }
    CHECK(pad == 64 - 8);
    CHECK(inside == 8);

    // foreground-biased sampling with ratio 1 always lands on the mask
    VoxelMask m({6, 6, 6}, {1, 1, 1});
    m.at(1, 2, 3) = 1;
    m.at(4, 4, 4) = 1;
    Rng rng(5);
    for (int t = 0; t < 1000; ++t) {
        const auto c = vol::sample_patch_center(v.shape, &m, 1.0, rng);
        CHECK(m.at(c[0], c[1], c[2]) == 1);
    }
}

TEST_CASE("make_phantom: determinism, containment, connectivity") {
    vol::PhantomSpec spec;
    spec.grid_shape = {48, 48, 48};
    spec.organ_radius_range_mm = {12.0, 15.0};
    spec.with_lesion = true;
    spec.lesion_radius_range_mm = {3.0, 5.0};
    spec.seed = 77;

    auto a = vol::make_phantom(spec);
    auto b = vol::make_phantom(spec);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.organ.data == b.organ.data);
    CHECK(a.lesion.data == b.lesion.data);

    CHECK(a.lesion.count() > 0);
    for (std::int64_t i = 0; i < a.lesion.voxels(); ++i)
        if (a.lesion.data[i]) CHECK(a.organ.data[i] == 1);

    std::vector<int> labels;
    CHECK(vol::label_components(a.organ, labels) == 1);

    spec.seed = 78;
    auto c = vol::make_phantom(spec);
    CHECK(c.volume.data != a.volume.data);
}

TEST_CASE("make_phantom: zero lesion contrast is statistically invisible") {
    vol::PhantomSpec spec;
    spec.grid_shape = {48, 48, 48};
    spec.organ_radius_range_mm = {13.0, 15.0};
    spec.with_lesion = true;
    spec.lesion_contrast_hu = 0.0;
    spec.lesion_radius_range_mm = {4.0, 6.0};
    spec.background_noise_sigma_hu = 15.0;
    spec.seed = 5;
    auto ph = vol::make_phantom(spec);

    // compare deep-lesion vs deep-organ voxels (away from smoothed edges)
    std::vector<std::uint8_t> not_organ(ph.organ.data.size());
    for (size_t i = 0; i < not_organ.size(); ++i) not_organ[i] = ph.organ.data[i] ? 0 : 1;
    const auto organ_depth = vol::edt_sq_mm(ph.organ.shape, ph.organ.spacing, not_organ);
    std::vector<std::uint8_t> not_lesion(ph.lesion.data.size());
    for (size_t i = 0; i < not_lesion.size(); ++i) not_lesion[i] = ph.lesion.data[i] ? 0 : 1;
    const auto lesion_depth = vol::edt_sq_mm(ph.lesion.shape, ph.lesion.spacing, not_lesion);

    double lesion_mean = 0, organ_mean = 0;
    std::int64_t ln = 0, on = 0;
    for (std::int64_t i = 0; i < ph.volume.voxels(); ++i) {
        if (ph.lesion.data[i] && lesion_depth[i] >= 4.0) {
            lesion_mean += ph.volume.data[i];
            ++ln;
        } else if (ph.organ.data[i] && !ph.lesion.data[i] && organ_depth[i] >= 9.0) {
            organ_mean += ph.volume.data[i];
            ++on;
        }
    }
    REQUIRE(ln > 10);
    REQUIRE(on > 100);
    CHECK(std::abs(lesion_mean / ln - organ_mean / on) < spec.background_noise_sigma_hu / 10.0);
}

TEST_CASE("make_phantom: organ that cannot fit is an error") {
    vol::PhantomSpec spec;
    spec.grid_shape = {20, 20, 20};
    spec.organ_radius_range_mm = {18.0, 24.0};
    CHECK_THROWS_WITH_AS(vol::make_phantom(spec), doctest::Contains("organ cannot fit"), Error);
}

TEST_CASE("exact EDT matches brute force on random masks") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Index3 shape = {6, 7, 5};
        const vol::Vec3 sp = {1.0, 1.5, 2.0};
        std::vector<std::uint8_t> inside(static_cast<size_t>(shape[0]) * shape[1] * shape[2]);
        bool any = false;
        for (auto& x : inside) {
            x = rng.uniform() < 0.2 ? 1 : 0;
            any = any || x;
        }
        if (!any) inside[0] = 1;
        const auto d = vol::edt_sq_mm(shape, sp, inside);
        for (int i = 0; i < shape[0]; ++i)
            for (int j = 0; j < shape[1]; ++j)
                for (int k = 0; k < shape[2]; ++k) {
                    double best = 1e300;
                    for (int a = 0; a < shape[0]; ++a)
                        for (int b = 0; b < shape[1]; ++b)
                            for (int c = 0; c < shape[2]; ++c) {
                                if (!inside[vol::flat(shape, a, b, c)]) continue;
                                const double dx = (i - a) * sp[0], dy = (j - b) * sp[1], dz = (k - c) * sp[2];
                                best = std::min(best, dx * dx + dy * dy + dz * dz);
                            }
                    CHECK(d[vol::flat(shape, i, j, k)] == doctest::Approx(best).epsilon(1e-12));
                }
    }
}
