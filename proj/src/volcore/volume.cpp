#include "volcore/volume.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace tsyn::vol {

std::int64_t VoxelMask::count() const {
    std::int64_t n = 0;
    for (auto v : data) n += v ? 1 : 0;
    return n;
}

void WindowSpec::validate() const {
    require(lo < hi, ErrorKind::Config, "window: lo must be < hi");
    require(out_lo < out_hi, ErrorKind::Config, "window: out_lo must be < out_hi");
}

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        require(grid_shape[a] >= 1, ErrorKind::Config, "phantom: grid_shape components must be >= 1");
        require(spacing_mm[a] > 0, ErrorKind::Config, "phantom: spacing must be > 0");
    }
    require(organ_radius_range_mm[0] > 0 && organ_radius_range_mm[1] >= organ_radius_range_mm[0],
            ErrorKind::Config, "phantom: bad organ radius range");
    require(background_noise_sigma_hu >= 0, ErrorKind::Config, "phantom: noise sigma must be >= 0");
    require(lesion_radius_range_mm[0] > 0 && lesion_radius_range_mm[1] >= lesion_radius_range_mm[0],
            ErrorKind::Config, "phantom: bad lesion radius range");
}

Volume window_normalize(const Volume& v, const WindowSpec& spec) {
    spec.validate();
    Volume out = v;
    const double scale = (spec.out_hi - spec.out_lo) / (spec.hi - spec.lo);
    for (auto& x : out.data) {
        const double c = std::clamp(static_cast<double>(x), spec.lo, spec.hi);
        x = static_cast<float>(spec.out_lo + (c - spec.lo) * scale);
    }
    return out;
}

namespace {

Index3 resampled_shape(const Index3& shape, const Vec3& spacing, double target) {
    Index3 out;
    for (int a = 0; a < 3; ++a) {
        // round-half-up of the physical extent ratio
        out[a] = std::max(1, static_cast<int>(std::floor(shape[a] * spacing[a] / target + 0.5)));
    }
    return out;
}

}  // namespace

Volume resample_isotropic(const Volume& v, double target, Interp interp) {
    require(target > 0, ErrorKind::Config, "resample: target spacing must be > 0");
    require(v.voxels() > 0, ErrorKind::Runtime, "resample: degenerate input");

    Volume out;
    out.shape = resampled_shape(v.shape, v.spacing, target);
    out.spacing = {target, target, target};
    out.axcodes = v.axcodes;
    out.origin = v.origin;
    out.data.resize(static_cast<size_t>(out.voxels()));

    const int I = v.shape[0], J = v.shape[1], K = v.shape[2];
    for (int a = 0; a < out.shape[0]; ++a)
        for (int b = 0; b < out.shape[1]; ++b)
            for (int c = 0; c < out.shape[2]; ++c) {
                const double x = a * target / v.spacing[0];
                const double y = b * target / v.spacing[1];
                const double z = c * target / v.spacing[2];
                float val;
                if (interp == Interp::Nearest) {
                    const int i = std::clamp(static_cast<int>(std::llround(x)), 0, I - 1);
                    const int j = std::clamp(static_cast<int>(std::llround(y)), 0, J - 1);
                    const int k = std::clamp(static_cast<int>(std::llround(z)), 0, K - 1);
                    val = v.at(i, j, k);
                } else {
                    const int i0 = std::clamp(static_cast<int>(std::floor(x)), 0, I - 1);
                    const int j0 = std::clamp(static_cast<int>(std::floor(y)), 0, J - 1);
                    const int k0 = std::clamp(static_cast<int>(std::floor(z)), 0, K - 1);
                    const int i1 = std::min(i0 + 1, I - 1);
                    const int j1 = std::min(j0 + 1, J - 1);
                    const int k1 = std::min(k0 + 1, K - 1);
                    const double fx = std::clamp(x - i0, 0.0, 1.0);
                    const double fy = std::clamp(y - j0, 0.0, 1.0);
                    const double fz = std::clamp(z - k0, 0.0, 1.0);
                    const double c00 = v.at(i0, j0, k0) * (1 - fx) + v.at(i1, j0, k0) * fx;
                    const double c10 = v.at(i0, j1, k0) * (1 - fx) + v.at(i1, j1, k0) * fx;
                    const double c01 = v.at(i0, j0, k1) * (1 - fx) + v.at(i1, j0, k1) * fx;
                    const double c11 = v.at(i0, j1, k1) * (1 - fx) + v.at(i1, j1, k1) * fx;
                    const double c0 = c00 * (1 - fy) + c10 * fy;
                    const double c1 = c01 * (1 - fy) + c11 * fy;
                    val = static_cast<float>(c0 * (1 - fz) + c1 * fz);
                }
                out.at(a, b, c) = val;
            }
    return out;
}

VoxelMask resample_mask_isotropic(const VoxelMask& m, double target) {
    Volume tmp;
    tmp.shape = m.shape;
    tmp.spacing = m.spacing;
    tmp.data.assign(m.data.begin(), m.data.end());
    Volume r = resample_isotropic(tmp, target, Interp::Nearest);
    VoxelMask out(r.shape, r.spacing);
    for (size_t i = 0; i < r.data.size(); ++i) out.data[i] = r.data[i] != 0.0f ? 1 : 0;
    return out;
}

namespace {

template <typename Grid, typename T>
Grid crop_grid(const Grid& g, Index3 center, Index3 size, T pad_value) {
    for (int a = 0; a < 3; ++a) require(size[a] >= 1, ErrorKind::Config, "crop: size components must be >= 1");
    Grid out(size, g.spacing);
    Index3 start;
    for (int a = 0; a < 3; ++a) start[a] = center[a] - size[a] / 2;
    for (int a = 0; a < size[0]; ++a)
        for (int b = 0; b < size[1]; ++b)
            for (int c = 0; c < size[2]; ++c) {
                const int i = start[0] + a, j = start[1] + b, k = start[2] + c;
                const bool in = i >= 0 && i < g.shape[0] && j >= 0 && j < g.shape[1] && k >= 0 && k < g.shape[2];
                out.at(a, b, c) = in ? g.at(i, j, k) : pad_value;
            }
    return out;
}

}  // namespace

namespace {

int world_axis_of(char code) { return (code == 'R' || code == 'L') ? 0 : (code == 'A' || code == 'P') ? 1 : 2; }
int world_sign_of(char code) { return (code == 'R' || code == 'A' || code == 'S') ? 1 : -1; }

}  // namespace

Volume crop_patch(const Volume& v, Index3 center, Index3 size, float pad_value) {
    Volume out = crop_grid<Volume, float>(v, center, size, pad_value);
    out.axcodes = v.axcodes;
    out.origin = v.origin;
    for (int a = 0; a < 3; ++a) {
        const int start = center[a] - size[a] / 2;
        out.origin[world_axis_of(v.axcodes[a])] += world_sign_of(v.axcodes[a]) * v.spacing[a] * start;
    }
    return out;
}

VoxelMask crop_patch(const VoxelMask& m, Index3 center, Index3 size) {
    return crop_grid<VoxelMask, std::uint8_t>(m, center, size, 0);
}

Index3 sample_patch_center(const Index3& shape, const VoxelMask* fg_mask, double fg_ratio, Rng& rng) {
    const bool use_fg = fg_mask != nullptr && fg_ratio > 0 && rng.uniform() < fg_ratio;
    if (use_fg && !fg_mask->empty_mask()) {
        std::vector<std::int64_t> fg;
        for (std::int64_t i = 0; i < fg_mask->voxels(); ++i)
            if (fg_mask->data[i]) fg.push_back(i);
        const std::int64_t pick = fg[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(fg.size()) - 1))];
        const int K = shape[2], J = shape[1];
        return {static_cast<int>(pick / (static_cast<std::int64_t>(J) * K)),
                static_cast<int>((pick / K) % J), static_cast<int>(pick % K)};
    }
    return {rng.uniform_int(0, shape[0] - 1), rng.uniform_int(0, shape[1] - 1), rng.uniform_int(0, shape[2] - 1)};
}

}  // namespace tsyn::vol
