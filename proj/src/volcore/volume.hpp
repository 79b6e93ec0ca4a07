#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "common/rng.hpp"

namespace tsyn::vol {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

inline std::int64_t flat(const Index3& shape, int i, int j, int k) {
    return (static_cast<std::int64_t>(i) * shape[1] + j) * shape[2] + k;
}

// 3D scalar grid with physical spacing (mm), anatomical orientation and
// world origin. Index axis a increases toward the anatomical direction
// axcodes[a] in RAS+ world coordinates.
struct Volume {
    Index3 shape{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    std::array<char, 3> axcodes{'R', 'A', 'S'};
    Vec3 origin{0.0, 0.0, 0.0};
    std::vector<float> data;

    Volume() = default;
    Volume(Index3 sh, Vec3 sp) : shape(sh), spacing(sp), data(static_cast<size_t>(sh[0]) * sh[1] * sh[2], 0.0f) {}

    float& at(int i, int j, int k) { return data[flat(shape, i, j, k)]; }
    float at(int i, int j, int k) const { return data[flat(shape, i, j, k)]; }
    std::int64_t voxels() const { return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2]; }
};

// Binary grid on the same lattice as its paired Volume.
struct VoxelMask {
    Index3 shape{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> data;

    VoxelMask() = default;
    VoxelMask(Index3 sh, Vec3 sp) : shape(sh), spacing(sp), data(static_cast<size_t>(sh[0]) * sh[1] * sh[2], 0) {}

    std::uint8_t& at(int i, int j, int k) { return data[flat(shape, i, j, k)]; }
    std::uint8_t at(int i, int j, int k) const { return data[flat(shape, i, j, k)]; }
    std::int64_t voxels() const { return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2]; }
    std::int64_t count() const;
    bool empty_mask() const { return count() == 0; }
};

struct WindowSpec {
    double lo = -175.0, hi = 250.0;
    double out_lo = -1.0, out_hi = 1.0;
    void validate() const;
};

// Desk-scale stand-in for a CT scan: noisy background, one smooth organ
// blob, optionally one hypo-/hyper-attenuating lesion inside the organ.
struct PhantomSpec {
    Index3 grid_shape{64, 64, 64};
    Vec3 spacing_mm{1.0, 1.0, 1.0};
    std::array<double, 2> organ_radius_range_mm{18.0, 24.0};
    double background_mean_hu = -60.0;
    double background_noise_sigma_hu = 15.0;
    double organ_mean_hu = 100.0;
    double lesion_contrast_hu = -60.0;
    bool with_lesion = false;
    std::array<double, 2> lesion_radius_range_mm{3.0, 8.0};
    std::uint64_t seed = 0;
    void validate() const;
};

struct PhantomResult {
    Volume volume;      // HU, not windowed
    VoxelMask organ;
    VoxelMask lesion;   // all-zero when no lesion was requested
};

// ---- file I/O (NIfTI-1, optionally gzip-compressed) ----
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
VoxelMask load_mask(const std::filesystem::path& path);
// Masks are written as uint8 with the grid geometry of `like`.
void save_mask(const VoxelMask& m, const Volume& like, const std::filesystem::path& path);
void save_mask(const VoxelMask& m, const std::filesystem::path& path);

// ---- preprocessing ----
bool valid_axcodes(const std::string& axcodes);
Volume reorient(const Volume& v, const std::string& axcodes);

enum class Interp { Linear, Nearest };
Volume resample_isotropic(const Volume& v, double target_spacing_mm, Interp interp);
// Nearest-neighbor by contract, preserves binarity.
VoxelMask resample_mask_isotropic(const VoxelMask& m, double target_spacing_mm);

Volume window_normalize(const Volume& v, const WindowSpec& spec);

Volume crop_patch(const Volume& v, Index3 center, Index3 size, float pad_value = 0.0f);
VoxelMask crop_patch(const VoxelMask& m, Index3 center, Index3 size);

// Draws a patch center; with probability fg_ratio the center is a
// mask-positive voxel (uniform over the mask), otherwise uniform over the grid.
Index3 sample_patch_center(const Index3& shape, const VoxelMask* fg_mask, double fg_ratio, Rng& rng);

// ---- phantom generation ----
PhantomResult make_phantom(const PhantomSpec& spec);

}  // namespace tsyn::vol
