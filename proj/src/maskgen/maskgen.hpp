#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "common/jsonio.hpp"
#include "common/rng.hpp"
#include "volcore/volume.hpp"

namespace tsyn::mg {

using vol::Index3;
using vol::Vec3;
using vol::VoxelMask;

enum class SizeClass { Early, Medium, Large };

std::string to_string(SizeClass c);
SizeClass size_class_from_string(const std::string& s);

struct TumorSpec {
    SizeClass size_class = SizeClass::Early;
    double diameter_mm = 10.0;          // 2 * max semi-axis
    Vec3 semi_axes_mm{5.0, 5.0, 5.0};
    Vec3 euler_rad{0.0, 0.0, 0.0};
    double deform_sigma_mm = 3.0;
    double deform_magnitude_mm = 2.0;
    std::uint64_t seed = 0;

    json to_json() const;
};

struct ClassPolicy {
    double diameter_lo_mm = 6.0;
    double diameter_hi_mm = 16.0;
    double weight = 1.0;
    double containment = 1.0;  // required fraction of tumor voxels inside the organ
};

// Sampling policy for procedural tumor masks. Early-stage tumors stay under
// the 2 cm diameter threshold by construction.
struct MaskPolicy {
    std::vector<std::pair<SizeClass, ClassPolicy>> classes;
    double aspect_ratio_max = 1.5;
    double deform_sigma_mm = 3.0;
    double deform_magnitude_mm = 2.0;

    static MaskPolicy early_default();
    static MaskPolicy from_json(const json& j);
    json to_json() const;
    void validate() const;
    const ClassPolicy& for_class(SizeClass c) const;
};

TumorSpec sample_tumor_spec(const MaskPolicy& policy, Rng& rng);

// Voxel set where the rotated ellipsoid equation holds at voxel centers (mm).
VoxelMask rasterize_ellipsoid(const TumorSpec& spec, Index3 grid_shape, Index3 center, Vec3 spacing_mm);

// Smoothed-random displacement warp; preserves a single 6-connected
// component (bounded retries, else returns the input unchanged).
VoxelMask elastic_deform(const VoxelMask& mask, const TumorSpec& spec, Rng& rng);

// Translates the tumor so that at least `containment` of its voxels lie in
// the organ; throws after bounded retries.
VoxelMask place_in_organ(const VoxelMask& tumor, const VoxelMask& organ, Rng& rng, double containment);

struct GeneratedMask {
    VoxelMask mask;
    TumorSpec spec;
};

GeneratedMask generate_tumor_mask(const VoxelMask& organ, const MaskPolicy& policy, Rng& rng);

}  // namespace tsyn::mg
