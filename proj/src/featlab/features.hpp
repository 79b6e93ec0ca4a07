#pragma once

#include <array>
#include <string>
#include <vector>

#include "volcore/volume.hpp"

namespace tsyn::feat {

// Fixed 12-feature battery: four 3D shape features from the mask geometry,
// four first-order intensity statistics and four GLCM texture features
// (symmetric co-occurrence, the 13 unit offsets averaged, 32 gray levels
// over the in-mask intensity range).
struct FeatureVector {
    static constexpr int dim = 12;
    std::array<double, dim> values{};

    static const std::array<std::string, dim>& names();
    double operator[](int i) const { return values[static_cast<size_t>(i)]; }
};

FeatureVector extract_features(const vol::Volume& volume, const vol::VoxelMask& tumor);

}  // namespace tsyn::feat
