#pragma once

#include "volcore/volume.hpp"

namespace tsyn::seg {

using vol::VoxelMask;

// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double dsc(const VoxelMask& pred, const VoxelMask& gt);

// Fraction of boundary voxels within tau (mm) of the other mask's boundary,
// both directions averaged; 1.0 when both empty, 0.0 when exactly one is.
double nsd(const VoxelMask& pred, const VoxelMask& gt, double tau_mm);

// Ground-truth 6-connected components counted as detected when the predicted
// mask covers at least min_overlap_fraction of the component.
struct SensitivityResult {
    double sensitivity = 1.0;
    int n_gt_tumors = 0;
    int n_detected = 0;
};
SensitivityResult tumor_sensitivity(const VoxelMask& pred, const VoxelMask& gt, double min_overlap_fraction);

// Drops predicted components that have zero overlap with the organ mask.
VoxelMask organ_filter(const VoxelMask& pred, const VoxelMask& organ);

}  // namespace tsyn::seg
