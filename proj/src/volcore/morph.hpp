#pragma once

#include <vector>

#include "volcore/volume.hpp"

namespace tsyn::vol {

// 6-connectivity component labelling; returns label grid (0 = background)
// and the number of components. Labels are assigned in raster-scan order.
int label_components(const VoxelMask& m, std::vector<int>& labels);

// Keeps only the largest 6-connected component (ties: lowest label).
VoxelMask largest_component(const VoxelMask& m);

// Mask voxels with at least one 6-neighbour outside the mask (out-of-grid
// counts as outside).
std::vector<Index3> boundary_voxels(const VoxelMask& m);

// Max pairwise distance between boundary voxel centers, in mm.
double mask_diameter_mm(const VoxelMask& m);

// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher),
// anisotropic: distances in mm^2 to the nearest `inside` voxel.
// `inside` has one entry per voxel; result is 0 on inside voxels.
std::vector<double> edt_sq_mm(const Index3& shape, const Vec3& spacing_mm, const std::vector<std::uint8_t>& inside);

// Separable Gaussian smoothing of a scalar field, sigma given per axis in
// voxel units; kernel truncated at 3 sigma.
void gaussian_smooth_inplace(std::vector<float>& field, const Index3& shape, const Vec3& sigma_vox);
void gaussian_smooth_inplace(std::vector<double>& field, const Index3& shape, const Vec3& sigma_vox);

}  // namespace tsyn::vol
