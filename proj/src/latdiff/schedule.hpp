#pragma once

#include <vector>

#include "ad/tensor.hpp"
#include "common/rng.hpp"
#include "volcore/volume.hpp"

namespace tsyn::ldm {

using ad::Tensor;

// Variance schedule of the forward Markov chain plus derived cumulative
// products. alpha_bar[t-1] corresponds to timestep t in 1..T.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta_t, index t-1
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s

    double abar(int t) const;  // t in 0..T; abar(0) = 1
    void validate() const;
};

enum class ScheduleKind { Linear };

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max);

// z_t = sqrt(1-beta_t) z_{t-1} + sqrt(beta_t) noise  (single chain step)
Tensor forward_step(const Tensor& z_prev, int t, const NoiseSchedule& s, const Tensor& noise);

// closed-form marginal: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Tensor q_sample(const Tensor& z0, int t, const NoiseSchedule& s, const Tensor& eps);

// Evenly respaced subset of 1..T with `count` entries, endpoint preserved.
std::vector<int> respace_steps(int T, int count);

// Max-pooling by the compression factor: any set voxel marks its cell.
vol::VoxelMask downsample_mask(const vol::VoxelMask& m, int factor);

Tensor gaussian_like(const Tensor& ref, Rng& rng);

}  // namespace tsyn::ldm
