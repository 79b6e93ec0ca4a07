#pragma once

#include <functional>
#include <optional>

#include "latdiff/denoiser.hpp"
#include "latdiff/schedule.hpp"

namespace tsyn::ldm {

// Conditioning pair: the healthy region of the latent, zeroed inside the
// mask, plus the latent-resolution mask itself.
struct DiffusionCondition {
    Tensor healthy;  // [1,c,h,w,d], exactly zero wherever mask = 1
    Tensor mask;     // [1,1,h,w,d], binary

    void validate() const;
};

DiffusionCondition make_condition(const Tensor& z0, const vol::VoxelMask& latent_mask);
Tensor latent_mask_to_tensor(const vol::VoxelMask& latent_mask);

using DenoiserFn = std::function<Tensor(const Tensor& z_t, const DiffusionCondition&, int t)>;

// Draws t ~ U{1..T} and eps ~ N(0,1), returns the per-element mean squared
// error between eps and the prediction; differentiable through the denoiser.
Tensor diffusion_loss(const DenoiserFn& denoiser, const Tensor& z0, const DiffusionCondition& cond,
                      const NoiseSchedule& schedule, Rng& rng);

// Average of diffusion_loss over n_draws fixed draws (evaluation helper).
double diffusion_loss_eval(const DenoiserFn& denoiser, const Tensor& z0, const DiffusionCondition& cond,
                           const NoiseSchedule& schedule, std::uint64_t seed, int n_draws);

struct SampleStats {
    int denoiser_calls = 0;
};

// Respaced DDPM ancestral sampling with healthy-region re-imposition after
// every step; `steps` is an increasing subset of 1..T.
Tensor ddpm_sample(const DenoiserFn& denoiser, const DiffusionCondition& cond, const NoiseSchedule& schedule,
                   const std::vector<int>& steps, Rng& rng, SampleStats* stats = nullptr);

struct DiffusionTrainConfig {
    DenoiserConfig net;
    int T = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int batch_size = 10;
    int steps = 2000;
    int checkpoint_every = 0;
    std::uint64_t seed = 0;

    static DiffusionTrainConfig from_json(const json& j);
    json to_json() const;
    NoiseSchedule schedule() const { return make_schedule(ScheduleKind::Linear, T, beta_min, beta_max); }
};

struct LatentSample {
    Tensor z0;            // [1,c,h,w,d]
    vol::VoxelMask mask;  // latent resolution
};

struct DiffusionTrainResult {
    std::vector<double> history;
};

DiffusionTrainResult train_diffusion(DenoiserUNet& model, const std::vector<LatentSample>& dataset,
                                     const DiffusionTrainConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace tsyn::ldm
