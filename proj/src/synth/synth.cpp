#include "synth/synth.hpp"

#include <cmath>

#include "common/error.hpp"
#include "latdiff/schedule.hpp"
#include "volcore/morph.hpp"

namespace tsyn::syn {

SynthesisConfig SynthesisConfig::from_json(const json& j) {
    SynthesisConfig c;
    JsonReader r(j, "synthesis config");
    c.sampling_steps = r.get("sampling_steps", c.sampling_steps);
    if (r.has("policy")) c.policy = mg::MaskPolicy::from_json(r.child("policy"));
    c.composite_dilation_mm = r.get("composite_dilation_mm", c.composite_dilation_mm);
    c.augment_probability = r.get("augment_probability", c.augment_probability);
    if (r.has("patch_size")) {
        const auto p = r.require<std::array<int, 3>>("patch_size");
        c.patch_size = {p[0], p[1], p[2]};
    }
    r.finish();
    c.validate();
    return c;
}

json SynthesisConfig::to_json() const {
    return json{{"sampling_steps", sampling_steps},
                {"policy", policy.to_json()},
                {"composite_dilation_mm", composite_dilation_mm},
                {"augment_probability", augment_probability},
                {"patch_size", patch_size}};
}

void SynthesisConfig::validate() const {
    require(sampling_steps >= 1, ErrorKind::Config, "synthesis: sampling_steps must be >= 1");
    require(composite_dilation_mm >= 0, ErrorKind::Config, "synthesis: dilation must be >= 0");
    require(augment_probability >= 0 && augment_probability <= 1, ErrorKind::Config,
            "synthesis: augment_probability must be in [0,1]");
    policy.validate();
}

Volume composite(const Volume& original, const Volume& decoded, const VoxelMask& mask, double dilation_mm) {
    require(original.shape == decoded.shape && original.shape == mask.shape, ErrorKind::Runtime,
            "composite: grid mismatch");
    if (mask.empty_mask()) return original;

    Volume out = original;
    const auto dist_sq = vol::edt_sq_mm(mask.shape, mask.spacing, mask.data);
    for (std::int64_t i = 0; i < original.voxels(); ++i) {
        double w;
        if (mask.data[i]) {
            w = 1.0;
        } else if (dilation_mm > 0) {
            const double d = std::sqrt(dist_sq[i]);
            w = d >= dilation_mm ? 0.0 : 1.0 - d / dilation_mm;
        } else {
            w = 0.0;
        }
        if (w > 0.0) {
            out.data[i] = w >= 1.0 ? decoded.data[i]
                                   : static_cast<float>(w * decoded.data[i] + (1.0 - w) * original.data[i]);
        }
        // w == 0: the original voxel is kept bit-exactly
    }
    return out;
}

SynthesisResult synthesize(const Volume& volume, const VoxelMask& organ, const ae::Autoencoder& ae_model,
                           const ldm::DenoiserUNet& denoiser, const ldm::NoiseSchedule& schedule,
                           const SynthesisConfig& cfg, Rng& rng) {
    require(volume.shape == organ.shape, ErrorKind::Runtime, "synthesize: organ grid mismatch");
    require(!organ.empty_mask(), ErrorKind::Runtime, "synthesize: organ mask is empty");
    cfg.validate();

    SynthesisResult result;
    auto generated = mg::generate_tumor_mask(organ, cfg.policy, rng);
    result.spec = generated.spec;
    result.tumor = generated.mask;

    if (result.tumor.empty_mask()) {
        result.volume = volume;
        return result;
    }

    // synthesis happens on a patch centered on the tumor
    vol::Index3 centroid{0, 0, 0};
    std::int64_t count = 0;
    for (int i = 0; i < result.tumor.shape[0]; ++i)
        for (int j = 0; j < result.tumor.shape[1]; ++j)
            for (int k = 0; k < result.tumor.shape[2]; ++k)
                if (result.tumor.at(i, j, k)) {
                    centroid[0] += i;
                    centroid[1] += j;
                    centroid[2] += k;
                    ++count;
                }
    for (int a = 0; a < 3; ++a) {
        centroid[a] = static_cast<int>(centroid[a] / count);
        // keep the patch fully inside the grid so the paste-back is exact
        const int half = cfg.patch_size[a] / 2;
        centroid[a] = std::clamp(centroid[a], half, std::max(half, volume.shape[a] - cfg.patch_size[a] + half));
    }

    Volume patch = vol::crop_patch(volume, centroid, cfg.patch_size);
    VoxelMask mask_patch = vol::crop_patch(result.tumor, centroid, cfg.patch_size);

    // the returned label is exactly the mask the sampler is conditioned on
    {
        VoxelMask clipped(result.tumor.shape, result.tumor.spacing);
        vol::Index3 start;
        for (int a = 0; a < 3; ++a) start[a] = centroid[a] - cfg.patch_size[a] / 2;
        for (int i = 0; i < cfg.patch_size[0]; ++i)
            for (int j = 0; j < cfg.patch_size[1]; ++j)
                for (int k = 0; k < cfg.patch_size[2]; ++k) {
                    const int vi = start[0] + i, vj = start[1] + j, vk = start[2] + k;
                    if (vi >= 0 && vi < clipped.shape[0] && vj >= 0 && vj < clipped.shape[1] && vk >= 0 &&
                        vk < clipped.shape[2] && mask_patch.at(i, j, k))
                        clipped.at(vi, vj, vk) = 1;
                }
        result.tumor = std::move(clipped);
    }

    const int factor = ae_model.config().compression;
    ad::Tensor z0;
    {
        ad::NoGradGuard guard;
        z0 = ae_model.encode(ae::volume_to_tensor(patch));
    }
    vol::VoxelMask mask_lat = ldm::downsample_mask(mask_patch, factor);
    ldm::DiffusionCondition cond = ldm::make_condition(z0, mask_lat);

    const auto steps = ldm::respace_steps(schedule.T, cfg.sampling_steps);
    ldm::SampleStats stats;
    ldm::DenoiserFn fn = [&denoiser](const ad::Tensor& z_t, const ldm::DiffusionCondition& c, int t) {
        return denoiser.forward(z_t, c, t);
    };
    ad::Tensor z_sampled = ldm::ddpm_sample(fn, cond, schedule, steps, rng, &stats);
    result.denoiser_calls = stats.denoiser_calls;

    Volume decoded_patch;
    {
        ad::NoGradGuard guard;
        ae::LatentGrid grid = ae_model.quantize(z_sampled);
        ad::Tensor decoded = ae_model.decode(grid.embedded);
        decoded_patch = ae::tensor_to_volume(decoded, patch.spacing);
    }

    Volume patch_composited = composite(patch, decoded_patch, mask_patch, cfg.composite_dilation_mm);

    // paste the composited patch back; voxels outside it stay bit-identical
    result.volume = volume;
    vol::Index3 start;
    for (int a = 0; a < 3; ++a) start[a] = centroid[a] - cfg.patch_size[a] / 2;
    for (int i = 0; i < cfg.patch_size[0]; ++i)
        for (int j = 0; j < cfg.patch_size[1]; ++j)
            for (int k = 0; k < cfg.patch_size[2]; ++k) {
                const int vi = start[0] + i, vj = start[1] + j, vk = start[2] + k;
                if (vi >= 0 && vi < volume.shape[0] && vj >= 0 && vj < volume.shape[1] && vk >= 0 &&
                    vk < volume.shape[2])
                    result.volume.at(vi, vj, vk) = patch_composited.at(i, j, k);
            }
    return result;
}

std::pair<Volume, VoxelMask> augment_sample(const Volume& healthy, const VoxelMask& organ,
                                            const ae::Autoencoder& ae_model, const ldm::DenoiserUNet& denoiser,
                                            const ldm::NoiseSchedule& schedule, const SynthesisConfig& cfg,
                                            Rng& rng) {
    if (rng.uniform() >= cfg.augment_probability)
        return {healthy, VoxelMask(healthy.shape, healthy.spacing)};
    SynthesisResult r = synthesize(healthy, organ, ae_model, denoiser, schedule, cfg, rng);
    return {std::move(r.volume), std::move(r.tumor)};
}

}  // namespace tsyn::syn
