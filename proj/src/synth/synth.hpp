#pragma once

#include <optional>

#include "autoenc/autoenc.hpp"
#include "latdiff/diffusion.hpp"
#include "maskgen/maskgen.hpp"

namespace tsyn::syn {

using vol::Volume;
using vol::VoxelMask;

struct SynthesisConfig {
    int sampling_steps = 4;            // size of the respaced subset
    mg::MaskPolicy policy = mg::MaskPolicy::early_default();
    double composite_dilation_mm = 2.0;
    double augment_probability = 1.0;
    vol::Index3 patch_size{32, 32, 32};  // synthesis patch around the placement site

    static SynthesisConfig from_json(const json& j);
    json to_json() const;
    void validate() const;
};

// original outside the dilated mask (bit-exact), decoded inside, linear
// cross-fade over the dilation band.
Volume composite(const Volume& original, const Volume& decoded, const VoxelMask& mask, double dilation_mm);

struct SynthesisResult {
    Volume volume;
    VoxelMask tumor;
    mg::TumorSpec spec;
    int denoiser_calls = 0;
};

// mask generation -> encode -> conditional sampling -> decode -> composite.
// `volume` must be preprocessed (windowed to [-1,1], isotropic).
SynthesisResult synthesize(const Volume& volume, const VoxelMask& organ, const ae::Autoencoder& ae_model,
                           const ldm::DenoiserUNet& denoiser, const ldm::NoiseSchedule& schedule,
                           const SynthesisConfig& cfg, Rng& rng);

// With probability cfg.augment_probability applies synthesize; otherwise
// returns the input with an empty label.
std::pair<Volume, VoxelMask> augment_sample(const Volume& healthy, const VoxelMask& organ,
                                            const ae::Autoencoder& ae_model, const ldm::DenoiserUNet& denoiser,
                                            const ldm::NoiseSchedule& schedule, const SynthesisConfig& cfg,
                                            Rng& rng);

}  // namespace tsyn::syn
