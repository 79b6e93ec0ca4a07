#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "common/jsonio.hpp"
#include "nn/checkpoint.hpp"
#include "nn/modules.hpp"
#include "volcore/volume.hpp"

namespace tsyn::seg {

using ad::Tensor;

struct SegConfig {
    vol::Index3 patch_size{32, 32, 32};
    int base_width = 4;
    int steps = 400;             // gradient steps (patch-based)
    int batch_size = 2;
    double base_lr = 2e-4;
    int warmup_steps = 50;       // linear warmup, then cosine annealing
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double foreground_crop_ratio = 0.5;
    double rot90_probability = 0.1;
    double intensity_shift_offset = 0.1;
    double intensity_shift_probability = 0.2;
    double sliding_overlap = 0.75;
    std::uint64_t seed = 0;

    static SegConfig from_json(const json& j);
    json to_json() const;
    void validate() const;
};

// Small volumetric encoder-decoder with skip connections; one logit channel.
class SegUNet {
public:
    explicit SegUNet(int base_width, std::uint64_t seed);

    Tensor forward(const Tensor& x) const;  // [N,1,A,B,C] -> [N,1,A,B,C] logits
    nn::ParamStore& params() { return params_; }
    int base_width() const { return width_; }

    void save(const std::filesystem::path& dir, const json& extra) const;
    static SegUNet load(const std::filesystem::path& dir);

private:
    int width_;
    nn::ParamStore params_;
    nn::Conv3dLayer enc0_, down1_, enc1_, down2_, mid_, up1_, fuse1_, up0_, fuse0_, out_;
};

struct SegCase {
    vol::Volume volume;   // preprocessed (windowed, isotropic)
    vol::VoxelMask label;
};

struct HealthyCase {
    vol::Volume volume;
    vol::VoxelMask organ;
};

// Optional on-the-fly tumor injector for healthy samples. Receives the
// healthy volume, its organ mask and a per-sample seed; returns the
// augmented volume and its tumor label (empty when not applied).
using SynthHook = std::function<std::pair<vol::Volume, vol::VoxelMask>(const vol::Volume&, const vol::VoxelMask&,
                                                                       std::uint64_t)>;

struct SegTrainResult {
    std::vector<double> loss_history;
};

SegTrainResult train_segmenter(SegUNet& model, const std::vector<SegCase>& real,
                               const std::vector<HealthyCase>& healthy, const SynthHook* synth_hook,
                               const SegConfig& cfg, const std::filesystem::path& out_dir);

// Sliding-window inference: overlapping logits averaged, probability
// thresholded at 0.5; volumes smaller than the patch are padded then cropped.
vol::VoxelMask predict(const SegUNet& model, const vol::Volume& volume, const SegConfig& cfg);

// Dice + binary cross-entropy compound loss on logits.
Tensor dice_bce_loss(const Tensor& logits, const Tensor& targets);

}  // namespace tsyn::seg
