#include "seg/segnet.hpp"

#include <cmath>

#include "common/error.hpp"

namespace tsyn::seg {

SegConfig SegConfig::from_json(const json& j) {
    SegConfig c;
    JsonReader r(j, "segmentation config");
    if (r.has("patch_size")) {
        const auto p = r.require<std::array<int, 3>>("patch_size");
        c.patch_size = {p[0], p[1], p[2]};
    }
    c.base_width = r.get("base_width", c.base_width);
    c.steps = r.get("steps", c.steps);
    c.batch_size = r.get("batch_size", c.batch_size);
    c.base_lr = r.get("base_lr", c.base_lr);
    c.warmup_steps = r.get("warmup_steps", c.warmup_steps);
    c.adam_beta1 = r.get("adam_beta1", c.adam_beta1);
    c.adam_beta2 = r.get("adam_beta2", c.adam_beta2);
    c.foreground_crop_ratio = r.get("foreground_crop_ratio", c.foreground_crop_ratio);
    c.rot90_probability = r.get("rot90_probability", c.rot90_probability);
    c.intensity_shift_offset = r.get("intensity_shift_offset", c.intensity_shift_offset);
    c.intensity_shift_probability = r.get("intensity_shift_probability", c.intensity_shift_probability);
    c.sliding_overlap = r.get("sliding_overlap", c.sliding_overlap);
    c.seed = r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

json SegConfig::to_json() const {
    return json{{"patch_size", patch_size},
                {"base_width", base_width},
                {"steps", steps},
                {"batch_size", batch_size},
                {"base_lr", base_lr},
                {"warmup_steps", warmup_steps},
                {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},
                {"foreground_crop_ratio", foreground_crop_ratio},
                {"rot90_probability", rot90_probability},
                {"intensity_shift_offset", intensity_shift_offset},
                {"intensity_shift_probability", intensity_shift_probability},
                {"sliding_overlap", sliding_overlap},
                {"seed", seed}};
}

void SegConfig::validate() const {
    require(sliding_overlap >= 0 && sliding_overlap < 1, ErrorKind::Config,
            "segmentation: sliding_overlap must be in [0,1)");
    for (double p : {rot90_probability, intensity_shift_probability, foreground_crop_ratio})
        require(p >= 0 && p <= 1, ErrorKind::Config, "segmentation: probabilities must be in [0,1]");
    for (int a = 0; a < 3; ++a)
        require(patch_size[a] >= 4 && patch_size[a] % 4 == 0, ErrorKind::Config,
                "segmentation: patch_size must be a multiple of 4");
    require(steps >= 0 && batch_size >= 1, ErrorKind::Config, "segmentation: bad steps/batch");
}

SegUNet::SegUNet(int base_width, std::uint64_t seed) : width_(base_width) {
    Rng rng(derive_seed(seed, "segnet-init"));
    const int w = base_width;
    enc0_ = nn::Conv3dLayer(params_, "enc0", 1, w, 3, 1, 1, rng);
    down1_ = nn::Conv3dLayer(params_, "down1", w, 2 * w, 3, 2, 1, rng);
    enc1_ = nn::Conv3dLayer(params_, "enc1", 2 * w, 2 * w, 3, 1, 1, rng);
    down2_ = nn::Conv3dLayer(params_, "down2", 2 * w, 4 * w, 3, 2, 1, rng);
    mid_ = nn::Conv3dLayer(params_, "mid", 4 * w, 4 * w, 3, 1, 1, rng);
    up1_ = nn::Conv3dLayer(params_, "up1", 4 * w, 2 * w, 3, 1, 1, rng);
    fuse1_ = nn::Conv3dLayer(params_, "fuse1", 4 * w, 2 * w, 3, 1, 1, rng);
    up0_ = nn::Conv3dLayer(params_, "up0", 2 * w, w, 3, 1, 1, rng);
    fuse0_ = nn::Conv3dLayer(params_, "fuse0", 2 * w, w, 3, 1, 1, rng);
    out_ = nn::Conv3dLayer(params_, "out", w, 1, 1, 1, 0, rng);
}

Tensor SegUNet::forward(const Tensor& x) const {
    Tensor h0 = ad::silu(enc0_.forward(x));
    Tensor h1 = ad::silu(down1_.forward(h0));
    h1 = ad::silu(enc1_.forward(h1));
    Tensor h2 = ad::silu(down2_.forward(h1));
    h2 = ad::silu(mid_.forward(h2));
    Tensor u1 = ad::silu(up1_.forward(ad::upsample_nearest3d(h2, 2)));
    u1 = ad::silu(fuse1_.forward(ad::concat({u1, h1}, 1)));
    Tensor u0 = ad::silu(up0_.forward(ad::upsample_nearest3d(u1, 2)));
    u0 = ad::silu(fuse0_.forward(ad::concat({u0, h0}, 1)));
    return out_.forward(u0);
}

void SegUNet::save(const std::filesystem::path& dir, const json& extra) const {
    json manifest = extra;
    manifest["model"] = "segmenter";
    manifest["base_width"] = width_;
    nn::save_checkpoint(params_, dir, manifest);
}

SegUNet SegUNet::load(const std::filesystem::path& dir) {
    json manifest = nn::read_checkpoint_manifest(dir);
    require(manifest.value("model", "") == "segmenter", ErrorKind::Io,
            "checkpoint is not a segmenter: " + dir.string());
    SegUNet model(manifest.at("base_width").get<int>(), 0);
    nn::load_checkpoint(model.params_, dir);
    return model;
}

Tensor dice_bce_loss(const Tensor& logits, const Tensor& targets) {
    Tensor bce = ad::bce_with_logits(logits, targets);
    Tensor p = ad::sigmoid(logits);
    Tensor inter = ad::sum_all(ad::mul(p, targets));
    Tensor denom = ad::add(ad::sum_all(p), ad::sum_all(targets));
    const double eps = 1.0;
    Tensor dice = ad::div(ad::add_scalar(ad::scale(inter, 2.0), eps), ad::add_scalar(denom, eps));
    Tensor dice_loss = ad::add_scalar(ad::scale(dice, -1.0), 1.0);
    return ad::add(bce, dice_loss);
}

}  // namespace tsyn::seg
