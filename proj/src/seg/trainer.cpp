#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "nn/adam.hpp"
#include "seg/segnet.hpp"

namespace tsyn::seg {

namespace {

using vol::Index3;
using vol::Volume;
using vol::VoxelMask;

// 90-degree rotation in the (a0,a1) plane, repeated k times; dims must match
template <typename Grid>
Grid rot90(const Grid& g, int a0, int a1, int k) {
    Grid out = g;
    for (int rep = 0; rep < k; ++rep) {
        Grid src = out;
        const int n = src.shape[a0];
        for (int i = 0; i < src.shape[0]; ++i)
            for (int j = 0; j < src.shape[1]; ++j)
                for (int l = 0; l < src.shape[2]; ++l) {
                    int idx[3] = {i, j, l};
                    const int x = idx[a0], y = idx[a1];
                    idx[a0] = y;
                    idx[a1] = n - 1 - x;
                    out.data[vol::flat(src.shape, idx[0], idx[1], idx[2])] =
                        src.data[vol::flat(src.shape, i, j, l)];
                }
    }
    return out;
}

Tensor patch_to_tensor(const Volume& v) {
    std::vector<double> data(v.data.begin(), v.data.end());
    return Tensor::from_vec({1, 1, v.shape[0], v.shape[1], v.shape[2]}, std::move(data));
}

Tensor mask_to_tensor(const VoxelMask& m) {
    std::vector<double> data(m.data.begin(), m.data.end());
    return Tensor::from_vec({1, 1, m.shape[0], m.shape[1], m.shape[2]}, std::move(data));
}

double lr_at(const SegConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step + 1) / cfg.warmup_steps;
    const int total = std::max(1, cfg.steps - cfg.warmup_steps);
    const int done = std::min(step - cfg.warmup_steps, total);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * done / total));
}

}  // namespace

SegTrainResult train_segmenter(SegUNet& model, const std::vector<SegCase>& real,
                               const std::vector<HealthyCase>& healthy, const SynthHook* synth_hook,
                               const SegConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    require(!real.empty() || !healthy.empty(), ErrorKind::Runtime, "train_segmenter: no training data");

    nn::Adam adam(model.params(), cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2);
    Rng rng(derive_seed(cfg.seed, "seg-train"));
    // hook gating draws come from a separate stream so that a disabled hook
    // leaves the main stream untouched
    Rng hook_rng(derive_seed(cfg.seed, "seg-train-hook"));

    const int n_real = static_cast<int>(real.size());
    const int n_total = n_real + static_cast<int>(healthy.size());

    SegTrainResult result;
    for (int step = 0; step < cfg.steps; ++step) {
        adam.set_lr(lr_at(cfg, step));
        Tensor total;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int pick = rng.uniform_int(0, n_total - 1);
            const Volume* vol_ptr = nullptr;
            const VoxelMask* label_ptr = nullptr;
            Volume synth_vol;
            VoxelMask synth_label;
            if (pick < n_real) {
                vol_ptr = &real[pick].volume;
                label_ptr = &real[pick].label;
            } else {
                const auto& h = healthy[pick - n_real];
                if (synth_hook) {
                    auto [v, l] = (*synth_hook)(h.volume, h.organ, hook_rng.next_u64());
                    synth_vol = std::move(v);
                    synth_label = std::move(l);
                } else {
                    synth_vol = h.volume;
                    synth_label = VoxelMask(h.volume.shape, h.volume.spacing);
                }
                vol_ptr = &synth_vol;
                label_ptr = &synth_label;
            }

            const Index3 center =
                vol::sample_patch_center(vol_ptr->shape, label_ptr, cfg.foreground_crop_ratio, rng);
            Volume patch = vol::crop_patch(*vol_ptr, center, cfg.patch_size);
            VoxelMask label_patch = vol::crop_patch(*label_ptr, center, cfg.patch_size);

            if (rng.uniform() < cfg.rot90_probability) {
                // rotation axes must span equal extents
                static const int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
                const int pidx = rng.uniform_int(0, 2);
                const int k = rng.uniform_int(1, 3);
                const int a0 = pairs[pidx][0], a1 = pairs[pidx][1];
                if (patch.shape[a0] == patch.shape[a1]) {
                    patch = rot90(patch, a0, a1, k);
                    label_patch = rot90(label_patch, a0, a1, k);
                }
            }
            if (rng.uniform() < cfg.intensity_shift_probability) {
                const float shift =
                    static_cast<float>(rng.uniform(-cfg.intensity_shift_offset, cfg.intensity_shift_offset));
                for (auto& x : patch.data) x += shift;
            }

            Tensor logits = model.forward(patch_to_tensor(patch));
            Tensor loss = dice_bce_loss(logits, mask_to_tensor(label_patch));
            total = total.defined() ? ad::add(total, loss) : loss;
        }
        total = ad::scale(total, 1.0 / cfg.batch_size);
        adam.zero_grad();
        ad::backward(total);
        adam.step();
        const double loss = total.item();
        if (!std::isfinite(loss))
            fail_runtime("segmentation training diverged (NaN loss) at step " + std::to_string(step));
        result.loss_history.push_back(loss);
    }
    if (!out_dir.empty())
        model.save(out_dir, json{{"step", cfg.steps}, {"seed", cfg.seed}, {"train", cfg.to_json()}});
    return result;
}

vol::VoxelMask predict(const SegUNet& model, const Volume& volume, const SegConfig& cfg) {
    ad::NoGradGuard guard;

    // pad up to the patch size if needed, crop the result back afterwards
    Index3 work_shape = volume.shape;
    for (int a = 0; a < 3; ++a) work_shape[a] = std::max(work_shape[a], cfg.patch_size[a]);
    Volume padded(work_shape, volume.spacing);
    for (int i = 0; i < volume.shape[0]; ++i)
        for (int j = 0; j < volume.shape[1]; ++j)
            for (int k = 0; k < volume.shape[2]; ++k) padded.at(i, j, k) = volume.at(i, j, k);
    const Volume& work = work_shape == volume.shape ? volume : padded;

    std::vector<double> logit_sum(static_cast<size_t>(work.voxels()), 0.0);
    std::vector<int> counts(static_cast<size_t>(work.voxels()), 0);

    std::array<std::vector<int>, 3> starts;
    for (int a = 0; a < 3; ++a) {
        const int stride = std::max(1, static_cast<int>(std::llround((1.0 - cfg.sliding_overlap) *
                                                                      cfg.patch_size[a])));
        for (int pos = 0;; pos += stride) {
            if (pos + cfg.patch_size[a] >= work.shape[a]) {
                starts[a].push_back(work.shape[a] - cfg.patch_size[a]);
                break;
            }
            starts[a].push_back(pos);
        }
    }

    for (int sa : starts[0])
        for (int sb : starts[1])
            for (int sc : starts[2]) {
                std::vector<double> patch(static_cast<size_t>(cfg.patch_size[0]) * cfg.patch_size[1] *
                                          cfg.patch_size[2]);
                std::int64_t p = 0;
                for (int i = 0; i < cfg.patch_size[0]; ++i)
                    for (int j = 0; j < cfg.patch_size[1]; ++j)
                        for (int k = 0; k < cfg.patch_size[2]; ++k)
                            patch[p++] = work.at(sa + i, sb + j, sc + k);
                Tensor x = Tensor::from_vec({1, 1, cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]},
                                            std::move(patch));
                Tensor logits = model.forward(x);
                p = 0;
                for (int i = 0; i < cfg.patch_size[0]; ++i)
                    for (int j = 0; j < cfg.patch_size[1]; ++j)
                        for (int k = 0; k < cfg.patch_size[2]; ++k) {
                            const auto idx = vol::flat(work.shape, sa + i, sb + j, sc + k);
                            logit_sum[idx] += logits.data()[p++];
                            counts[idx] += 1;
                        }
            }

    VoxelMask out(volume.shape, volume.spacing);
    for (int i = 0; i < volume.shape[0]; ++i)
        for (int j = 0; j < volume.shape[1]; ++j)
            for (int k = 0; k < volume.shape[2]; ++k) {
                const auto idx = vol::flat(work.shape, i, j, k);
                const double avg = logit_sum[idx] / std::max(1, counts[idx]);
                // probability 0.5 threshold on the averaged logit
                out.at(i, j, k) = avg >= 0.0 ? 1 : 0;
            }
    return out;
}

}  // namespace tsyn::seg
