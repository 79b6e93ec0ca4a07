#include "latdiff/diffusion.hpp"

#include <cmath>

#include "common/error.hpp"
#include "nn/adam.hpp"

namespace tsyn::ldm {

void DiffusionCondition::validate() const {
    require(healthy.defined() && mask.defined(), ErrorKind::Runtime, "condition: undefined tensors");
    const auto& sh = healthy.shape();
    const auto& sm = mask.shape();
    require(sh.size() == 5 && sm.size() == 5 && sm[1] == 1, ErrorKind::Runtime,
            "condition: healthy [N,c,h,w,d], mask [N,1,h,w,d]");
    require(sm[0] == sh[0] && sm[2] == sh[2] && sm[3] == sh[3] && sm[4] == sh[4], ErrorKind::Runtime,
            "condition: mask spatial shape mismatch");
    const int c = sh[1];
    const std::int64_t spatial = static_cast<std::int64_t>(sh[2]) * sh[3] * sh[4];
    for (std::int64_t n = 0; n < sh[0]; ++n)
        for (std::int64_t p = 0; p < spatial; ++p) {
            const double m = mask.data()[n * spatial + p];
            require(m == 0.0 || m == 1.0, ErrorKind::Runtime, "condition: mask must be binary");
            if (m == 1.0) {
                for (int ch = 0; ch < c; ++ch)
                    require(healthy.data()[(n * c + ch) * spatial + p] == 0.0, ErrorKind::Runtime,
                            "condition: healthy must be exactly zero inside the mask");
            }
        }
}

Tensor latent_mask_to_tensor(const vol::VoxelMask& m) {
    std::vector<double> v(m.data.begin(), m.data.end());
    return Tensor::from_vec({1, 1, m.shape[0], m.shape[1], m.shape[2]}, std::move(v));
}

DiffusionCondition make_condition(const Tensor& z0, const vol::VoxelMask& latent_mask) {
    const auto& s = z0.shape();
    require(s.size() == 5, ErrorKind::Runtime, "make_condition: z0 must be [N,c,h,w,d]");
    require(s[2] == latent_mask.shape[0] && s[3] == latent_mask.shape[1] && s[4] == latent_mask.shape[2],
            ErrorKind::Runtime, "make_condition: mask does not match the latent grid");
    DiffusionCondition cond;
    cond.mask = latent_mask_to_tensor(latent_mask);
    const int c = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
    std::vector<double> healthy(z0.size());
    for (std::int64_t n = 0; n < s[0]; ++n)
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < spatial; ++p) {
                const std::int64_t i = (n * c + ch) * spatial + p;
                healthy[i] = latent_mask.data[p] ? 0.0 : z0.data()[i];
            }
    cond.healthy = Tensor::from_vec(s, std::move(healthy));
    return cond;
}

Tensor diffusion_loss(const DenoiserFn& denoiser, const Tensor& z0, const DiffusionCondition& cond,
                      const NoiseSchedule& schedule, Rng& rng) {
    cond.validate();
    // consistency: healthy must equal (1-m) * z0 elementwise
    {
        const auto& s = z0.shape();
        const int c = s[1];
        const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
        for (std::int64_t n = 0; n < s[0]; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (std::int64_t p = 0; p < spatial; ++p) {
                    const std::int64_t i = (n * c + ch) * spatial + p;
                    const double want = cond.mask.data()[n * spatial + p] ? 0.0 : z0.data()[i];
                    require(cond.healthy.data()[i] == want, ErrorKind::Runtime,
                            "diffusion_loss: condition inconsistent with z0");
                }
    }
    const int t = rng.uniform_int(1, schedule.T);
    Tensor eps = gaussian_like(z0, rng);
    Tensor z_t = q_sample(z0, t, schedule, eps);
    Tensor eps_hat = denoiser(z_t, cond, t);
    return ad::mse_loss(eps_hat, eps);
}

double diffusion_loss_eval(const DenoiserFn& denoiser, const Tensor& z0, const DiffusionCondition& cond,
                           const NoiseSchedule& schedule, std::uint64_t seed, int n_draws) {
    ad::NoGradGuard guard;
    Rng rng(seed);
    double acc = 0;
    for (int i = 0; i < n_draws; ++i) acc += diffusion_loss(denoiser, z0, cond, schedule, rng).item();
    return acc / n_draws;
}

Tensor ddpm_sample(const DenoiserFn& denoiser, const DiffusionCondition& cond, const NoiseSchedule& schedule,
                   const std::vector<int>& steps, Rng& rng, SampleStats* stats) {
    require(!steps.empty(), ErrorKind::Config, "ddpm_sample: steps must be non-empty");
    for (size_t i = 0; i < steps.size(); ++i) {
        require(steps[i] >= 1 && steps[i] <= schedule.T, ErrorKind::Config, "ddpm_sample: step out of range");
        if (i > 0) require(steps[i] > steps[i - 1], ErrorKind::Config, "ddpm_sample: steps must increase");
    }
    cond.validate();

    Tensor z = gaussian_like(cond.healthy, rng);
    const auto& s = z.shape();
    const int c = s[1];
    const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];

    auto reimpose_healthy = [&](Tensor& zt, int t_now) {
        // outside the mask the chain is pinned to the noised true healthy latent
        Tensor noised = t_now == 0 ? cond.healthy : q_sample(cond.healthy, t_now, schedule, gaussian_like(cond.healthy, rng));
        for (std::int64_t n = 0; n < s[0]; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (std::int64_t p = 0; p < spatial; ++p) {
                    if (cond.mask.data()[n * spatial + p] == 0.0) {
                        const std::int64_t i = (n * c + ch) * spatial + p;
                        zt.data()[i] = noised.data()[i];
                    }
                }
    };

    for (int i = static_cast<int>(steps.size()) - 1; i >= 0; --i) {
        const int t = steps[i];
        const int t_prev = i > 0 ? steps[i - 1] : 0;
        Tensor eps_hat;
        {
            ad::NoGradGuard guard;
            eps_hat = denoiser(z, cond, t);
        }
        if (stats) ++stats->denoiser_calls;

        const double ab_t = schedule.abar(t);
        const double ab_prev = schedule.abar(t_prev);
        const double alpha_eff = ab_t / ab_prev;
        const double beta_eff = 1.0 - alpha_eff;
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_eff);
        const double eps_coef = beta_eff / std::sqrt(1.0 - ab_t);

        std::vector<double> next(z.size());
        if (t_prev > 0) {
            const double sigma = std::sqrt(beta_eff * (1.0 - ab_prev) / (1.0 - ab_t));
            for (std::int64_t j = 0; j < z.size(); ++j) {
                const double mean = inv_sqrt_alpha * (z.data()[j] - eps_coef * eps_hat.data()[j]);
                next[j] = mean + sigma * rng.normal();
            }
        } else {
            for (std::int64_t j = 0; j < z.size(); ++j)
                next[j] = inv_sqrt_alpha * (z.data()[j] - eps_coef * eps_hat.data()[j]);
        }
        z = Tensor::from_vec(z.shape(), std::move(next));
        reimpose_healthy(z, t_prev);
    }
    return z;
}

DiffusionTrainConfig DiffusionTrainConfig::from_json(const json& j) {
    DiffusionTrainConfig c;
    JsonReader r(j, "diffusion config");
    if (r.has("net")) c.net = DenoiserConfig::from_json(r.child("net"));
    c.T = r.get("T", c.T);
    c.beta_min = r.get("beta_min", c.beta_min);
    c.beta_max = r.get("beta_max", c.beta_max);
    c.lr = r.get("lr", c.lr);
    c.adam_beta1 = r.get("adam_beta1", c.adam_beta1);
    c.adam_beta2 = r.get("adam_beta2", c.adam_beta2);
    c.batch_size = r.get("batch_size", c.batch_size);
    c.steps = r.get("steps", c.steps);
    c.checkpoint_every = r.get("checkpoint_every", c.checkpoint_every);
    c.seed = r.get("seed", c.seed);
    r.finish();
    c.net.seed = c.net.seed ? c.net.seed : c.seed;
    return c;
}

json DiffusionTrainConfig::to_json() const {
    return json{{"net", net.to_json()},
                {"T", T},
                {"beta_min", beta_min},
                {"beta_max", beta_max},
                {"lr", lr},
                {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},
                {"batch_size", batch_size},
                {"steps", steps},
                {"checkpoint_every", checkpoint_every},
                {"seed", seed}};
}

DiffusionTrainResult train_diffusion(DenoiserUNet& model, const std::vector<LatentSample>& dataset,
                                     const DiffusionTrainConfig& cfg, const std::filesystem::path& out_dir) {
    require(!dataset.empty(), ErrorKind::Runtime, "train_diffusion: empty dataset");
    const NoiseSchedule schedule = cfg.schedule();
    nn::Adam adam(model.params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    Rng rng(derive_seed(cfg.seed, "diffusion-train"));

    std::vector<DiffusionCondition> conds;
    conds.reserve(dataset.size());
    for (const auto& sample : dataset) conds.push_back(make_condition(sample.z0, sample.mask));

    DenoiserFn fn = [&model](const Tensor& z_t, const DiffusionCondition& cond, int t) {
        return model.forward(z_t, cond, t);
    };

    DiffusionTrainResult result;
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor total;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int pick = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
            Tensor l = diffusion_loss(fn, dataset[pick].z0, conds[pick], schedule, rng);
            total = total.defined() ? ad::add(total, l) : l;
        }
        total = ad::scale(total, 1.0 / cfg.batch_size);
        adam.zero_grad();
        ad::backward(total);
        adam.step();
        const double loss = total.item();
        if (!std::isfinite(loss))
            fail_runtime("diffusion training diverged (NaN loss) at step " + std::to_string(step));
        result.history.push_back(loss);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !out_dir.empty())
            model.save(out_dir, json{{"step", step + 1}, {"seed", cfg.seed}, {"train", cfg.to_json()}});
    }
    if (!out_dir.empty()) model.save(out_dir, json{{"step", cfg.steps}, {"seed", cfg.seed}, {"train", cfg.to_json()}});
    return result;
}

}  // namespace tsyn::ldm
