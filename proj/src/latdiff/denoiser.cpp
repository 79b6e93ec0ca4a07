#include "latdiff/denoiser.hpp"

#include "common/error.hpp"
#include "latdiff/diffusion.hpp"

namespace tsyn::ldm {

DenoiserConfig DenoiserConfig::from_json(const json& j) {
    DenoiserConfig c;
    JsonReader r(j, "denoiser config");
    c.latent_channels = r.get("latent_channels", c.latent_channels);
    c.base_width = r.get("base_width", c.base_width);
    c.time_dim = r.get("time_dim", c.time_dim);
    c.attention = r.get("attention", c.attention);
    c.seed = r.get("seed", c.seed);
    r.finish();
    return c;
}

json DenoiserConfig::to_json() const {
    return json{{"latent_channels", latent_channels},
                {"base_width", base_width},
                {"time_dim", time_dim},
                {"attention", attention},
                {"seed", seed}};
}

DenoiserUNet::ResBlock::ResBlock(ParamStore& store, const std::string& name, int in_ch, int out_ch, int time_dim,
                                 Rng& rng)
    : n1(store, name + ".n1", in_ch, std::min(in_ch, 8)),
      n2(store, name + ".n2", out_ch, std::min(out_ch, 8)),
      c1(store, name + ".c1", in_ch, out_ch, 3, 1, 1, rng),
      c2(store, name + ".c2", out_ch, out_ch, 3, 1, 1, rng),
      t_proj(store, name + ".temb", time_dim, out_ch, rng),
      has_skip(in_ch != out_ch) {
    if (has_skip) skip = nn::Conv3dLayer(store, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
}

Tensor DenoiserUNet::ResBlock::forward(const Tensor& x, const Tensor& emb) const {
    Tensor h = c1.forward(ad::silu(n1.forward(x)));
    h = ad::add_channel_bias(h, t_proj.forward(emb));
    h = c2.forward(ad::silu(n2.forward(h)));
    Tensor s = has_skip ? skip.forward(x) : x;
    return ad::add(s, h);
}

DenoiserUNet::DenoiserUNet(const DenoiserConfig& cfg) : cfg_(cfg) {
    Rng rng(derive_seed(cfg.seed, "denoiser-init"));
    const int c = cfg.latent_channels;
    const int w = cfg.base_width;
    const int td = cfg.time_dim;
    const int in_ch = 2 * c + 1;  // [z_t, healthy, mask]

    conv_in_ = nn::Conv3dLayer(params_, "in", in_ch, w, 3, 1, 1, rng);
    block0_ = ResBlock(params_, "level0.block", w, w, td, rng);
    down_ = nn::Conv3dLayer(params_, "down", w, 2 * w, 3, 2, 1, rng);
    block1_ = ResBlock(params_, "level1.block", 2 * w, 2 * w, td, rng);
    if (cfg.attention) attn_ = nn::FactorizedAttention(params_, "level1.attn", 2 * w, rng);
    block_mid_ = ResBlock(params_, "mid.block", 2 * w, 2 * w, td, rng);
    up_conv_ = nn::Conv3dLayer(params_, "up", 2 * w, w, 3, 1, 1, rng);
    block_up_ = ResBlock(params_, "level0.up_block", 2 * w, w, td, rng);
    norm_out_ = nn::GroupNormLayer(params_, "out_norm", w, std::min(w, 8));
    conv_out_ = nn::Conv3dLayer(params_, "out", w, c, 3, 1, 1, rng);

    t_mlp1_ = nn::LinearLayer(params_, "time.mlp1", td, td, rng);
    t_mlp2_ = nn::LinearLayer(params_, "time.mlp2", td, td, rng);
}

Tensor DenoiserUNet::forward(const Tensor& z_t, const DiffusionCondition& cond, int t) const {
    const auto& s = z_t.shape();
    require(s.size() == 5 && s[1] == cfg_.latent_channels, ErrorKind::Runtime,
            "denoiser: z_t must be [N,c,h,w,d] with configured channel count");
    require(cond.healthy.shape() == z_t.shape(), ErrorKind::Runtime, "denoiser: healthy shape mismatch");
    require(cond.mask.shape()[2] == s[2] && cond.mask.shape()[3] == s[3] && cond.mask.shape()[4] == s[4],
            ErrorKind::Runtime, "denoiser: mask shape mismatch");

    Tensor emb0 = Tensor::from_vec({1, cfg_.time_dim}, nn::sinusoidal_embedding(t, cfg_.time_dim));
    Tensor emb = t_mlp2_.forward(ad::silu(t_mlp1_.forward(emb0)));
    if (s[0] > 1) {
        std::vector<Tensor> copies(static_cast<size_t>(s[0]), emb);
        emb = ad::concat(copies, 0);
    }

    Tensor x = ad::concat({z_t, cond.healthy, cond.mask}, 1);
    Tensor h0 = conv_in_.forward(x);
    h0 = block0_.forward(h0, emb);
    Tensor h1 = down_.forward(h0);
    h1 = block1_.forward(h1, emb);
    if (cfg_.attention) h1 = attn_.forward(h1);
    h1 = block_mid_.forward(h1, emb);
    Tensor up = up_conv_.forward(ad::upsample_nearest3d(h1, 2));
    Tensor cat = ad::concat({up, h0}, 1);
    Tensor hu = block_up_.forward(cat, emb);
    return conv_out_.forward(ad::silu(norm_out_.forward(hu)));
}

void DenoiserUNet::save(const std::filesystem::path& dir, const json& extra) const {
    json manifest = extra;
    manifest["model"] = "denoiser";
    manifest["config"] = cfg_.to_json();
    nn::save_checkpoint(params_, dir, manifest);
}

DenoiserUNet DenoiserUNet::load(const std::filesystem::path& dir) {
    json manifest = nn::read_checkpoint_manifest(dir);
    require(manifest.value("model", "") == "denoiser", ErrorKind::Io,
            "checkpoint is not a denoiser: " + dir.string());
    DenoiserUNet model(DenoiserConfig::from_json(manifest.at("config")));
    nn::load_checkpoint(model.params_, dir);
    return model;
}

}  // namespace tsyn::ldm
