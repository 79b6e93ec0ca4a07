#include "autoenc/autoenc.hpp"

#include <cmath>

#include "common/error.hpp"

namespace tsyn::ae {

AutoencoderConfig AutoencoderConfig::from_json(const json& j) {
    AutoencoderConfig c;
    JsonReader r(j, "autoencoder config");
    c.compression = r.get("compression", c.compression);
    c.codebook_size = r.get("codebook_size", c.codebook_size);
    c.latent_channels = r.get("latent_channels", c.latent_channels);
    c.base_width = r.get("base_width", c.base_width);
    c.disc_width = r.get("disc_width", c.disc_width);
    c.perceptual_width = r.get("perceptual_width", c.perceptual_width);
    c.alpha = r.get("alpha", c.alpha);
    c.lambda_perceptual = r.get("lambda_perceptual", c.lambda_perceptual);
    c.lambda_match = r.get("lambda_match", c.lambda_match);
    c.lambda_gan = r.get("lambda_gan", c.lambda_gan);
    c.gan_warmup_steps = r.get("gan_warmup_steps", c.gan_warmup_steps);
    c.lr = r.get("lr", c.lr);
    c.adam_beta1 = r.get("adam_beta1", c.adam_beta1);
    c.adam_beta2 = r.get("adam_beta2", c.adam_beta2);
    c.batch_size = r.get("batch_size", c.batch_size);
    c.steps = r.get("steps", c.steps);
    c.checkpoint_every = r.get("checkpoint_every", c.checkpoint_every);
    c.seed = r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

json AutoencoderConfig::to_json() const {
    return json{{"compression", compression},
                {"codebook_size", codebook_size},
                {"latent_channels", latent_channels},
                {"base_width", base_width},
                {"disc_width", disc_width},
                {"perceptual_width", perceptual_width},
                {"alpha", alpha},
                {"lambda_perceptual", lambda_perceptual},
                {"lambda_match", lambda_match},
                {"lambda_gan", lambda_gan},
                {"gan_warmup_steps", gan_warmup_steps},
                {"lr", lr},
                {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},
                {"batch_size", batch_size},
                {"steps", steps},
                {"checkpoint_every", checkpoint_every},
                {"seed", seed}};
}

void AutoencoderConfig::validate() const {
    require(compression >= 2 && (compression & (compression - 1)) == 0, ErrorKind::Config,
            "autoencoder: compression must be a power of two >= 2");
    require(codebook_size >= 1, ErrorKind::Config, "autoencoder: codebook_size must be >= 1");
    require(latent_channels >= 1, ErrorKind::Config, "autoencoder: latent_channels must be >= 1");
    require(alpha >= 0 && lambda_perceptual >= 0 && lambda_match >= 0 && lambda_gan >= 0, ErrorKind::Config,
            "autoencoder: loss weights must be non-negative");
    require(batch_size >= 1 && steps >= 0, ErrorKind::Config, "autoencoder: bad batch/steps");
}

Tensor volume_to_tensor(const vol::Volume& v) {
    std::vector<double> data(v.data.begin(), v.data.end());
    return Tensor::from_vec({1, 1, v.shape[0], v.shape[1], v.shape[2]}, std::move(data));
}

vol::Volume tensor_to_volume(const Tensor& t, const vol::Vec3& spacing) {
    const auto& s = t.shape();
    require(s.size() == 5 && s[0] == 1 && s[1] == 1, ErrorKind::Runtime,
            "tensor_to_volume: expected [1,1,H,W,D]");
    vol::Volume v({s[2], s[3], s[4]}, spacing);
    for (std::int64_t i = 0; i < t.size(); ++i) v.data[i] = static_cast<float>(t.data()[i]);
    return v;
}

FeatureNet2d::FeatureNet2d(ParamStore& store, const std::string& prefix, int width, std::uint64_t seed) {
    Rng rng(seed);
    c1 = nn::Conv2dLayer(store, prefix + ".c1", 1, width, 3, 1, 1, rng);
    c2 = nn::Conv2dLayer(store, prefix + ".c2", width, width, 3, 1, 1, rng);
    // the extractor is fixed: freeze after init
    for (Tensor* t : {&c1.w, &c1.b, &c2.w, &c2.b}) t->node()->requires_grad = false;
}

Tensor FeatureNet2d::forward(const Tensor& x) const {
    Tensor h = ad::tanh_act(c1.forward(x));
    return ad::tanh_act(c2.forward(h));
}

SliceDiscriminator::SliceDiscriminator(ParamStore& store, const std::string& prefix, int width, Rng& rng) {
    c1 = nn::Conv2dLayer(store, prefix + ".c1", 1, width, 3, 2, 1, rng);
    c2 = nn::Conv2dLayer(store, prefix + ".c2", width, 2 * width, 3, 2, 1, rng);
    c3 = nn::Conv2dLayer(store, prefix + ".c3", 2 * width, 1, 3, 1, 1, rng);
}

SliceDiscriminator::Out SliceDiscriminator::forward(const Tensor& slices) const {
    Out out;
    Tensor h1 = ad::silu(c1.forward(slices));
    Tensor h2 = ad::silu(c2.forward(h1));
    out.features = {h1, h2};
    out.logit = ad::mean_all(c3.forward(h2));
    return out;
}

VolumeDiscriminator::VolumeDiscriminator(ParamStore& store, const std::string& prefix, int width, Rng& rng) {
    c1 = nn::Conv3dLayer(store, prefix + ".c1", 1, width, 3, 2, 1, rng);
    c2 = nn::Conv3dLayer(store, prefix + ".c2", width, 2 * width, 3, 2, 1, rng);
    c3 = nn::Conv3dLayer(store, prefix + ".c3", 2 * width, 1, 3, 1, 1, rng);
}

VolumeDiscriminator::Out VolumeDiscriminator::forward(const Tensor& x) const {
    Out out;
    Tensor h1 = ad::silu(c1.forward(x));
    Tensor h2 = ad::silu(c2.forward(h1));
    out.features = {h1, h2};
    out.logit = ad::mean_all(c3.forward(h2));
    return out;
}

Autoencoder::Autoencoder(const AutoencoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg.seed, "autoencoder-init"));
    const int w = cfg.base_width;
    const int stages = static_cast<int>(std::round(std::log2(cfg.compression)));

    enc_in_ = nn::Conv3dLayer(gen_, "encoder.in", 1, w, 3, 1, 1, rng);
    int ch = w;
    for (int s = 0; s < stages; ++s) {
        const int next = std::min(2 * w, ch * 2);
        enc_.emplace_back(gen_, "encoder.down" + std::to_string(s), ch, next, 3, 2, 1, rng);
        enc_mid_.emplace_back(gen_, "encoder.mid" + std::to_string(s), next, next, 3, 1, 1, rng);
        ch = next;
    }
    enc_out_ = nn::Conv3dLayer(gen_, "encoder.out", ch, cfg.latent_channels, 3, 1, 1, rng);

    dec_in_ = nn::Conv3dLayer(gen_, "decoder.in", cfg.latent_channels, ch, 3, 1, 1, rng);
    for (int s = 0; s < stages; ++s) {
        const int next = s == stages - 1 ? w : ch;
        dec_.emplace_back(gen_, "decoder.up" + std::to_string(s), ch, next, 3, 1, 1, rng);
        dec_mid_.emplace_back(gen_, "decoder.mid" + std::to_string(s), next, next, 3, 1, 1, rng);
        ch = next;
    }
    dec_out_ = nn::Conv3dLayer(gen_, "decoder.out", ch, 1, 3, 1, 1, rng);

    std::vector<double> cb(static_cast<size_t>(cfg.codebook_size) * cfg.latent_channels);
    for (auto& x : cb) x = rng.normal() * 0.5;
    codebook_ = gen_.add("codebook", {cfg.codebook_size, cfg.latent_channels}, std::move(cb));

    Rng drng(derive_seed(cfg.seed, "autoencoder-disc-init"));
    ds_ = SliceDiscriminator(disc_, "disc_slice", cfg.disc_width, drng);
    dv_ = VolumeDiscriminator(disc_, "disc_volume", cfg.disc_width, drng);

    pnet_ = FeatureNet2d(fixed_, "perceptual", cfg.perceptual_width, derive_seed(cfg.seed, "perceptual-init"));
}

Tensor Autoencoder::encode(const Tensor& x) const {
    const auto& s = x.shape();
    require(s.size() == 5 && s[1] == 1, ErrorKind::Runtime, "encode: expected [N,1,H,W,D]");
    for (int a = 2; a < 5; ++a)
        require(s[a] % cfg_.compression == 0, ErrorKind::Runtime,
                "encode: input dims must be divisible by the compression factor " +
                    std::to_string(cfg_.compression));
    Tensor h = ad::silu(enc_in_.forward(x));
    for (size_t i = 0; i < enc_.size(); ++i) {
        h = ad::silu(enc_[i].forward(h));
        h = ad::silu(enc_mid_[i].forward(h));
    }
    return enc_out_.forward(h);
}

LatentGrid Autoencoder::quantize(const Tensor& continuous) const {
    const auto& s = continuous.shape();
    require(s.size() == 5 && s[1] == cfg_.latent_channels, ErrorKind::Runtime,
            "quantize: latent channel dim must equal the codebook dimension");
    const int N = s[0], c = s[1], h = s[2], w = s[3], d = s[4];
    const std::int64_t spatial = static_cast<std::int64_t>(h) * w * d;
    const int K = cfg_.codebook_size;

    LatentGrid grid;
    grid.continuous = continuous;
    grid.indices.resize(static_cast<size_t>(N) * spatial);
    std::vector<double> embedded(continuous.size());

    const double* cb = codebook_.data();
    for (int n = 0; n < N; ++n) {
        const double* zc = continuous.data() + static_cast<std::int64_t>(n) * c * spatial;
        for (std::int64_t p = 0; p < spatial; ++p) {
            int best = 0;
            double best_d = 0;
            for (int k = 0; k < K; ++k) {
                double dist = 0;
                for (int ch = 0; ch < c; ++ch) {
                    const double diff = zc[ch * spatial + p] - cb[static_cast<std::int64_t>(k) * c + ch];
                    dist += diff * diff;
                }
                // strict less keeps the lowest index on ties
                if (k == 0 || dist < best_d) {
                    best_d = dist;
                    best = k;
                }
            }
            grid.indices[static_cast<size_t>(n) * spatial + p] = best;
            for (int ch = 0; ch < c; ++ch)
                embedded[(static_cast<std::int64_t>(n) * c + ch) * spatial + p] =
                    cb[static_cast<std::int64_t>(best) * c + ch];
        }
    }

    grid.embedded = ad::straight_through(embedded, continuous);
    // gather view: [N*spatial, c] -> [N,h,w,d,c] -> [N,c,h,w,d]
    Tensor gathered = ad::gather_rows(codebook_, grid.indices);
    grid.embedded_codebook = ad::permute(ad::reshape(gathered, {N, h, w, d, c}), {0, 4, 1, 2, 3});
    return grid;
}

Tensor Autoencoder::decode(const Tensor& embedded) const {
    const auto& s = embedded.shape();
    require(s.size() == 5 && s[1] == cfg_.latent_channels, ErrorKind::Runtime,
            "decode: latent grid shape does not match the configuration");
    Tensor h = ad::silu(dec_in_.forward(embedded));
    for (size_t i = 0; i < dec_.size(); ++i) {
        h = ad::upsample_nearest3d(h, 2);
        h = ad::silu(dec_[i].forward(h));
        h = ad::silu(dec_mid_[i].forward(h));
    }
    return ad::tanh_act(dec_out_.forward(h));
}

void Autoencoder::save(const std::filesystem::path& dir, const json& extra) const {
    nn::ParamStore merged;
    for (const ParamStore* st : {&gen_, &disc_, &fixed_})
        for (const auto& [name, p] : st->all())
            merged.add(name, p.shape(), std::vector<double>(p.data(), p.data() + p.size()));
    json manifest = extra;
    manifest["model"] = "autoencoder";
    manifest["config"] = cfg_.to_json();
    nn::save_checkpoint(merged, dir, manifest);
}

Autoencoder Autoencoder::load(const std::filesystem::path& dir) {
    json manifest = nn::read_checkpoint_manifest(dir);
    require(manifest.value("model", "") == "autoencoder", ErrorKind::Io,
            "checkpoint is not an autoencoder: " + dir.string());
    Autoencoder model(AutoencoderConfig::from_json(manifest.at("config")));
    nn::ParamStore merged;
    for (ParamStore* st : {&model.gen_, &model.disc_, &model.fixed_})
        for (const auto& [name, p] : st->all()) merged.add(name, p.shape(), std::vector<double>(p.size(), 0.0));
    nn::load_checkpoint(merged, dir);
    for (ParamStore* st : {&model.gen_, &model.disc_, &model.fixed_})
        for (auto& [name, p] : const_cast<std::map<std::string, Tensor>&>(st->all())) {
            const Tensor& src = merged.at(name);
            std::copy(src.data(), src.data() + src.size(), p.data());
        }
    return model;
}

VqLossTerms vq_losses(const Tensor& x, const Tensor& x_hat, const Tensor& continuous,
                      const Tensor& embedded_codebook, double alpha) {
    require(x.shape() == x_hat.shape(), ErrorKind::Runtime, "vq_losses: x/x_hat shape mismatch");
    require(continuous.shape() == embedded_codebook.shape(), ErrorKind::Runtime,
            "vq_losses: latent shape mismatch");
    VqLossTerms t;
    t.recon = ad::l1_loss(x, x_hat);
    t.codebook = ad::mse_loss(ad::detach(continuous), embedded_codebook);
    t.commit = ad::scale(ad::mse_loss(ad::detach(embedded_codebook), continuous), alpha);
    return t;
}

namespace {

// features of every slice along `axis`, averaged over slices: [N, F*plane]
Tensor plane_feature_mean(const Tensor& x, int axis, const FeatureNet2d& net) {
    const auto& s = x.shape();
    const int N = s[0];
    // move the slicing axis right after the batch axis
    std::vector<int> perm;
    if (axis == 0) perm = {0, 2, 1, 3, 4};       // slices along H -> planes W x D
    else if (axis == 1) perm = {0, 3, 1, 2, 4};  // slices along W -> planes H x D
    else perm = {0, 4, 1, 2, 3};                 // slices along D -> planes H x W
    Tensor moved = ad::permute(x, perm);         // [N, S, 1, P0, P1]
    const int S = moved.shape()[1], P0 = moved.shape()[3], P1 = moved.shape()[4];
    Tensor batch = ad::reshape(moved, {N * S, 1, P0, P1});
    Tensor feats = net.forward(batch);  // [N*S, F, P0, P1]
    const int F = feats.shape()[1];
    Tensor grouped = ad::reshape(feats, {N, S, F * P0 * P1});
    // mean over slices via matmul with a constant 1/S row
    Tensor ones = Tensor::full({1, S}, 1.0 / S);
    std::vector<Tensor> rows;
    for (int n = 0; n < N; ++n) {
        Tensor g = ad::reshape(ad::slice_axis(grouped, 0, n, n + 1), {S, F * P0 * P1});
        rows.push_back(ad::matmul(ones, g));  // [1, F*P0*P1]
    }
    return rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
}

}  // namespace

std::array<Tensor, 3> perceptual_loss_planes(const Tensor& x, const Tensor& x_hat, const FeatureNet2d& net) {
    require(x.shape() == x_hat.shape(), ErrorKind::Runtime, "perceptual_loss: shape mismatch");
    std::array<Tensor, 3> planes;
    for (int axis = 0; axis < 3; ++axis) {
        Tensor fx = plane_feature_mean(x, axis, net);
        Tensor fh = plane_feature_mean(x_hat, axis, net);
        planes[static_cast<size_t>(axis)] = ad::l1_loss(fx, fh);
    }
    return planes;
}

Tensor perceptual_loss(const Tensor& x, const Tensor& x_hat, const FeatureNet2d& net) {
    auto planes = perceptual_loss_planes(x, x_hat, net);
    return ad::scale(ad::add(planes[0], ad::add(planes[1], planes[2])), 1.0 / 3.0);
}

std::vector<Tensor> mid_slices(const Tensor& x) {
    const auto& s = x.shape();
    require(s.size() == 5 && s[1] == 1, ErrorKind::Runtime, "mid_slices: expected [N,1,H,W,D]");
    const int N = s[0], H = s[2], W = s[3], D = s[4];
    std::vector<Tensor> out;
    out.push_back(ad::reshape(ad::slice_axis(x, 2, H / 2, H / 2 + 1), {N, 1, W, D}));
    out.push_back(ad::reshape(ad::permute(ad::slice_axis(x, 3, W / 2, W / 2 + 1), {0, 1, 3, 2, 4}), {N, 1, H, D}));
    out.push_back(ad::reshape(ad::slice_axis(x, 4, D / 2, D / 2 + 1), {N, 1, H, W}));
    return out;
}

namespace {

Tensor log_sigmoid(const Tensor& logit) { return ad::scale(ad::softplus(ad::scale(logit, -1.0)), -1.0); }
Tensor log_one_minus_sigmoid(const Tensor& logit) { return ad::scale(ad::softplus(logit), -1.0); }

}  // namespace

GanLossTerms discriminator_losses(const Tensor& x, const Tensor& x_hat, SliceDiscriminator* ds,
                                  VolumeDiscriminator* dv) {
    require(x.shape() == x_hat.shape(), ErrorKind::Runtime, "discriminator_losses: shape mismatch");
    GanLossTerms out;
    auto accumulate = [&](const Tensor& logit_real, const Tensor& logit_fake,
                          const std::vector<Tensor>& feat_real, const std::vector<Tensor>& feat_fake) {
        Tensor disc_term = ad::add(log_sigmoid(logit_real), log_one_minus_sigmoid(logit_fake));
        out.disc = out.disc.defined() ? ad::add(out.disc, disc_term) : disc_term;
        Tensor gen_term = ad::scale(log_sigmoid(logit_fake), -1.0);
        out.gan_generator = out.gan_generator.defined() ? ad::add(out.gan_generator, gen_term) : gen_term;
        for (size_t i = 0; i < feat_real.size(); ++i) {
            Tensor m = ad::l1_loss(feat_fake[i], feat_real[i]);
            out.match = out.match.defined() ? ad::add(out.match, m) : m;
        }
    };

    if (ds) {
        auto sx = mid_slices(x);
        auto sh = mid_slices(x_hat);
        Tensor lr, lf;
        std::vector<Tensor> fr, ff;
        for (int p = 0; p < 3; ++p) {
            auto r = ds->forward(sx[p]);
            auto f = ds->forward(sh[p]);
            lr = lr.defined() ? ad::add(lr, r.logit) : r.logit;
            lf = lf.defined() ? ad::add(lf, f.logit) : f.logit;
            for (size_t i = 0; i < r.features.size(); ++i) {
                fr.push_back(r.features[i]);
                ff.push_back(f.features[i]);
            }
        }
        accumulate(ad::scale(lr, 1.0 / 3.0), ad::scale(lf, 1.0 / 3.0), fr, ff);
    }
    if (dv) {
        auto r = dv->forward(x);
        auto f = dv->forward(x_hat);
        accumulate(r.logit, f.logit, r.features, f.features);
    }
    require(out.disc.defined(), ErrorKind::Runtime, "discriminator_losses: no discriminator given");
    return out;
}

TrainResult train_autoencoder(Autoencoder& model, const std::vector<vol::Volume>& patches,
                              const std::filesystem::path& out_dir) {
    const auto& cfg = model.config();
    require(!patches.empty(), ErrorKind::Runtime, "train_autoencoder: empty dataset");

    nn::Adam adam_g(model.generator_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    nn::Adam adam_d(model.discriminator_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    Rng rng(derive_seed(cfg.seed, "autoencoder-train"));

    TrainResult result;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> xs;
        for (int b = 0; b < cfg.batch_size; ++b)
            xs.push_back(volume_to_tensor(patches[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(patches.size()) - 1))]));
        Tensor x = xs.size() == 1 ? xs[0] : ad::concat(xs, 0);

        const bool gan_active = cfg.lambda_gan > 0 && step >= cfg.gan_warmup_steps;

        // generator step
        Tensor z = model.encode(x);
        LatentGrid grid = model.quantize(z);
        Tensor x_hat = model.decode(grid.embedded);
        VqLossTerms vq = vq_losses(x, x_hat, z, grid.embedded_codebook, cfg.alpha);
        Tensor perc = perceptual_loss(x, x_hat, model.perceptual_net());
        GanLossTerms gan = discriminator_losses(x, x_hat, &model.slice_disc(), &model.volume_disc());

        Tensor total = ad::add(vq.recon, ad::add(vq.codebook, vq.commit));
        total = ad::add(total, ad::scale(perc, cfg.lambda_perceptual));
        total = ad::add(total, ad::scale(gan.match, cfg.lambda_match));
        if (gan_active) total = ad::add(total, ad::scale(gan.gan_generator, cfg.lambda_gan));

        adam_g.zero_grad();
        adam_d.zero_grad();
        ad::backward(total);
        adam_g.step();

        LossBreakdown lb;
        lb.recon = vq.recon.item();
        lb.codebook = vq.codebook.item();
        lb.commit = vq.commit.item();
        lb.perceptual = perc.item();
        lb.match = gan.match.item();
        lb.gan_generator = gan.gan_generator.item();
        lb.total = lb.recon + lb.codebook + lb.commit + cfg.lambda_perceptual * lb.perceptual +
                   cfg.lambda_match * lb.match + (gan_active ? cfg.lambda_gan * lb.gan_generator : 0.0);

        // discriminator step on the detached reconstruction
        if (cfg.lambda_gan > 0) {
            Tensor x_hat_d = ad::detach(x_hat);
            GanLossTerms d = discriminator_losses(x, x_hat_d, &model.slice_disc(), &model.volume_disc());
            Tensor d_loss = ad::scale(d.disc, -1.0);  // discriminators maximize Eq. 3
            adam_d.zero_grad();
            adam_g.zero_grad();
            ad::backward(d_loss);
            adam_d.step();
            lb.disc = d.disc.item();
        }

        if (!std::isfinite(lb.total) || !std::isfinite(lb.disc))
            fail_runtime("autoencoder training diverged (NaN loss) at step " + std::to_string(step));
        result.history.push_back(lb);

        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !out_dir.empty())
            model.save(out_dir, json{{"step", step + 1}, {"seed", cfg.seed}});
    }
    if (!out_dir.empty()) model.save(out_dir, json{{"step", cfg.steps}, {"seed", cfg.seed}});
    return result;
}

}  // namespace tsyn::ae
