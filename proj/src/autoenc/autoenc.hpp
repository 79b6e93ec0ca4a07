#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "common/jsonio.hpp"
#include "nn/adam.hpp"
#include "nn/checkpoint.hpp"
#include "nn/modules.hpp"
#include "volcore/volume.hpp"

namespace tsyn::ae {

using ad::Tensor;
using nn::ParamStore;

struct AutoencoderConfig {
    int compression = 4;       // spatial reduction per axis (power of two)
    int codebook_size = 512;   // K; 16384 reproduces the reference setting
    int latent_channels = 4;   // c; 8 reproduces the reference setting
    int base_width = 12;
    int disc_width = 8;
    int perceptual_width = 8;
    double alpha = 0.25;       // commitment coefficient
    double lambda_perceptual = 1.0;
    double lambda_match = 1.0;
    double lambda_gan = 0.1;
    int gan_warmup_steps = 500;
    double lr = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int batch_size = 2;
    int steps = 800;
    int checkpoint_every = 0;  // 0: final only
    std::uint64_t seed = 0;

    static AutoencoderConfig from_json(const json& j);
    json to_json() const;
    void validate() const;
};

struct LossWeights {
    double alpha = 0.25;
    double lambda_perceptual = 1.0;
    double lambda_match = 1.0;
    double lambda_gan = 1.0;
};

struct LossBreakdown {
    double recon = 0;
    double codebook = 0;
    double commit = 0;
    double perceptual = 0;
    double match = 0;
    double gan_generator = 0;
    double disc = 0;
    double total = 0;
};

// Quantizer output: per-position nearest codebook entries plus the two
// gradient views of the embedding (straight-through to the encoder;
// gathered rows for the codebook loss).
struct LatentGrid {
    Tensor continuous;            // [N,c,h,w,d]
    std::vector<int> indices;     // N*h*w*d, position-major
    Tensor embedded;              // straight-through view (decoder input)
    Tensor embedded_codebook;     // gather view (codebook loss)
};

// volume <-> tensor bridges ([1,1,H,W,D])
Tensor volume_to_tensor(const vol::Volume& v);
vol::Volume tensor_to_volume(const Tensor& t, const vol::Vec3& spacing);

struct FeatureNet2d {
    FeatureNet2d() = default;
    FeatureNet2d(ParamStore& store, const std::string& prefix, int width, std::uint64_t seed);
    Tensor forward(const Tensor& x_2d_batch) const;  // [B,1,H,W] -> [B,F,H,W]
    nn::Conv2dLayer c1, c2;
};

struct SliceDiscriminator {
    SliceDiscriminator() = default;
    SliceDiscriminator(ParamStore& store, const std::string& prefix, int width, Rng& rng);
    // slices: [B,1,H,W]; returns scalar logit and per-layer features
    struct Out {
        Tensor logit;
        std::vector<Tensor> features;
    };
    Out forward(const Tensor& slices) const;
    nn::Conv2dLayer c1, c2, c3;
};

struct VolumeDiscriminator {
    VolumeDiscriminator() = default;
    VolumeDiscriminator(ParamStore& store, const std::string& prefix, int width, Rng& rng);
    struct Out {
        Tensor logit;
        std::vector<Tensor> features;
    };
    Out forward(const Tensor& x) const;  // [N,1,A,B,C]
    nn::Conv3dLayer c1, c2, c3;
};

class Autoencoder {
public:
    explicit Autoencoder(const AutoencoderConfig& cfg);

    const AutoencoderConfig& config() const { return cfg_; }

    // x: [N,1,H,W,D], dims divisible by the compression factor
    Tensor encode(const Tensor& x) const;
    LatentGrid quantize(const Tensor& continuous) const;
    // grid latent channels/shape must match the configuration
    Tensor decode(const Tensor& embedded) const;

    Tensor codebook() const { return codebook_; }

    ParamStore& generator_params() { return gen_; }
    ParamStore& discriminator_params() { return disc_; }
    ParamStore& fixed_params() { return fixed_; }

    const FeatureNet2d& perceptual_net() const { return pnet_; }
    SliceDiscriminator& slice_disc() { return ds_; }
    VolumeDiscriminator& volume_disc() { return dv_; }

    void save(const std::filesystem::path& dir, const json& extra) const;
    static Autoencoder load(const std::filesystem::path& dir);

private:
    AutoencoderConfig cfg_;
    ParamStore gen_, disc_, fixed_;
    std::vector<nn::Conv3dLayer> enc_, dec_;
    nn::Conv3dLayer enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<nn::Conv3dLayer> enc_mid_, dec_mid_;
    Tensor codebook_;
    FeatureNet2d pnet_;
    SliceDiscriminator ds_;
    VolumeDiscriminator dv_;
};

// Eq. 1 terms. codebook gets no encoder gradient; commit gets no codebook
// gradient; commit carries the alpha coefficient.
struct VqLossTerms {
    Tensor recon, codebook, commit;
};
VqLossTerms vq_losses(const Tensor& x, const Tensor& x_hat, const Tensor& continuous,
                      const Tensor& embedded_codebook, double alpha);

// Mean L1 between slice-averaged feature maps of the three axis-aligned
// plane stacks, averaged over planes. The per-plane variant returns the
// terms for the WD, HD and HW stacks (slices along H, W, D respectively).
Tensor perceptual_loss(const Tensor& x, const Tensor& x_hat, const FeatureNet2d& net);
std::array<Tensor, 3> perceptual_loss_planes(const Tensor& x, const Tensor& x_hat, const FeatureNet2d& net);

struct GanLossTerms {
    Tensor disc;           // log D(x) + log(1-D(x_hat)), summed over discriminators
    Tensor gan_generator;  // non-saturating -log D(x_hat), summed
    Tensor match;          // feature matching, summed over layers and discriminators
};
GanLossTerms discriminator_losses(const Tensor& x, const Tensor& x_hat, SliceDiscriminator* ds,
                                  VolumeDiscriminator* dv);

// Mid-plane 2D slice per axis: three tensors [N,1,·,·].
std::vector<Tensor> mid_slices(const Tensor& x);

struct TrainResult {
    std::vector<LossBreakdown> history;
};

TrainResult train_autoencoder(Autoencoder& model, const std::vector<vol::Volume>& patches,
                              const std::filesystem::path& out_dir);

}  // namespace tsyn::ae
