#pragma once

#include <filesystem>
#include <vector>

#include "common/jsonio.hpp"
#include "nn/checkpoint.hpp"
#include "nn/modules.hpp"

namespace tsyn::ldm {

using ad::Tensor;
using nn::ParamStore;

struct DenoiserConfig {
    int latent_channels = 4;
    int base_width = 16;
    int time_dim = 32;
    bool attention = true;  // factorized attention at the coarse level
    std::uint64_t seed = 0;

    static DenoiserConfig from_json(const json& j);
    json to_json() const;
};

struct DiffusionCondition;

// 3D U-Net over the latent grid: two resolution levels, timestep embedding
// added per block, factorized self-attention at the coarse level. Inputs
// are concatenated channelwise as [z_t, healthy, mask].
class DenoiserUNet {
public:
    explicit DenoiserUNet(const DenoiserConfig& cfg);

    Tensor forward(const Tensor& z_t, const DiffusionCondition& cond, int t) const;

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const nn::FactorizedAttention& attention() const { return attn_; }

    void save(const std::filesystem::path& dir, const json& extra) const;
    static DenoiserUNet load(const std::filesystem::path& dir);

private:
    struct ResBlock {
        ResBlock() = default;
        ResBlock(ParamStore& store, const std::string& name, int in_ch, int out_ch, int time_dim, Rng& rng);
        Tensor forward(const Tensor& x, const Tensor& emb) const;
        nn::GroupNormLayer n1, n2;
        nn::Conv3dLayer c1, c2, skip;
        nn::LinearLayer t_proj;
        bool has_skip = false;
    };

    DenoiserConfig cfg_;
    ParamStore params_;
    nn::Conv3dLayer conv_in_, down_, conv_out_;
    ResBlock block0_, block1_, block_mid_, block_up_;
    nn::Conv3dLayer up_conv_;
    nn::FactorizedAttention attn_;
    nn::LinearLayer t_mlp1_, t_mlp2_;
    nn::GroupNormLayer norm_out_;
};

}  // namespace tsyn::ldm
