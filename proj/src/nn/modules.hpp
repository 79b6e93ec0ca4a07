#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ad/tensor.hpp"
#include "common/rng.hpp"

namespace tsyn::nn {

using ad::Shape;
using ad::Tensor;

// Named parameter registry. Map ordering gives a stable iteration order for
// the optimizer and the checkpoint format.
class ParamStore {
public:
    Tensor add(const std::string& name, Shape shape, std::vector<double> init);
    Tensor& at(const std::string& name);
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::int64_t total_elements() const;
    void zero_grad();

private:
    std::map<std::string, Tensor> params_;
};

std::vector<double> kaiming_init(const Shape& shape, std::int64_t fan_in, Rng& rng, double gain = 1.0);

struct Conv3dLayer {
    Conv3dLayer() = default;
    Conv3dLayer(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k, int stride, int pad,
                Rng& rng);
    Tensor forward(const Tensor& x) const;
    Tensor w, b;
    int stride = 1, pad = 1;
};

struct Conv2dLayer {
    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k, int stride, int pad,
                Rng& rng);
    Tensor forward(const Tensor& x) const;
    Tensor w, b;
    int stride = 1, pad = 1;
};

struct LinearLayer {
    LinearLayer() = default;
    LinearLayer(ParamStore& store, const std::string& name, int in_dim, int out_dim, Rng& rng);
    // x: [B, in] -> [B, out]
    Tensor forward(const Tensor& x) const;
    Tensor w, b;
};

struct GroupNormLayer {
    GroupNormLayer() = default;
    GroupNormLayer(ParamStore& store, const std::string& name, int channels, int groups);
    Tensor forward(const Tensor& x) const;
    Tensor gamma, beta;
    int groups = 1;
};

// Self-attention factorized over a 3D grid: tokens first range over each 2D
// slice (in-plane), then over the depth axis, instead of over the full
// volume. Score matrices therefore hold d*(hw)^2 + hw*d^2 elements per call
// rather than (hwd)^2; `score_elements` instruments exactly that.
struct FactorizedAttention {
    FactorizedAttention() = default;
    FactorizedAttention(ParamStore& store, const std::string& name, int channels, Rng& rng);
    // x: [N,C,A,B,D]; residual output of same shape
    Tensor forward(const Tensor& x) const;

    GroupNormLayer norm;
    LinearLayer q_plane, k_plane, v_plane, o_plane;
    LinearLayer q_depth, k_depth, v_depth, o_depth;
    int channels = 0;

    static std::int64_t score_elements;  // accumulated size of score matrices
    static void reset_instrumentation() { score_elements = 0; }
};

// Standard sinusoidal embedding of an integer timestep.
std::vector<double> sinusoidal_embedding(int t, int dim);

}  // namespace tsyn::nn
