#include "nn/modules.hpp"

#include <cmath>

#include "common/error.hpp"

namespace tsyn::nn {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> init) {
    if (params_.count(name)) fail_runtime("duplicate parameter name: " + name);
    Tensor t = Tensor::param(std::move(shape), std::move(init));
    params_.emplace(name, t);
    return t;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) fail_runtime("unknown parameter: " + name);
    return it->second;
}

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
}

std::vector<double> kaiming_init(const Shape& shape, std::int64_t fan_in, Rng& rng, double gain) {
    const double std = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.normal() * std;
    return v;
}

Conv3dLayer::Conv3dLayer(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k, int stride_,
                         int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    const std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k * k;
    w = store.add(name + ".weight", {out_ch, in_ch, k, k, k}, kaiming_init({out_ch, in_ch, k, k, k}, fan_in, rng));
    b = store.add(name + ".bias", {out_ch}, std::vector<double>(out_ch, 0.0));
}

Tensor Conv3dLayer::forward(const Tensor& x) const { return ad::conv3d(x, w, b, stride, pad); }

Conv2dLayer::Conv2dLayer(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k, int stride_,
                         int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    const std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k;
    w = store.add(name + ".weight", {out_ch, in_ch, k, k}, kaiming_init({out_ch, in_ch, k, k}, fan_in, rng));
    b = store.add(name + ".bias", {out_ch}, std::vector<double>(out_ch, 0.0));
}

Tensor Conv2dLayer::forward(const Tensor& x) const { return ad::conv2d(x, w, b, stride, pad); }

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, int in_dim, int out_dim, Rng& rng) {
    w = store.add(name + ".weight", {in_dim, out_dim}, kaiming_init({in_dim, out_dim}, in_dim, rng));
    b = store.add(name + ".bias", {out_dim}, std::vector<double>(out_dim, 0.0));
}

Tensor LinearLayer::forward(const Tensor& x) const { return ad::add_row_bias(ad::matmul(x, w), b); }

GroupNormLayer::GroupNormLayer(ParamStore& store, const std::string& name, int channels, int groups_)
    : groups(groups_) {
    gamma = store.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    beta = store.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
}

Tensor GroupNormLayer::forward(const Tensor& x) const { return ad::group_norm(x, gamma, beta, groups); }

std::int64_t FactorizedAttention::score_elements = 0;

FactorizedAttention::FactorizedAttention(ParamStore& store, const std::string& name, int ch, Rng& rng)
    : norm(store, name + ".norm", ch, std::min(ch, 8)),
      q_plane(store, name + ".plane.q", ch, ch, rng),
      k_plane(store, name + ".plane.k", ch, ch, rng),
      v_plane(store, name + ".plane.v", ch, ch, rng),
      o_plane(store, name + ".plane.o", ch, ch, rng),
      q_depth(store, name + ".depth.q", ch, ch, rng),
      k_depth(store, name + ".depth.k", ch, ch, rng),
      v_depth(store, name + ".depth.v", ch, ch, rng),
      o_depth(store, name + ".depth.o", ch, ch, rng),
      channels(ch) {}

namespace {

// tokens: [B, T, C]; applies one scaled-dot-product attention with per-stage
// projection weights, returns [B, T, C]
Tensor attend(const Tensor& tokens, const LinearLayer& ql, const LinearLayer& kl, const LinearLayer& vl,
              const LinearLayer& ol, std::int64_t* score_elements) {
    const int B = tokens.shape()[0], T = tokens.shape()[1], C = tokens.shape()[2];
    Tensor flat = ad::reshape(tokens, {B * T, C});
    Tensor q = ad::reshape(ql.forward(flat), {B, T, C});
    Tensor k = ad::reshape(kl.forward(flat), {B, T, C});
    Tensor v = ad::reshape(vl.forward(flat), {B, T, C});
    Tensor kt = ad::permute(k, {0, 2, 1});
    Tensor scores = ad::scale(ad::bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(C)));
    *score_elements += static_cast<std::int64_t>(B) * T * T;
    Tensor attn = ad::softmax_lastdim(scores);
    Tensor out = ad::bmm(attn, v);
    return ad::reshape(ol.forward(ad::reshape(out, {B * T, C})), {B, T, C});
}

}  // namespace

Tensor FactorizedAttention::forward(const Tensor& x) const {
    const Shape& s = x.shape();
    const int N = s[0], C = s[1], A = s[2], B = s[3], D = s[4];

    Tensor h = norm.forward(x);

    // stage 1: attend within each 2D slice (tokens = A*B, batch = N*D)
    Tensor tok_plane = ad::reshape(ad::permute(h, {0, 4, 2, 3, 1}), {N * D, A * B, C});
    Tensor out_plane = attend(tok_plane, q_plane, k_plane, v_plane, o_plane, &score_elements);
    Tensor h1 = ad::permute(ad::reshape(out_plane, {N, D, A, B, C}), {0, 4, 2, 3, 1});

    // stage 2: attend along depth (tokens = D, batch = N*A*B)
    Tensor tok_depth = ad::reshape(ad::permute(h1, {0, 2, 3, 4, 1}), {N * A * B, D, C});
    Tensor out_depth = attend(tok_depth, q_depth, k_depth, v_depth, o_depth, &score_elements);
    Tensor h2 = ad::permute(ad::reshape(out_depth, {N, A, B, D, C}), {0, 4, 1, 2, 3});

    return ad::add(x, h2);
}

std::vector<double> sinusoidal_embedding(int t, int dim) {
    std::vector<double> v(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
        v[i] = std::sin(t * freq);
        v[half + i] = std::cos(t * freq);
    }
    return v;
}

}  // namespace tsyn::nn
