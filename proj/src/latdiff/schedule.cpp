#include "latdiff/schedule.hpp"

#include <cmath>

#include "common/error.hpp"

namespace tsyn::ldm {

double NoiseSchedule::abar(int t) const {
    require(t >= 0 && t <= T, ErrorKind::Runtime, "schedule: timestep out of range");
    return t == 0 ? 1.0 : alpha_bar[t - 1];
}

void NoiseSchedule::validate() const {
    require(T >= 1, ErrorKind::Config, "schedule: T must be >= 1");
    double prev = 1.0;
    for (int i = 0; i < T; ++i) {
        require(beta[i] > 0 && beta[i] < 1, ErrorKind::Config, "schedule: beta out of (0,1)");
        require(alpha_bar[i] < prev, ErrorKind::Config, "schedule: alpha_bar must be strictly decreasing");
        prev = alpha_bar[i];
    }
}

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
    require(kind == ScheduleKind::Linear, ErrorKind::Config, "schedule: unknown kind");
    require(T >= 1, ErrorKind::Config, "schedule: T must be >= 1");
    require(beta_min > 0 && beta_min <= beta_max && beta_max < 1, ErrorKind::Config,
            "schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        s.beta[i] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / static_cast<double>(T - 1);
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    s.validate();
    return s;
}

Tensor forward_step(const Tensor& z_prev, int t, const NoiseSchedule& s, const Tensor& noise) {
    require(t >= 1 && t <= s.T, ErrorKind::Runtime, "forward_step: t out of range");
    require(z_prev.shape() == noise.shape(), ErrorKind::Runtime, "forward_step: noise shape mismatch");
    const double a = std::sqrt(1.0 - s.beta[t - 1]);
    const double b = std::sqrt(s.beta[t - 1]);
    std::vector<double> v(z_prev.size());
    for (std::int64_t i = 0; i < z_prev.size(); ++i) v[i] = a * z_prev.data()[i] + b * noise.data()[i];
    return Tensor::from_vec(z_prev.shape(), std::move(v));
}

Tensor q_sample(const Tensor& z0, int t, const NoiseSchedule& s, const Tensor& eps) {
    require(t >= 0 && t <= s.T, ErrorKind::Runtime, "q_sample: t out of range");
    require(z0.shape() == eps.shape(), ErrorKind::Runtime, "q_sample: eps shape mismatch");
    const double ab = s.abar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    std::vector<double> v(z0.size());
    for (std::int64_t i = 0; i < z0.size(); ++i) v[i] = a * z0.data()[i] + b * eps.data()[i];
    return Tensor::from_vec(z0.shape(), std::move(v));
}

std::vector<int> respace_steps(int T, int count) {
    require(count >= 1 && count <= T, ErrorKind::Config, "respace: count must be in 1..T");
    std::vector<int> steps;
    for (int i = 1; i <= count; ++i) {
        const int t = static_cast<int>(std::llround(static_cast<double>(i) * T / count));
        if (steps.empty() || t > steps.back()) steps.push_back(std::max(1, t));
    }
    return steps;
}

vol::VoxelMask downsample_mask(const vol::VoxelMask& m, int factor) {
    require(factor >= 1, ErrorKind::Config, "downsample_mask: factor must be >= 1");
    for (int a = 0; a < 3; ++a)
        require(m.shape[a] % factor == 0, ErrorKind::Runtime,
                "downsample_mask: shape not divisible by the compression factor");
    vol::VoxelMask out({m.shape[0] / factor, m.shape[1] / factor, m.shape[2] / factor},
                       {m.spacing[0] * factor, m.spacing[1] * factor, m.spacing[2] * factor});
    for (int i = 0; i < m.shape[0]; ++i)
        for (int j = 0; j < m.shape[1]; ++j)
            for (int k = 0; k < m.shape[2]; ++k)
                if (m.at(i, j, k)) out.at(i / factor, j / factor, k / factor) = 1;
    return out;
}

Tensor gaussian_like(const Tensor& ref, Rng& rng) {
    std::vector<double> v(ref.size());
    for (auto& x : v) x = rng.normal();
    return Tensor::from_vec(ref.shape(), std::move(v));
}

}  // namespace tsyn::ldm
