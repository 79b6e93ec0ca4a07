#include "volcore/morph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

namespace tsyn::vol {

int label_components(const VoxelMask& m, std::vector<int>& labels) {
    const auto n = static_cast<size_t>(m.voxels());
    labels.assign(n, 0);
    int next = 0;
    std::vector<std::int64_t> stack;
    const int I = m.shape[0], J = m.shape[1], K = m.shape[2];
    for (std::int64_t s = 0; s < static_cast<std::int64_t>(n); ++s) {
        if (!m.data[s] || labels[s]) continue;
        ++next;
        labels[s] = next;
        stack.push_back(s);
        while (!stack.empty()) {
            const std::int64_t cur = stack.back();
            stack.pop_back();
            const int k = static_cast<int>(cur % K);
            const int j = static_cast<int>((cur / K) % J);
            const int i = static_cast<int>(cur / (static_cast<std::int64_t>(J) * K));
            const int di[6] = {1, -1, 0, 0, 0, 0};
            const int dj[6] = {0, 0, 1, -1, 0, 0};
            const int dk[6] = {0, 0, 0, 0, 1, -1};
            for (int d = 0; d < 6; ++d) {
                const int ni = i + di[d], nj = j + dj[d], nk = k + dk[d];
                if (ni < 0 || ni >= I || nj < 0 || nj >= J || nk < 0 || nk >= K) continue;
                const std::int64_t ns = flat(m.shape, ni, nj, nk);
                if (m.data[ns] && !labels[ns]) {
                    labels[ns] = next;
                    stack.push_back(ns);
                }
            }
        }
    }
    return next;
}

VoxelMask largest_component(const VoxelMask& m) {
    std::vector<int> labels;
    const int n = label_components(m, labels);
    if (n <= 1) return m;
    std::vector<std::int64_t> counts(n + 1, 0);
    for (int l : labels) ++counts[l];
    int best = 1;
    for (int l = 2; l <= n; ++l)
        if (counts[l] > counts[best]) best = l;
    VoxelMask out(m.shape, m.spacing);
    for (size_t i = 0; i < labels.size(); ++i) out.data[i] = labels[i] == best ? 1 : 0;
    return out;
}

std::vector<Index3> boundary_voxels(const VoxelMask& m) {
    std::vector<Index3> out;
    const int I = m.shape[0], J = m.shape[1], K = m.shape[2];
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j)
            for (int k = 0; k < K; ++k) {
                if (!m.at(i, j, k)) continue;
                bool boundary = i == 0 || i == I - 1 || j == 0 || j == J - 1 || k == 0 || k == K - 1;
                if (!boundary)
                    boundary = !m.at(i - 1, j, k) || !m.at(i + 1, j, k) || !m.at(i, j - 1, k) ||
                               !m.at(i, j + 1, k) || !m.at(i, j, k - 1) || !m.at(i, j, k + 1);
                if (boundary) out.push_back({i, j, k});
            }
    return out;
}

double mask_diameter_mm(const VoxelMask& m) {
    const auto boundary = boundary_voxels(m);
    double best = 0;
    for (size_t a = 0; a < boundary.size(); ++a)
        for (size_t b = a + 1; b < boundary.size(); ++b) {
            double d2 = 0;
            for (int x = 0; x < 3; ++x) {
                const double d = (boundary[a][x] - boundary[b][x]) * m.spacing[x];
                d2 += d * d;
            }
            best = std::max(best, d2);
        }
    return std::sqrt(best);
}

namespace {

// 1D squared distance transform with sample spacing `step` (Felzenszwalb).
void edt_1d(const double* f, double* d, int n, double step) {
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    const double s2 = step * step;
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[k];
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = (q - v[k]) * step;
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace

std::vector<double> edt_sq_mm(const Index3& shape, const Vec3& spacing_mm, const std::vector<std::uint8_t>& inside) {
    const int I = shape[0], J = shape[1], K = shape[2];
    const double INF = 1e30;
    std::vector<double> d(inside.size());
    for (size_t i = 0; i < inside.size(); ++i) d[i] = inside[i] ? 0.0 : INF;

    std::vector<double> line, out;
    // pass along k
    line.resize(K);
    out.resize(K);
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j) {
            double* row = d.data() + flat(shape, i, j, 0);
            edt_1d(row, out.data(), K, spacing_mm[2]);
            std::copy(out.begin(), out.end(), row);
        }
    // pass along j
    line.resize(J);
    out.resize(J);
    for (int i = 0; i < I; ++i)
        for (int k = 0; k < K; ++k) {
            for (int j = 0; j < J; ++j) line[j] = d[flat(shape, i, j, k)];
            edt_1d(line.data(), out.data(), J, spacing_mm[1]);
            for (int j = 0; j < J; ++j) d[flat(shape, i, j, k)] = out[j];
        }
    // pass along i
    line.resize(I);
    out.resize(I);
    for (int j = 0; j < J; ++j)
        for (int k = 0; k < K; ++k) {
            for (int i = 0; i < I; ++i) line[i] = d[flat(shape, i, j, k)];
            edt_1d(line.data(), out.data(), I, spacing_mm[0]);
            for (int i = 0; i < I; ++i) d[flat(shape, i, j, k)] = out[i];
        }
    return d;
}

namespace {

template <typename T>
void smooth_axis(std::vector<T>& field, const Index3& shape, int axis, double sigma) {
    if (sigma <= 0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;

    const int I = shape[0], J = shape[1], K = shape[2];
    const int n_axis = shape[axis];
    std::vector<double> buf(n_axis);
    auto idx = [&](int i, int j, int k) { return flat(shape, i, j, k); };
    const int lim0 = axis == 0 ? 1 : I, lim1 = axis == 1 ? 1 : J, lim2 = axis == 2 ? 1 : K;
    for (int a = 0; a < lim0; ++a)
        for (int b = 0; b < lim1; ++b)
            for (int c = 0; c < lim2; ++c) {
                for (int t = 0; t < n_axis; ++t) {
                    const int i = axis == 0 ? t : a, j = axis == 1 ? t : b, k = axis == 2 ? t : c;
                    buf[t] = static_cast<double>(field[idx(i, j, k)]);
                }
                for (int t = 0; t < n_axis; ++t) {
                    double acc = 0;
                    for (int r = -radius; r <= radius; ++r) {
                        const int s = std::clamp(t + r, 0, n_axis - 1);
                        acc += kernel[r + radius] * buf[s];
                    }
                    const int i = axis == 0 ? t : a, j = axis == 1 ? t : b, k = axis == 2 ? t : c;
                    field[idx(i, j, k)] = static_cast<T>(acc);
                }
            }
}

}  // namespace

void gaussian_smooth_inplace(std::vector<float>& field, const Index3& shape, const Vec3& sigma_vox) {
    for (int axis = 0; axis < 3; ++axis) smooth_axis(field, shape, axis, sigma_vox[axis]);
}

void gaussian_smooth_inplace(std::vector<double>& field, const Index3& shape, const Vec3& sigma_vox) {
    for (int axis = 0; axis < 3; ++axis) smooth_axis(field, shape, axis, sigma_vox[axis]);
}

}  // namespace tsyn::vol
