#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "volcore/morph.hpp"
#include "volcore/volume.hpp"

namespace tsyn::vol {

namespace {

// rotated-ellipsoid inside test, p in mm relative to center
bool inside_ellipsoid(const Vec3& p, const Vec3& semi, const double R[3][3]) {
    double q[3] = {0, 0, 0};
    for (int r = 0; r < 3; ++r) q[r] = R[0][r] * p[0] + R[1][r] * p[1] + R[2][r] * p[2];
    double s = 0;
    for (int r = 0; r < 3; ++r) s += (q[r] / semi[r]) * (q[r] / semi[r]);
    return s <= 1.0;
}

void euler_to_matrix(double ax, double ay, double az, double R[3][3]) {
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    // R = Rz * Ry * Rx
    const double Rz[3][3] = {{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}};
    const double Ry[3][3] = {{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}};
    const double Rx[3][3] = {{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}};
    double T[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            T[i][j] = 0;
            for (int k = 0; k < 3; ++k) T[i][j] += Ry[i][k] * Rx[k][j];
        }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            R[i][j] = 0;
            for (int k = 0; k < 3; ++k) R[i][j] += Rz[i][k] * T[k][j];
        }
}

}  // namespace

PhantomResult make_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    const Index3 shape = spec.grid_shape;
    const Vec3 sp = spec.spacing_mm;
    const std::int64_t n = static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];

    const double R0 = rng.uniform(spec.organ_radius_range_mm[0], spec.organ_radius_range_mm[1]);
    const Vec3 center_mm = {shape[0] / 2 * sp[0], shape[1] / 2 * sp[1], shape[2] / 2 * sp[2]};
    for (int a = 0; a < 3; ++a) {
        const double half_extent = shape[a] / 2 * sp[a];
        require(R0 * 1.3 < half_extent, ErrorKind::Runtime, "organ cannot fit inside grid");
    }

    // radial perturbation: smoothed unit-variance noise
    std::vector<double> perturb(static_cast<size_t>(n));
    for (auto& x : perturb) x = rng.normal();
    const double sig_mm = R0 / 2.0;
    gaussian_smooth_inplace(perturb, shape, {sig_mm / sp[0], sig_mm / sp[1], sig_mm / sp[2]});
    double mean = 0, var = 0;
    for (double x : perturb) mean += x;
    mean /= static_cast<double>(n);
    for (double x : perturb) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    const double inv_std = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;

    VoxelMask organ(shape, sp);
    for (int i = 0; i < shape[0]; ++i)
        for (int j = 0; j < shape[1]; ++j)
            for (int k = 0; k < shape[2]; ++k) {
                const double dx = i * sp[0] - center_mm[0];
                const double dy = j * sp[1] - center_mm[1];
                const double dz = k * sp[2] - center_mm[2];
                const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                const double bump = (perturb[flat(shape, i, j, k)] - mean) * inv_std;
                if (r <= R0 * (1.0 + 0.15 * bump)) organ.at(i, j, k) = 1;
            }
    organ = largest_component(organ);

    VoxelMask lesion(shape, sp);
    if (spec.with_lesion) {
        const double r_les = rng.uniform(spec.lesion_radius_range_mm[0], spec.lesion_radius_range_mm[1]);
        Vec3 semi;
        for (int a = 0; a < 3; ++a) semi[a] = r_les * rng.uniform(0.8, 1.25);
        double R[3][3];
        euler_to_matrix(rng.uniform(0, 3.14159265), rng.uniform(0, 3.14159265), rng.uniform(0, 3.14159265), R);
        const double max_semi = std::max({semi[0], semi[1], semi[2]});

        // candidate centers: organ voxels at least max_semi+1mm from the outside
        std::vector<std::uint8_t> outside(organ.data.size());
        for (size_t i = 0; i < outside.size(); ++i) outside[i] = organ.data[i] ? 0 : 1;
        const auto depth_sq = edt_sq_mm(shape, sp, outside);
        std::vector<std::int64_t> candidates;
        const double need = (max_semi + 1.0) * (max_semi + 1.0);
        for (std::int64_t i = 0; i < n; ++i)
            if (organ.data[i] && depth_sq[i] >= need) candidates.push_back(i);
        require(!candidates.empty(), ErrorKind::Runtime, "lesion cannot fit inside organ");
        const std::int64_t pick = candidates[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
        const int K = shape[2], J = shape[1];
        const int ci = static_cast<int>(pick / (static_cast<std::int64_t>(J) * K));
        const int cj = static_cast<int>((pick / K) % J);
        const int ck = static_cast<int>(pick % K);

        const int ri = static_cast<int>(std::ceil(max_semi / sp[0])) + 1;
        const int rj = static_cast<int>(std::ceil(max_semi / sp[1])) + 1;
        const int rk = static_cast<int>(std::ceil(max_semi / sp[2])) + 1;
        for (int i = std::max(0, ci - ri); i <= std::min(shape[0] - 1, ci + ri); ++i)
            for (int j = std::max(0, cj - rj); j <= std::min(shape[1] - 1, cj + rj); ++j)
                for (int k = std::max(0, ck - rk); k <= std::min(shape[2] - 1, ck + rk); ++k) {
                    const Vec3 p = {(i - ci) * sp[0], (j - cj) * sp[1], (k - ck) * sp[2]};
                    if (inside_ellipsoid(p, semi, R) && organ.at(i, j, k)) lesion.at(i, j, k) = 1;
                }
    }

    // mean HU field with partial-volume smoothing, then iid noise
    std::vector<float> field(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double hu = spec.background_mean_hu;
        if (organ.data[i]) hu = spec.organ_mean_hu;
        if (lesion.data[i]) hu = spec.organ_mean_hu + spec.lesion_contrast_hu;
        field[i] = static_cast<float>(hu);
    }
    gaussian_smooth_inplace(field, shape, {0.8 / sp[0], 0.8 / sp[1], 0.8 / sp[2]});

    Volume volume(shape, sp);
    for (std::int64_t i = 0; i < n; ++i)
        volume.data[i] = field[i] + static_cast<float>(rng.normal() * spec.background_noise_sigma_hu);

    return {std::move(volume), std::move(organ), std::move(lesion)};
}

}  // namespace tsyn::vol
