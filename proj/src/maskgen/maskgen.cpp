#include "maskgen/maskgen.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "volcore/morph.hpp"

namespace tsyn::mg {

std::string to_string(SizeClass c) {
    switch (c) {
        case SizeClass::Early:
            return "early";
        case SizeClass::Medium:
            return "medium";
        default:
            return "large";
    }
}

SizeClass size_class_from_string(const std::string& s) {
    if (s == "early") return SizeClass::Early;
    if (s == "medium") return SizeClass::Medium;
    if (s == "large") return SizeClass::Large;
    fail_config("unknown size class '" + s + "'");
}

json TumorSpec::to_json() const {
    return json{{"size_class", to_string(size_class)},
                {"diameter_mm", diameter_mm},
                {"semi_axes_mm", semi_axes_mm},
                {"euler_rad", euler_rad},
                {"deform_sigma_mm", deform_sigma_mm},
                {"deform_magnitude_mm", deform_magnitude_mm},
                {"seed", seed}};
}

MaskPolicy MaskPolicy::early_default() {
    MaskPolicy p;
    p.classes.push_back({SizeClass::Early, ClassPolicy{6.0, 16.0, 1.0, 1.0}});
    return p;
}

MaskPolicy MaskPolicy::from_json(const json& j) {
    MaskPolicy p;
    JsonReader r(j, "mask policy");
    p.aspect_ratio_max = r.get("aspect_ratio_max", p.aspect_ratio_max);
    p.deform_sigma_mm = r.get("deform_sigma_mm", p.deform_sigma_mm);
    p.deform_magnitude_mm = r.get("deform_magnitude_mm", p.deform_magnitude_mm);
    json classes = r.child("classes", true);
    r.finish();
    for (auto it = classes.begin(); it != classes.end(); ++it) {
        const SizeClass c = size_class_from_string(it.key());
        JsonReader cr(it.value(), "mask policy class '" + it.key() + "'");
        ClassPolicy cp;
        const auto range = cr.require<std::array<double, 2>>("diameter_mm");
        cp.diameter_lo_mm = range[0];
        cp.diameter_hi_mm = range[1];
        cp.weight = cr.get("weight", 1.0);
        cp.containment = cr.get("containment", c == SizeClass::Large ? 0.8 : 1.0);
        cr.finish();
        p.classes.push_back({c, cp});
    }
    p.validate();
    return p;
}

json MaskPolicy::to_json() const {
    json jclasses = json::object();
    for (const auto& [c, cp] : classes) {
        jclasses[to_string(c)] = json{{"diameter_mm", std::array<double, 2>{cp.diameter_lo_mm, cp.diameter_hi_mm}},
                                      {"weight", cp.weight},
                                      {"containment", cp.containment}};
    }
    return json{{"classes", jclasses},
                {"aspect_ratio_max", aspect_ratio_max},
                {"deform_sigma_mm", deform_sigma_mm},
                {"deform_magnitude_mm", deform_magnitude_mm}};
}

void MaskPolicy::validate() const {
    require(!classes.empty(), ErrorKind::Config, "mask policy: no size classes declared");
    require(aspect_ratio_max >= 1.0, ErrorKind::Config, "mask policy: aspect_ratio_max must be >= 1");
    require(deform_magnitude_mm >= 0 && deform_sigma_mm > 0, ErrorKind::Config, "mask policy: bad deform params");
    double wsum = 0;
    for (const auto& [c, cp] : classes) {
        require(cp.diameter_lo_mm > 0 && cp.diameter_hi_mm >= cp.diameter_lo_mm, ErrorKind::Config,
                "mask policy: bad diameter range for class " + to_string(c));
        require(cp.weight >= 0, ErrorKind::Config, "mask policy: negative class weight");
        require(cp.containment > 0 && cp.containment <= 1.0, ErrorKind::Config,
                "mask policy: containment must be in (0,1]");
        if (c == SizeClass::Early)
            require(cp.diameter_hi_mm < 20.0, ErrorKind::Config,
                    "mask policy: early-class diameters must stay below 20 mm");
        wsum += cp.weight;
    }
    require(wsum > 0, ErrorKind::Config, "mask policy: all class weights are zero");
}

const ClassPolicy& MaskPolicy::for_class(SizeClass c) const {
    for (const auto& [cc, cp] : classes)
        if (cc == c) return cp;
    fail_config("mask policy does not declare class " + to_string(c));
}

TumorSpec sample_tumor_spec(const MaskPolicy& policy, Rng& rng) {
    policy.validate();
    double wsum = 0;
    for (const auto& [c, cp] : policy.classes) wsum += cp.weight;
    double pick = rng.uniform() * wsum;
    const auto* chosen = &policy.classes.front();
    for (const auto& entry : policy.classes) {
        pick -= entry.second.weight;
        if (pick <= 0) {
            chosen = &entry;
            break;
        }
    }

    TumorSpec spec;
    spec.size_class = chosen->first;
    spec.diameter_mm = rng.uniform(chosen->second.diameter_lo_mm, chosen->second.diameter_hi_mm);
    const double semi_major = spec.diameter_mm / 2.0;
    spec.semi_axes_mm = {semi_major, semi_major / rng.uniform(1.0, policy.aspect_ratio_max),
                         semi_major / rng.uniform(1.0, policy.aspect_ratio_max)};
    spec.euler_rad = {rng.uniform(0.0, 3.141592653589793), rng.uniform(0.0, 3.141592653589793),
                      rng.uniform(0.0, 3.141592653589793)};
    spec.deform_sigma_mm = policy.deform_sigma_mm;
    spec.deform_magnitude_mm = policy.deform_magnitude_mm;
    spec.seed = rng.next_u64();
    return spec;
}

namespace {

void euler_to_matrix(const Vec3& e, double R[3][3]) {
    const double cx = std::cos(e[0]), sx = std::sin(e[0]);
    const double cy = std::cos(e[1]), sy = std::sin(e[1]);
    const double cz = std::cos(e[2]), sz = std::sin(e[2]);
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

VoxelMask rasterize_ellipsoid(const TumorSpec& spec, Index3 grid_shape, Index3 center, Vec3 spacing_mm) {
    for (int a = 0; a < 3; ++a)
        require(center[a] >= 0 && center[a] < grid_shape[a], ErrorKind::Config,
                "rasterize_ellipsoid: center outside grid");
    double R[3][3];
    euler_to_matrix(spec.euler_rad, R);
    VoxelMask out(grid_shape, spacing_mm);
    const double max_semi = std::max({spec.semi_axes_mm[0], spec.semi_axes_mm[1], spec.semi_axes_mm[2]});
    Index3 lo, hi;
    for (int a = 0; a < 3; ++a) {
        const int r = static_cast<int>(std::ceil(max_semi / spacing_mm[a])) + 1;
        lo[a] = std::max(0, center[a] - r);
        hi[a] = std::min(grid_shape[a] - 1, center[a] + r);
    }
    for (int i = lo[0]; i <= hi[0]; ++i)
        for (int j = lo[1]; j <= hi[1]; ++j)
            for (int k = lo[2]; k <= hi[2]; ++k) {
                const double p[3] = {(i - center[0]) * spacing_mm[0], (j - center[1]) * spacing_mm[1],
                                     (k - center[2]) * spacing_mm[2]};
                double q[3];
                for (int r2 = 0; r2 < 3; ++r2) q[r2] = R[0][r2] * p[0] + R[1][r2] * p[1] + R[2][r2] * p[2];
                double s = 0;
                for (int r2 = 0; r2 < 3; ++r2) s += (q[r2] / spec.semi_axes_mm[r2]) * (q[r2] / spec.semi_axes_mm[r2]);
                if (s <= 1.0) out.at(i, j, k) = 1;
            }
    return out;
}

VoxelMask elastic_deform(const VoxelMask& mask, const TumorSpec& spec, Rng& rng) {
    if (spec.deform_magnitude_mm <= 0) return mask;
    const Index3 shape = mask.shape;
    const Vec3 sp = mask.spacing;
    const std::int64_t n = mask.voxels();

    for (int attempt = 0; attempt < 5; ++attempt) {
        // smoothed white-noise displacement field, one channel per axis
        std::array<std::vector<double>, 3> disp;
        for (int a = 0; a < 3; ++a) {
            disp[a].resize(static_cast<size_t>(n));
            for (auto& x : disp[a]) x = rng.normal();
            vol::gaussian_smooth_inplace(disp[a], shape,
                                    {spec.deform_sigma_mm / sp[0], spec.deform_sigma_mm / sp[1],
                                     spec.deform_sigma_mm / sp[2]});
            double mean = 0, var = 0;
            for (double x : disp[a]) mean += x;
            mean /= static_cast<double>(n);
            for (double x : disp[a]) var += (x - mean) * (x - mean);
            var /= static_cast<double>(n);
            const double scale = var > 1e-12 ? spec.deform_magnitude_mm / std::sqrt(var) : 0.0;
            for (auto& x : disp[a]) x = (x - mean) * scale;
        }

        VoxelMask out(shape, sp);
        for (int i = 0; i < shape[0]; ++i)
            for (int j = 0; j < shape[1]; ++j)
                for (int k = 0; k < shape[2]; ++k) {
                    const std::int64_t s = vol::flat(shape, i, j, k);
                    const int si = static_cast<int>(std::llround(i - disp[0][s] / sp[0]));
                    const int sj = static_cast<int>(std::llround(j - disp[1][s] / sp[1]));
                    const int sk = static_cast<int>(std::llround(k - disp[2][s] / sp[2]));
                    if (si < 0 || si >= shape[0] || sj < 0 || sj >= shape[1] || sk < 0 || sk >= shape[2]) continue;
                    out.at(i, j, k) = mask.at(si, sj, sk);
                }

        // accept only volume-plausible single-component warps
        std::vector<int> labels;
        const double ratio = static_cast<double>(out.count()) / static_cast<double>(mask.count());
        if (ratio >= 0.75 && ratio <= 1.25 && out.count() > 0 && vol::label_components(out, labels) == 1)
            return out;
    }
    return mask;  // degrade gracefully
}

VoxelMask place_in_organ(const VoxelMask& tumor, const VoxelMask& organ, Rng& rng, double containment) {
    require(!organ.empty_mask(), ErrorKind::Runtime, "place_in_organ: organ mask is empty");
    require(containment > 0 && containment <= 1.0, ErrorKind::Config,
            "place_in_organ: containment must be in (0,1]");

    std::vector<Index3> tumor_voxels;
    Index3 tlo{1 << 30, 1 << 30, 1 << 30}, thi{-1, -1, -1};
    for (int i = 0; i < tumor.shape[0]; ++i)
        for (int j = 0; j < tumor.shape[1]; ++j)
            for (int k = 0; k < tumor.shape[2]; ++k)
                if (tumor.at(i, j, k)) {
                    tumor_voxels.push_back({i, j, k});
                    tlo = {std::min(tlo[0], i), std::min(tlo[1], j), std::min(tlo[2], k)};
                    thi = {std::max(thi[0], i), std::max(thi[1], j), std::max(thi[2], k)};
                }
    require(!tumor_voxels.empty(), ErrorKind::Runtime, "place_in_organ: tumor mask is empty");
    const Index3 tcenter = {(tlo[0] + thi[0]) / 2, (tlo[1] + thi[1]) / 2, (tlo[2] + thi[2]) / 2};

    std::vector<std::int64_t> organ_voxels;
    for (std::int64_t s = 0; s < organ.voxels(); ++s)
        if (organ.data[s]) organ_voxels.push_back(s);

    const int I = organ.shape[0], J = organ.shape[1], K = organ.shape[2];
    const int max_tries = 500;
    for (int t = 0; t < max_tries; ++t) {
        const std::int64_t pick =
            organ_voxels[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(organ_voxels.size()) - 1))];
        const int ci = static_cast<int>(pick / (static_cast<std::int64_t>(J) * K));
        const int cj = static_cast<int>((pick / K) % J);
        const int ck = static_cast<int>(pick % K);
        const int di = ci - tcenter[0], dj = cj - tcenter[1], dk = ck - tcenter[2];

        std::int64_t inside = 0;
        for (const auto& v : tumor_voxels) {
            const int i = v[0] + di, j = v[1] + dj, k = v[2] + dk;
            if (i >= 0 && i < I && j >= 0 && j < J && k >= 0 && k < K && organ.at(i, j, k)) ++inside;
        }
        if (static_cast<double>(inside) / static_cast<double>(tumor_voxels.size()) + 1e-12 < containment) continue;

        VoxelMask placed(organ.shape, organ.spacing);
        for (const auto& v : tumor_voxels) {
            const int i = v[0] + di, j = v[1] + dj, k = v[2] + dk;
            if (i >= 0 && i < I && j >= 0 && j < J && k >= 0 && k < K) placed.at(i, j, k) = 1;
        }
        // grid clipping must not split the tumor
        std::vector<int> labels;
        if (placed.count() == 0 || vol::label_components(placed, labels) != 1) continue;
        return placed;
    }
    fail_runtime("place_in_organ: no feasible placement after " + std::to_string(max_tries) + " tries");
}

GeneratedMask generate_tumor_mask(const VoxelMask& organ, const MaskPolicy& policy, Rng& rng) {
    const Index3 shape = organ.shape;
    const Index3 center = {shape[0] / 2, shape[1] / 2, shape[2] / 2};
    std::string last_error = "no attempts made";
    for (int attempt = 0; attempt < 10; ++attempt) {
        TumorSpec spec = sample_tumor_spec(policy, rng);
        VoxelMask raster = rasterize_ellipsoid(spec, shape, center, organ.spacing);
        if (raster.empty_mask()) {
            last_error = "rasterized ellipsoid empty (semi-axes below voxel size)";
            continue;
        }
        VoxelMask shaped = attempt >= 7 ? raster : elastic_deform(raster, spec, rng);
        // the early class carries a hard diameter ceiling
        if (spec.size_class == SizeClass::Early && vol::mask_diameter_mm(shaped) >= 20.0) {
            shaped = raster;
            if (vol::mask_diameter_mm(shaped) >= 20.0) {
                last_error = "early tumor exceeded the 20 mm ceiling";
                continue;
            }
        }
        try {
            VoxelMask placed = place_in_organ(shaped, organ, rng, policy.for_class(spec.size_class).containment);
            return {std::move(placed), spec};
        } catch (const Error& e) {
            last_error = e.what();
        }
    }
    fail_runtime("generate_tumor_mask: " + last_error);
}

}  // namespace tsyn::mg
