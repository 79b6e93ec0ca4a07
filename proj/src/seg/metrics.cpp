#include "seg/metrics.hpp"

#include <cmath>

#include "common/error.hpp"
#include "volcore/morph.hpp"

namespace tsyn::seg {

namespace {

void check_grid(const VoxelMask& a, const VoxelMask& b, const char* op) {
    require(a.shape == b.shape, ErrorKind::Runtime, std::string(op) + ": grid mismatch");
}

}  // namespace

double dsc(const VoxelMask& pred, const VoxelMask& gt) {
    check_grid(pred, gt, "dsc");
    std::int64_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        inter += (p && g) ? 1 : 0;
        a += p ? 1 : 0;
        b += g ? 1 : 0;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double nsd(const VoxelMask& pred, const VoxelMask& gt, double tau_mm) {
    check_grid(pred, gt, "nsd");
    require(tau_mm >= 0, ErrorKind::Config, "nsd: tau must be >= 0");
    const bool pe = pred.empty_mask(), ge = gt.empty_mask();
    if (pe && ge) return 1.0;
    if (pe || ge) return 0.0;

    const auto bp = vol::boundary_voxels(pred);
    const auto bg = vol::boundary_voxels(gt);

    std::vector<std::uint8_t> on_bp(pred.data.size(), 0), on_bg(gt.data.size(), 0);
    for (const auto& v : bp) on_bp[vol::flat(pred.shape, v[0], v[1], v[2])] = 1;
    for (const auto& v : bg) on_bg[vol::flat(gt.shape, v[0], v[1], v[2])] = 1;
    const auto d_to_bg = vol::edt_sq_mm(pred.shape, pred.spacing, on_bg);
    const auto d_to_bp = vol::edt_sq_mm(pred.shape, pred.spacing, on_bp);

    const double tau_sq = tau_mm * tau_mm;
    std::int64_t ok_p = 0, ok_g = 0;
    for (const auto& v : bp)
        if (d_to_bg[vol::flat(pred.shape, v[0], v[1], v[2])] <= tau_sq + 1e-9) ++ok_p;
    for (const auto& v : bg)
        if (d_to_bp[vol::flat(gt.shape, v[0], v[1], v[2])] <= tau_sq + 1e-9) ++ok_g;

    const double frac_p = static_cast<double>(ok_p) / static_cast<double>(bp.size());
    const double frac_g = static_cast<double>(ok_g) / static_cast<double>(bg.size());
    return 0.5 * (frac_p + frac_g);
}

SensitivityResult tumor_sensitivity(const VoxelMask& pred, const VoxelMask& gt, double min_overlap_fraction) {
    check_grid(pred, gt, "tumor_sensitivity");
    SensitivityResult r;
    std::vector<int> labels;
    const int n = vol::label_components(gt, labels);
    r.n_gt_tumors = n;
    if (n == 0) {
        r.sensitivity = 1.0;
        return r;
    }
    std::vector<std::int64_t> total(n + 1, 0), covered(n + 1, 0);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i]) continue;
        ++total[labels[i]];
        if (pred.data[i]) ++covered[labels[i]];
    }
    for (int c = 1; c <= n; ++c) {
        const double frac = static_cast<double>(covered[c]) / static_cast<double>(total[c]);
        if (frac >= min_overlap_fraction) ++r.n_detected;
    }
    r.sensitivity = static_cast<double>(r.n_detected) / static_cast<double>(n);
    return r;
}

VoxelMask organ_filter(const VoxelMask& pred, const VoxelMask& organ) {
    check_grid(pred, organ, "organ_filter");
    std::vector<int> labels;
    const int n = vol::label_components(pred, labels);
    std::vector<std::uint8_t> keep(n + 1, 0);
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] && organ.data[i]) keep[labels[i]] = 1;
    VoxelMask out(pred.shape, pred.spacing);
    for (size_t i = 0; i < labels.size(); ++i) out.data[i] = (labels[i] && keep[labels[i]]) ? 1 : 0;
    return out;
}

}  // namespace tsyn::seg
