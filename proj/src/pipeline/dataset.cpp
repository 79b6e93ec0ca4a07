#include "pipeline/dataset.hpp"

#include <algorithm>
#include <cstdlib>

#include "common/error.hpp"

namespace tsyn::pipe {

namespace {

std::optional<fs::path> find_file(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        fs::path p = dir / (stem + ext);
        if (fs::exists(p)) return p;
    }
    return std::nullopt;
}

}  // namespace

std::vector<CasePaths> discover_cases(const fs::path& dir) {
    require(fs::exists(dir), ErrorKind::Io, "missing data directory: " + dir.string());
    std::vector<CasePaths> cases;
    auto try_add = [&](const fs::path& d, const std::string& id) {
        auto vol_path = find_file(d, "volume");
        if (!vol_path) return;
        CasePaths c;
        c.id = id;
        c.volume = *vol_path;
        c.organ = find_file(d, "organ");
        c.lesion = find_file(d, "lesion");
        cases.push_back(std::move(c));
    };
    try_add(dir, dir.filename().string());
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) subdirs.push_back(e.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& d : subdirs) try_add(d, d.filename().string());
    require(!cases.empty(), ErrorKind::Io, "no cases (volume.nii[.gz]) found under " + dir.string());
    return cases;
}

LoadedCase load_case(const CasePaths& paths) {
    LoadedCase c;
    c.id = paths.id;
    c.volume = vol::load_volume(paths.volume);
    if (paths.organ) c.organ = vol::load_mask(*paths.organ);
    if (paths.lesion) c.lesion = vol::load_mask(*paths.lesion);
    return c;
}

void window_case(LoadedCase& c, const vol::WindowSpec& w) { c.volume = vol::window_normalize(c.volume, w); }

void write_phantom_case(const fs::path& dir, const vol::PhantomSpec& spec) {
    fs::create_directories(dir);
    vol::PhantomResult ph = vol::make_phantom(spec);
    vol::save_volume(ph.volume, dir / "volume.nii.gz");
    vol::save_mask(ph.organ, ph.volume, dir / "organ.nii.gz");
    vol::save_mask(ph.lesion, ph.volume, dir / "lesion.nii.gz");
    json meta;
    meta["spec"] = phantom_spec_to_json(spec);
    meta["seed"] = spec.seed;
    save_json_file(meta, dir / "meta.json");
}

vol::WindowSpec window_from_json(const json& j, const char* context) {
    vol::WindowSpec w;
    JsonReader r(j, context);
    w.lo = r.get("lo", w.lo);
    w.hi = r.get("hi", w.hi);
    w.out_lo = r.get("out_lo", w.out_lo);
    w.out_hi = r.get("out_hi", w.out_hi);
    r.finish();
    w.validate();
    return w;
}

json window_to_json(const vol::WindowSpec& w) {
    return json{{"lo", w.lo}, {"hi", w.hi}, {"out_lo", w.out_lo}, {"out_hi", w.out_hi}};
}

vol::PhantomSpec phantom_spec_from_json(const json& j) {
    vol::PhantomSpec s;
    JsonReader r(j, "phantom spec");
    if (r.has("grid_shape")) {
        const auto g = r.require<std::array<int, 3>>("grid_shape");
        s.grid_shape = {g[0], g[1], g[2]};
    }
    if (r.has("spacing_mm")) {
        const auto g = r.require<std::array<double, 3>>("spacing_mm");
        s.spacing_mm = {g[0], g[1], g[2]};
    }
    s.organ_radius_range_mm = r.get("organ_radius_range_mm", s.organ_radius_range_mm);
    s.background_mean_hu = r.get("background_mean_hu", s.background_mean_hu);
    s.background_noise_sigma_hu = r.get("background_noise_sigma_hu", s.background_noise_sigma_hu);
    s.organ_mean_hu = r.get("organ_mean_hu", s.organ_mean_hu);
    s.lesion_contrast_hu = r.get("lesion_contrast_hu", s.lesion_contrast_hu);
    s.with_lesion = r.get("with_lesion", s.with_lesion);
    s.lesion_radius_range_mm = r.get("lesion_radius_range_mm", s.lesion_radius_range_mm);
    s.seed = r.get("seed", s.seed);
    r.finish();
    s.validate();
    return s;
}

json phantom_spec_to_json(const vol::PhantomSpec& s) {
    return json{{"grid_shape", s.grid_shape},
                {"spacing_mm", s.spacing_mm},
                {"organ_radius_range_mm", s.organ_radius_range_mm},
                {"background_mean_hu", s.background_mean_hu},
                {"background_noise_sigma_hu", s.background_noise_sigma_hu},
                {"organ_mean_hu", s.organ_mean_hu},
                {"lesion_contrast_hu", s.lesion_contrast_hu},
                {"with_lesion", s.with_lesion},
                {"lesion_radius_range_mm", s.lesion_radius_range_mm},
                {"seed", s.seed}};
}

void RunManifest::write(const fs::path& dir) const {
    json m;
    m["run_id"] = run_id;
    m["config_hash"] = config_hash;
    m["artifacts"] = artifacts;
    m["metrics"] = metrics;
    m["timings"] = timings;
    m["version"] = version;
    save_json_file(m, dir / "manifest.json");
}

std::string tool_version() { return "tumorsynth 0.1.0"; }

std::optional<fs::path> cache_lookup(const std::string& key) {
    const char* root = std::getenv("LLL_CACHE_DIR");
    if (!root || !*root) return std::nullopt;
    fs::path dir = fs::path(root) / key;
    if (fs::exists(dir / "manifest.json")) return dir;
    return std::nullopt;
}

void copy_dir(const fs::path& from, const fs::path& to) {
    fs::create_directories(to);
    for (const auto& e : fs::recursive_directory_iterator(from)) {
        const fs::path rel = fs::relative(e.path(), from);
        if (e.is_directory())
            fs::create_directories(to / rel);
        else
            fs::copy_file(e.path(), to / rel, fs::copy_options::overwrite_existing);
    }
}

void cache_store(const std::string& key, const fs::path& src_dir) {
    const char* root = std::getenv("LLL_CACHE_DIR");
    if (!root || !*root) return;
    copy_dir(src_dir, fs::path(root) / key);
}

}  // namespace tsyn::pipe
