#include "pipeline/commands.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "autoenc/autoenc.hpp"
#include "common/error.hpp"
#include "common/parallel.hpp"
#include "featlab/classify.hpp"
#include "featlab/features.hpp"
#include "latdiff/diffusion.hpp"
#include "maskgen/maskgen.hpp"
#include "pipeline/dataset.hpp"
#include "seg/metrics.hpp"
#include "seg/segnet.hpp"
#include "synth/synth.hpp"

namespace tsyn::pipe {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

json load_json_or_object(const json& v, const char* what) {
    if (v.is_object()) return v;
    if (v.is_string()) return load_json_file(v.get<std::string>());
    fail_config(std::string(what) + " must be a JSON object or a path to one");
}

struct Run {
    fs::path out;
    json config;
    RunManifest manifest;
    Clock::time_point start = Clock::now();

    Run(const std::string& command, const fs::path& out_dir, const json& opts) : out(out_dir) {
        fs::create_directories(out);
        config = opts;
        manifest.config_hash = json_hash_hex(opts);
        manifest.run_id = command + "-" + manifest.config_hash.substr(0, 8);
        manifest.version = tool_version();
        save_json_file(config, out / "config.json");
        manifest.artifacts.push_back("config.json");
    }

    void artifact(const std::string& rel) { manifest.artifacts.push_back(rel); }

    json finish() {
        manifest.timings["total_seconds"] = seconds_since(start);
        manifest.artifacts.push_back("manifest.json");
        manifest.write(out);
        json summary;
        summary["run_id"] = manifest.run_id;
        summary["out"] = out.string();
        summary["metrics"] = manifest.metrics;
        return summary;
    }
};

vol::WindowSpec window_opt(JsonReader& r, const char* key, vol::WindowSpec fallback) {
    if (!r.has(key)) {
        r.get(key, json::object());  // mark as seen
        return fallback;
    }
    return window_from_json(r.child(key), key);
}

// windows that the desk pipeline defaults to: [-175,250] HU mapped to
// [-1,1] for the generative stages and [0,1] for segmentation
vol::WindowSpec default_ae_window() { return vol::WindowSpec{-175.0, 250.0, -1.0, 1.0}; }
vol::WindowSpec default_seg_window() { return vol::WindowSpec{-175.0, 250.0, 0.0, 1.0}; }

vol::Volume remap_unit(const vol::Volume& v) {
    // [-1,1] -> [0,1]
    return vol::window_normalize(v, vol::WindowSpec{-1.0, 1.0, 0.0, 1.0});
}

vol::Index3 index3(const std::array<int, 3>& a) { return {a[0], a[1], a[2]}; }

struct SynthModels {
    ae::Autoencoder ae_model;
    ldm::DenoiserUNet denoiser;
    ldm::NoiseSchedule schedule;
};

SynthModels load_models(const fs::path& ae_dir, const fs::path& diff_dir) {
    json diff_manifest = nn::read_checkpoint_manifest(diff_dir);
    ldm::DiffusionTrainConfig dc = ldm::DiffusionTrainConfig::from_json(diff_manifest.at("train"));
    return SynthModels{ae::Autoencoder::load(ae_dir), ldm::DenoiserUNet::load(diff_dir), dc.schedule()};
}

}  // namespace

json cmd_phantom_gen(const json& opts) {
    JsonReader r(opts, "phantom-gen");
    json spec_json = load_json_or_object(r.require<json>("spec"), "spec");
    const fs::path out = r.require<std::string>("out");
    const int count = r.get("count", 1);
    const std::uint64_t seed_override = r.get("seed", static_cast<std::uint64_t>(0));
    const bool has_seed = r.has("seed");
    r.finish();

    vol::PhantomSpec base = phantom_spec_from_json(spec_json);
    if (has_seed) base.seed = seed_override;

    Run run("phantom-gen", out, opts);
    if (count == 1) {
        write_phantom_case(out, base);
        for (const char* f : {"volume.nii.gz", "organ.nii.gz", "lesion.nii.gz", "meta.json"}) run.artifact(f);
    } else {
        for (int i = 0; i < count; ++i) {
            vol::PhantomSpec spec = base;
            spec.seed = derive_seed(base.seed, "phantom-" + std::to_string(i));
            std::ostringstream name;
            name << "case_" << std::setw(3) << std::setfill('0') << i;
            write_phantom_case(out / name.str(), spec);
            run.artifact(name.str());
        }
    }
    run.manifest.metrics["cases"] = count;
    return run.finish();
}

json cmd_preprocess(const json& opts) {
    JsonReader r(opts, "preprocess");
    const fs::path in = r.require<std::string>("in");
    const fs::path out = r.require<std::string>("out");
    const std::string axcodes = r.get<std::string>("axcodes", "RAS");
    const double spacing = r.get("spacing", 1.0);
    const vol::WindowSpec window = window_opt(r, "window", default_ae_window());
    r.finish();
    require(vol::valid_axcodes(axcodes), ErrorKind::Config, "preprocess: invalid axcodes '" + axcodes + "'");

    Run run("preprocess", out, opts);
    auto cases = discover_cases(in);
    for (const auto& c : cases) {
        const fs::path case_out = cases.size() == 1 && c.id == in.filename().string() ? out : out / c.id;
        fs::create_directories(case_out);
        vol::Volume v = vol::load_volume(c.volume);
        v = vol::reorient(v, axcodes);
        v = vol::resample_isotropic(v, spacing, vol::Interp::Linear);
        v = vol::window_normalize(v, window);
        vol::save_volume(v, case_out / "volume.nii.gz");
        const std::vector<std::pair<std::string, std::optional<fs::path>>> masks = {{"organ", c.organ},
                                                                                    {"lesion", c.lesion}};
        for (const auto& [name, path] : masks) {
            if (!path) continue;
            vol::Volume m = vol::load_volume(*path);
            m = vol::reorient(m, axcodes);
            m = vol::resample_isotropic(m, spacing, vol::Interp::Nearest);
            vol::VoxelMask mask(m.shape, m.spacing);
            for (size_t i = 0; i < m.data.size(); ++i) mask.data[i] = m.data[i] != 0.0f ? 1 : 0;
            vol::save_mask(mask, v, case_out / (name + ".nii.gz"));
        }
        run.artifact(c.id);
    }
    run.manifest.metrics["cases"] = cases.size();
    return run.finish();
}

json cmd_train_ae(const json& opts) {
    JsonReader r(opts, "train-ae");
    const fs::path data = r.require<std::string>("data");
    const fs::path out = r.require<std::string>("out");
    ae::AutoencoderConfig cfg = ae::AutoencoderConfig::from_json(r.child("config"));
    const vol::WindowSpec window = window_opt(r, "window", default_ae_window());
    const auto patch = r.get("patch_size", std::array<int, 3>{32, 32, 32});
    const int patches_per_volume = r.get("patches_per_volume", 4);
    const double organ_crop_ratio = r.get("organ_crop_ratio", 0.7);
    if (r.has("seed")) cfg.seed = r.require<std::uint64_t>("seed");
    r.finish();

    Run run("train-ae", out, opts);
    const std::string cache_key = "ae-" + json_hash_hex(opts);
    if (auto cached = cache_lookup(cache_key)) {
        copy_dir(*cached, out / "checkpoint");
        run.artifact("checkpoint");
        run.manifest.metrics["cache_hit"] = true;
        return run.finish();
    }

    auto cases = discover_cases(data);
    Rng rng(derive_seed(cfg.seed, "ae-patches"));
    std::vector<vol::Volume> patches;
    for (const auto& cp : cases) {
        LoadedCase c = load_case(cp);
        window_case(c, window);
        for (int p = 0; p < patches_per_volume; ++p) {
            const vol::VoxelMask* bias = c.organ ? &*c.organ : nullptr;
            const auto center = vol::sample_patch_center(c.volume.shape, bias, organ_crop_ratio, rng);
            patches.push_back(vol::crop_patch(c.volume, center, index3(patch), window.out_lo));
        }
    }

    ae::Autoencoder model(cfg);
    auto result = ae::train_autoencoder(model, patches, out / "checkpoint");
    model.save(out / "checkpoint", json{{"step", cfg.steps}, {"seed", cfg.seed}, {"window", window_to_json(window)}});
    run.artifact("checkpoint");
    if (!result.history.empty()) {
        run.manifest.metrics["first_recon"] = result.history.front().recon;
        run.manifest.metrics["final_recon"] = result.history.back().recon;
        run.manifest.metrics["final_total"] = result.history.back().total;
    }
    run.manifest.metrics["train_patches"] = patches.size();
    cache_store(cache_key, out / "checkpoint");
    return run.finish();
}

json cmd_train_diff(const json& opts) {
    JsonReader r(opts, "train-diff");
    const fs::path ae_dir = r.require<std::string>("ae");
    const fs::path data = r.require<std::string>("data");
    const fs::path out = r.require<std::string>("out");
    ldm::DiffusionTrainConfig cfg = ldm::DiffusionTrainConfig::from_json(r.child("config"));
    const vol::WindowSpec window = window_opt(r, "window", default_ae_window());
    const auto patch = r.get("patch_size", std::array<int, 3>{32, 32, 32});
    const int max_cases = r.get("max_cases", 0);  // 0: all
    if (r.has("seed")) cfg.seed = r.require<std::uint64_t>("seed");
    r.finish();

    Run run("train-diff", out, opts);
    const std::string cache_key = "diff-" + json_hash_hex(opts);
    if (auto cached = cache_lookup(cache_key)) {
        copy_dir(*cached, out / "checkpoint");
        run.artifact("checkpoint");
        run.manifest.metrics["cache_hit"] = true;
        return run.finish();
    }

    ae::Autoencoder ae_model = ae::Autoencoder::load(ae_dir);
    cfg.net.latent_channels = ae_model.config().latent_channels;

    auto cases = discover_cases(data);
    if (max_cases > 0 && static_cast<int>(cases.size()) > max_cases) cases.resize(max_cases);

    std::vector<ldm::LatentSample> dataset;
    for (const auto& cp : cases) {
        LoadedCase c = load_case(cp);
        if (!c.lesion || c.lesion->empty_mask()) continue;
        window_case(c, window);
        // tumor-centered patch
        vol::Index3 centroid{0, 0, 0};
        std::int64_t n = 0;
        for (int i = 0; i < c.lesion->shape[0]; ++i)
            for (int j = 0; j < c.lesion->shape[1]; ++j)
                for (int k = 0; k < c.lesion->shape[2]; ++k)
                    if (c.lesion->at(i, j, k)) {
                        centroid[0] += i;
                        centroid[1] += j;
                        centroid[2] += k;
                        ++n;
                    }
        for (int a = 0; a < 3; ++a) {
            centroid[a] = static_cast<int>(centroid[a] / n);
            const int half = patch[a] / 2;
            centroid[a] = std::clamp(centroid[a], half, std::max(half, c.volume.shape[a] - patch[a] + half));
        }
        vol::Volume vpatch = vol::crop_patch(c.volume, centroid, index3(patch), static_cast<float>(window.out_lo));
        vol::VoxelMask mpatch = vol::crop_patch(*c.lesion, centroid, index3(patch));
        ldm::LatentSample sample;
        {
            ad::NoGradGuard guard;
            sample.z0 = ae_model.encode(ae::volume_to_tensor(vpatch));
        }
        sample.mask = ldm::downsample_mask(mpatch, ae_model.config().compression);
        dataset.push_back(std::move(sample));
    }
    require(!dataset.empty(), ErrorKind::Runtime, "train-diff: no annotated (lesion-bearing) cases found");

    ldm::DenoiserUNet model(cfg.net);
    auto result = ldm::train_diffusion(model, dataset, cfg, out / "checkpoint");
    run.artifact("checkpoint");
    run.manifest.metrics["annotated_cases"] = dataset.size();
    if (!result.history.empty()) {
        run.manifest.metrics["first_loss"] = result.history.front();
        run.manifest.metrics["final_loss"] = result.history.back();
    }
    cache_store(cache_key, out / "checkpoint");
    return run.finish();
}

json cmd_maskgen(const json& opts) {
    JsonReader r(opts, "maskgen");
    const fs::path organ_path = r.require<std::string>("organ");
    const fs::path out = r.require<std::string>("out");
    mg::MaskPolicy policy = r.has("policy") ? mg::MaskPolicy::from_json(load_json_or_object(r.get<json>("policy", json::object()), "policy"))
                                            : mg::MaskPolicy::early_default();
    const std::uint64_t seed = r.get("seed", static_cast<std::uint64_t>(0));
    r.finish();

    vol::VoxelMask organ = vol::load_mask(organ_path);
    Rng rng(seed);
    mg::GeneratedMask g = mg::generate_tumor_mask(organ, policy, rng);
    if (out.parent_path() != fs::path()) fs::create_directories(out.parent_path());
    vol::save_mask(g.mask, out);
    json summary;
    summary["out"] = out.string();
    summary["spec"] = g.spec.to_json();
    summary["voxels"] = g.mask.count();
    return summary;
}

json cmd_synth(const json& opts) {
    JsonReader r(opts, "synth");
    const fs::path ae_dir = r.require<std::string>("ae");
    const fs::path diff_dir = r.require<std::string>("diff");
    const fs::path volume_path = r.require<std::string>("volume");
    const fs::path organ_path = r.require<std::string>("organ");
    const fs::path out = r.require<std::string>("out");
    syn::SynthesisConfig cfg = r.has("config")
                                   ? syn::SynthesisConfig::from_json(load_json_or_object(r.get<json>("config", json::object()), "config"))
                                   : syn::SynthesisConfig{};
    const std::uint64_t seed = r.get("seed", static_cast<std::uint64_t>(0));
    r.finish();

    Run run("synth", out, opts);
    SynthModels models = load_models(ae_dir, diff_dir);
    vol::Volume volume = vol::load_volume(volume_path);
    vol::VoxelMask organ = vol::load_mask(organ_path);
    Rng rng(derive_seed(seed, "synth"));
    syn::SynthesisResult res = syn::synthesize(volume, organ, models.ae_model, models.denoiser, models.schedule,
                                               cfg, rng);
    vol::save_volume(res.volume, out / "synthetic.nii.gz");
    vol::save_mask(res.tumor, res.volume, out / "tumor.nii.gz");
    save_json_file(res.spec.to_json(), out / "spec.json");
    for (const char* f : {"synthetic.nii.gz", "tumor.nii.gz", "spec.json"}) run.artifact(f);
    run.manifest.metrics["denoiser_calls"] = res.denoiser_calls;
    run.manifest.metrics["tumor_voxels"] = res.tumor.count();
    return run.finish();
}

namespace {

struct SegData {
    std::vector<seg::SegCase> real;
    std::vector<seg::HealthyCase> healthy;
    json synth_stats = json::object();
};

// Loads the real/healthy corpora in segmentation intensity space; with
// synthesis on, healthy cases receive pre-generated synthetic tumors (the
// generative stages run in their own [-1,1] space, outputs are remapped).
SegData load_seg_data(const std::optional<fs::path>& real_dir, const std::optional<fs::path>& healthy_dir,
                      bool synth_on, const std::optional<SynthModels>& models, const syn::SynthesisConfig& scfg,
                      const vol::WindowSpec& seg_window, const vol::WindowSpec& ae_window, std::uint64_t seed) {
    SegData data;
    if (real_dir) {
        for (const auto& cp : discover_cases(*real_dir)) {
            LoadedCase c = load_case(cp);
            window_case(c, seg_window);
            seg::SegCase sc;
            sc.volume = std::move(c.volume);
            sc.label = c.lesion ? std::move(*c.lesion) : vol::VoxelMask(sc.volume.shape, sc.volume.spacing);
            data.real.push_back(std::move(sc));
        }
    }
    if (healthy_dir) {
        int synth_count = 0, denoiser_calls = 0;
        double synth_seconds = 0;
        for (const auto& cp : discover_cases(*healthy_dir)) {
            LoadedCase c = load_case(cp);
            require(c.organ.has_value(), ErrorKind::Runtime,
                    "train-seg: healthy case '" + cp.id + "' lacks organ.nii[.gz]");
            if (synth_on) {
                vol::Volume norm = vol::window_normalize(c.volume, ae_window);
                Rng rng(derive_seed(seed, "synth-case-" + cp.id));
                const auto t0 = Clock::now();
                auto [augmented, label] = syn::augment_sample(norm, *c.organ, models->ae_model, models->denoiser,
                                                              models->schedule, scfg, rng);
                synth_seconds += seconds_since(t0);
                if (!label.empty_mask()) {
                    ++synth_count;
                    denoiser_calls += scfg.sampling_steps;
                }
                seg::SegCase sc;
                sc.volume = remap_unit(augmented);
                sc.label = std::move(label);
                data.real.push_back(std::move(sc));
            } else {
                seg::HealthyCase hc;
                hc.volume = vol::window_normalize(c.volume, seg_window);
                hc.organ = std::move(*c.organ);
                data.healthy.push_back(std::move(hc));
            }
        }
        if (synth_on) {
            data.synth_stats["synthesized_cases"] = synth_count;
            data.synth_stats["seconds_per_tumor"] = synth_count ? synth_seconds / synth_count : 0.0;
            data.synth_stats["denoiser_calls_per_tumor"] = scfg.sampling_steps;
        }
    }
    return data;
}

}  // namespace

json cmd_train_seg(const json& opts) {
    JsonReader r(opts, "train-seg");
    std::optional<fs::path> real_dir, healthy_dir;
    if (r.has("real")) real_dir = fs::path(r.require<std::string>("real"));
    if (r.has("healthy")) healthy_dir = fs::path(r.require<std::string>("healthy"));
    const std::string synth_mode = r.get<std::string>("synth", "off");
    require(synth_mode == "off" || synth_mode == "on", ErrorKind::Config, "train-seg: synth must be off|on");
    const bool synth_on = synth_mode == "on";
    const fs::path out = r.require<std::string>("out");
    seg::SegConfig cfg = seg::SegConfig::from_json(r.child("config"));
    syn::SynthesisConfig scfg =
        r.has("synthesis") ? syn::SynthesisConfig::from_json(r.child("synthesis")) : syn::SynthesisConfig{};
    const vol::WindowSpec seg_window = window_opt(r, "window", default_seg_window());
    const vol::WindowSpec ae_window = window_opt(r, "window_ae", default_ae_window());
    std::optional<SynthModels> models;
    if (synth_on)
        models = load_models(r.require<std::string>("ae"), r.require<std::string>("diff"));
    else {
        r.get<std::string>("ae", "");
        r.get<std::string>("diff", "");
    }
    if (r.has("seed")) cfg.seed = r.require<std::uint64_t>("seed");
    r.finish();
    require(real_dir || healthy_dir, ErrorKind::Config, "train-seg: need --real and/or --healthy");

    Run run("train-seg", out, opts);
    const std::string cache_key = "seg-" + json_hash_hex(opts);
    if (auto cached = cache_lookup(cache_key)) {
        copy_dir(*cached, out / "checkpoint");
        run.artifact("checkpoint");
        run.manifest.metrics["cache_hit"] = true;
        return run.finish();
    }

    SegData data = load_seg_data(real_dir, healthy_dir, synth_on, models, scfg, seg_window, ae_window, cfg.seed);
    seg::SegUNet model(cfg.base_width, cfg.seed);
    auto result = seg::train_segmenter(model, data.real, data.healthy, nullptr, cfg, out / "checkpoint");
    run.artifact("checkpoint");
    run.manifest.metrics["real_cases"] = data.real.size();
    run.manifest.metrics["healthy_cases"] = data.healthy.size();
    run.manifest.metrics["synthesis"] = data.synth_stats;
    if (!result.loss_history.empty()) run.manifest.metrics["final_loss"] = result.loss_history.back();
    cache_store(cache_key, out / "checkpoint");
    return run.finish();
}

json cmd_eval(const json& opts) {
    JsonReader r(opts, "eval");
    const fs::path model_dir = r.require<std::string>("model");
    const fs::path data = r.require<std::string>("data");
    const fs::path out = r.require<std::string>("out");
    seg::SegConfig cfg = r.has("config") ? seg::SegConfig::from_json(r.child("config")) : seg::SegConfig{};
    const vol::WindowSpec window = window_opt(r, "window", default_seg_window());
    const double nsd_tau = r.get("nsd_tau_mm", 2.0);
    const double detection_overlap = r.get("detection_overlap", 0.1);
    const bool use_organ_filter = r.get("organ_filter", true);
    const int jobs = r.get("jobs", 1);
    r.finish();

    Run run("eval", out, opts);
    seg::SegUNet model = seg::SegUNet::load(model_dir / "checkpoint");
    auto cases = discover_cases(data);

    struct CaseRow {
        json row;
        double dsc = 0, nsd_v = 0, sens = 0;
    };
    std::vector<CaseRow> rows(cases.size());
    parallel_for(static_cast<int>(cases.size()), jobs, [&](int i) {
        LoadedCase c = load_case(cases[static_cast<size_t>(i)]);
        window_case(c, window);
        vol::VoxelMask pred = seg::predict(model, c.volume, cfg);
        if (use_organ_filter && c.organ) pred = seg::organ_filter(pred, *c.organ);
        vol::VoxelMask gt = c.lesion ? *c.lesion : vol::VoxelMask(c.volume.shape, c.volume.spacing);
        CaseRow& row = rows[static_cast<size_t>(i)];
        row.dsc = seg::dsc(pred, gt);
        row.nsd_v = seg::nsd(pred, gt, nsd_tau);
        auto sens = seg::tumor_sensitivity(pred, gt, detection_overlap);
        row.sens = sens.sensitivity;
        row.row = json{{"case", c.id},          {"dsc", row.dsc},
                       {"nsd", row.nsd_v},      {"sensitivity", sens.sensitivity},
                       {"n_gt_tumors", sens.n_gt_tumors}, {"n_detected", sens.n_detected}};
    });

    json report;
    report["cases"] = json::array();
    double sd = 0, sn = 0, ss = 0;
    for (const auto& row : rows) {
        report["cases"].push_back(row.row);
        sd += row.dsc;
        sn += row.nsd_v;
        ss += row.sens;
    }
    const double n = static_cast<double>(rows.size());
    report["aggregate"] = json{{"mean_dsc", sd / n},
                               {"mean_nsd", sn / n},
                               {"mean_sensitivity", ss / n},
                               {"nsd_tau_mm", nsd_tau},
                               {"detection_overlap", detection_overlap},
                               {"cases", rows.size()}};
    save_json_file(report, out / "report.json");
    run.artifact("report.json");
    run.manifest.metrics = report["aggregate"];
    return run.finish();
}

namespace {

// shared machinery for the two ablation harnesses: synthesize tumors into
// every healthy case, train a segmenter on real+synthetic, evaluate
struct AblationPipeline {
    SynthModels* models;
    std::vector<LoadedCase> healthy;        // normalized to AE space
    std::vector<seg::SegCase> real_cases;   // seg space
    std::vector<CasePaths> test_cases;
    seg::SegConfig seg_cfg;
    syn::SynthesisConfig synth_cfg;
    vol::WindowSpec seg_window, ae_window;
    double nsd_tau = 2.0;
    double detection_overlap = 0.1;
    std::uint64_t seed = 0;

    struct Outcome {
        double mean_dsc = 0;
        double seconds_per_tumor = 0;
        int denoiser_calls_per_tumor = 0;
        int synthesized = 0;
        double contrast_abs_norm = 0;  // |tumor mean - organ-outside mean| on synthetic volumes
    };

    Outcome run(int sampling_steps, std::uint64_t run_seed) {
        Outcome oc;
        syn::SynthesisConfig scfg = synth_cfg;
        scfg.sampling_steps = sampling_steps;

        std::vector<seg::SegCase> train_cases = real_cases;
        double synth_seconds = 0;
        double contrast_sum = 0;
        int contrast_n = 0;
        for (const auto& h : healthy) {
            Rng rng(derive_seed(run_seed, "ablate-synth-" + h.id));
            const auto t0 = Clock::now();
            syn::SynthesisResult res = syn::synthesize(h.volume, *h.organ, models->ae_model, models->denoiser,
                                                       models->schedule, scfg, rng);
            synth_seconds += seconds_since(t0);
            if (!res.tumor.empty_mask()) {
                ++oc.synthesized;
                oc.denoiser_calls_per_tumor = res.denoiser_calls;
                // contrast between the synthetic tumor interior and the organ outside it
                double tmean = 0, omean = 0;
                std::int64_t tn = 0, on = 0;
                for (std::int64_t i = 0; i < res.volume.voxels(); ++i) {
                    if (res.tumor.data[i]) {
                        tmean += res.volume.data[i];
                        ++tn;
                    } else if (h.organ->data[i]) {
                        omean += res.volume.data[i];
                        ++on;
                    }
                }
                if (tn > 0 && on > 0) {
                    contrast_sum += std::abs(tmean / tn - omean / on);
                    ++contrast_n;
                }
            }
            seg::SegCase sc;
            sc.volume = remap_unit(res.volume);
            sc.label = std::move(res.tumor);
            train_cases.push_back(std::move(sc));
        }
        oc.seconds_per_tumor = oc.synthesized ? synth_seconds / oc.synthesized : 0.0;
        oc.contrast_abs_norm = contrast_n ? contrast_sum / contrast_n : 0.0;

        seg::SegConfig cfg = seg_cfg;
        cfg.seed = derive_seed(run_seed, "ablate-seg");
        seg::SegUNet model(cfg.base_width, cfg.seed);
        seg::train_segmenter(model, train_cases, {}, nullptr, cfg, "");

        double sd = 0;
        for (const auto& cp : test_cases) {
            LoadedCase c = load_case(cp);
            window_case(c, seg_window);
            vol::VoxelMask pred = seg::predict(model, c.volume, cfg);
            if (c.organ) pred = seg::organ_filter(pred, *c.organ);
            vol::VoxelMask gt = c.lesion ? *c.lesion : vol::VoxelMask(c.volume.shape, c.volume.spacing);
            sd += seg::dsc(pred, gt);
        }
        oc.mean_dsc = test_cases.empty() ? 0.0 : sd / static_cast<double>(test_cases.size());
        return oc;
    }
};

AblationPipeline make_ablation_pipeline(JsonReader& r, SynthModels* models) {
    AblationPipeline p;
    p.models = models;
    p.seg_cfg = r.has("config") ? seg::SegConfig::from_json(r.child("config")) : seg::SegConfig{};
    p.synth_cfg = r.has("synthesis") ? syn::SynthesisConfig::from_json(r.child("synthesis")) : syn::SynthesisConfig{};
    p.seg_window = window_opt(r, "window", default_seg_window());
    p.ae_window = window_opt(r, "window_ae", default_ae_window());
    p.nsd_tau = r.get("nsd_tau_mm", 2.0);
    p.detection_overlap = r.get("detection_overlap", 0.1);

    if (r.has("real")) {
        for (const auto& cp : discover_cases(r.require<std::string>("real"))) {
            LoadedCase c = load_case(cp);
            window_case(c, p.seg_window);
            seg::SegCase sc;
            sc.volume = std::move(c.volume);
            sc.label = c.lesion ? std::move(*c.lesion) : vol::VoxelMask(sc.volume.shape, sc.volume.spacing);
            p.real_cases.push_back(std::move(sc));
        }
    }
    for (const auto& cp : discover_cases(r.require<std::string>("healthy"))) {
        LoadedCase c = load_case(cp);
        require(c.organ.has_value(), ErrorKind::Runtime, "ablation: healthy case lacks organ mask");
        window_case(c, p.ae_window);
        p.healthy.push_back(std::move(c));
    }
    p.test_cases = discover_cases(r.require<std::string>("test"));
    return p;
}

}  // namespace

json cmd_ablate_timesteps(const json& opts) {
    JsonReader r(opts, "ablate-timesteps");
    const auto steps_list = r.require<std::vector<int>>("steps");
    const fs::path report_path = r.require<std::string>("report");
    SynthModels models = load_models(r.require<std::string>("ae"), r.require<std::string>("diff"));
    AblationPipeline pipe = make_ablation_pipeline(r, &models);
    pipe.seed = r.get("seed", static_cast<std::uint64_t>(0));
    r.finish();

    std::vector<int> unique_steps;
    bool duplicates = false;
    for (int s : steps_list) {
        require(s >= 1, ErrorKind::Config, "ablate-timesteps: step counts must be >= 1");
        if (std::find(unique_steps.begin(), unique_steps.end(), s) == unique_steps.end())
            unique_steps.push_back(s);
        else
            duplicates = true;
    }
    if (duplicates) std::cerr << "ablate-timesteps: duplicate step counts were deduplicated\n";

    json report;
    report["settings"] = json::array();
    for (int s : unique_steps) {
        auto oc = pipe.run(s, derive_seed(pipe.seed, "timesteps-" + std::to_string(s)));
        report["settings"].push_back(json{{"steps", s},
                                          {"denoiser_calls_per_tumor", oc.denoiser_calls_per_tumor},
                                          {"seconds_per_tumor", oc.seconds_per_tumor},
                                          {"mean_dsc", oc.mean_dsc},
                                          {"synthesized", oc.synthesized}});
    }
    if (report_path.parent_path() != fs::path()) fs::create_directories(report_path.parent_path());
    save_json_file(report, report_path);
    json summary;
    summary["report"] = report_path.string();
    summary["settings"] = report["settings"];
    if (duplicates) summary["warning"] = "duplicate step counts deduplicated";
    return summary;
}

json cmd_ablate_annotations(const json& opts) {
    JsonReader r(opts, "ablate-annotations");
    const auto n_list = r.require<std::vector<int>>("n");
    const fs::path report_path = r.require<std::string>("report");
    const fs::path ae_dir = r.require<std::string>("ae");
    const fs::path real_dir = r.require<std::string>("real");
    ldm::DiffusionTrainConfig diff_cfg =
        r.has("diffusion") ? ldm::DiffusionTrainConfig::from_json(r.child("diffusion")) : ldm::DiffusionTrainConfig{};
    const auto patch = r.get("patch_size", std::array<int, 3>{32, 32, 32});
    SynthModels models{ae::Autoencoder::load(ae_dir), ldm::DenoiserUNet(diff_cfg.net), diff_cfg.schedule()};
    AblationPipeline pipe = make_ablation_pipeline(r, &models);
    pipe.seed = r.get("seed", static_cast<std::uint64_t>(0));
    r.finish();

    std::vector<int> unique_n;
    bool duplicates = false;
    for (int n : n_list) {
        require(n >= 1, ErrorKind::Config, "ablate-annotations: n must be >= 1");
        if (std::find(unique_n.begin(), unique_n.end(), n) == unique_n.end())
            unique_n.push_back(n);
        else
            duplicates = true;
    }
    if (duplicates) std::cerr << "ablate-annotations: duplicate annotation counts were deduplicated\n";

    // annotated pool, in corpus order
    auto annotated = discover_cases(real_dir);
    std::vector<CasePaths> lesion_cases;
    for (const auto& c : annotated)
        if (c.lesion) lesion_cases.push_back(c);
    const int max_n = *std::max_element(unique_n.begin(), unique_n.end());
    require(static_cast<int>(lesion_cases.size()) >= max_n, ErrorKind::Runtime,
            "ablate-annotations: corpus has fewer annotated tumors than max n");

    json report;
    report["settings"] = json::array();
    for (int n : unique_n) {
        // retrain the diffusion stage on the first n annotated pairs
        std::vector<ldm::LatentSample> dataset;
        for (int i = 0; i < n; ++i) {
            LoadedCase c = load_case(lesion_cases[static_cast<size_t>(i)]);
            window_case(c, pipe.ae_window);
            vol::Index3 centroid{0, 0, 0};
            std::int64_t cnt = 0;
            for (int a = 0; a < c.lesion->shape[0]; ++a)
                for (int b = 0; b < c.lesion->shape[1]; ++b)
                    for (int d = 0; d < c.lesion->shape[2]; ++d)
                        if (c.lesion->at(a, b, d)) {
                            centroid[0] += a;
                            centroid[1] += b;
                            centroid[2] += d;
                            ++cnt;
                        }
            require(cnt > 0, ErrorKind::Runtime, "ablate-annotations: annotated case has empty lesion");
            for (int a = 0; a < 3; ++a) {
                centroid[a] = static_cast<int>(centroid[a] / cnt);
                const int half = patch[a] / 2;
                centroid[a] = std::clamp(centroid[a], half, std::max(half, c.volume.shape[a] - patch[a] + half));
            }
            vol::Volume vpatch = vol::crop_patch(c.volume, centroid, index3(patch),
                                                 static_cast<float>(pipe.ae_window.out_lo));
            vol::VoxelMask mpatch = vol::crop_patch(*c.lesion, centroid, index3(patch));
            ldm::LatentSample sample;
            {
                ad::NoGradGuard guard;
                sample.z0 = models.ae_model.encode(ae::volume_to_tensor(vpatch));
            }
            sample.mask = ldm::downsample_mask(mpatch, models.ae_model.config().compression);
            dataset.push_back(std::move(sample));
        }
        ldm::DiffusionTrainConfig cfg = diff_cfg;
        cfg.seed = derive_seed(pipe.seed, "ablate-diff-" + std::to_string(n));
        cfg.net.seed = cfg.seed;
        cfg.net.latent_channels = models.ae_model.config().latent_channels;
        models.denoiser = ldm::DenoiserUNet(cfg.net);
        ldm::train_diffusion(models.denoiser, dataset, cfg, "");

        auto oc = pipe.run(pipe.synth_cfg.sampling_steps, derive_seed(pipe.seed, "annotations-" + std::to_string(n)));
        report["settings"].push_back(json{{"n_annotations", n},
                                          {"mean_dsc", oc.mean_dsc},
                                          {"synthesized", oc.synthesized},
                                          {"contrast_abs_norm", oc.contrast_abs_norm},
                                          {"seconds_per_tumor", oc.seconds_per_tumor}});
    }
    if (report_path.parent_path() != fs::path()) fs::create_directories(report_path.parent_path());
    save_json_file(report, report_path);
    json summary;
    summary["report"] = report_path.string();
    summary["settings"] = report["settings"];
    if (duplicates) summary["warning"] = "duplicate annotation counts deduplicated";
    return summary;
}

json cmd_features(const json& opts) {
    JsonReader r(opts, "features");
    const fs::path cases_path = r.require<std::string>("cases");
    const fs::path out = r.require<std::string>("out");
    r.finish();

    json cases = load_json_file(cases_path);
    require(cases.is_array(), ErrorKind::Config, "features: cases manifest must be a JSON array");
    if (out.parent_path() != fs::path()) fs::create_directories(out.parent_path());
    std::ofstream csv(out);
    require(static_cast<bool>(csv), ErrorKind::Io, "features: cannot write " + out.string());
    csv << "case,label";
    for (const auto& name : feat::FeatureVector::names()) csv << "," << name;
    csv << "\n";
    csv.precision(10);
    int n = 0;
    for (const auto& entry : cases) {
        JsonReader er(entry, "features case");
        const std::string id = er.require<std::string>("id");
        const std::string label = er.require<std::string>("label");
        const fs::path vol_path = er.require<std::string>("volume");
        const fs::path tumor_path = er.require<std::string>("tumor");
        er.finish();
        vol::Volume v = vol::load_volume(vol_path);
        vol::VoxelMask m = vol::load_mask(tumor_path);
        feat::FeatureVector f = feat::extract_features(v, m);
        csv << id << "," << label;
        for (double x : f.values) csv << "," << x;
        csv << "\n";
        ++n;
    }
    json summary;
    summary["out"] = out.string();
    summary["cases"] = n;
    return summary;
}

namespace {

struct FeatureCsv {
    std::vector<std::string> ids, labels;
    std::vector<feat::FeatureVector> features;
};

FeatureCsv read_feature_csv(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open features CSV: " + path.string());
    FeatureCsv out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        std::istringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        require(cells.size() == 2 + feat::FeatureVector::dim, ErrorKind::Io,
                "features CSV: wrong column count in line '" + line + "'");
        out.ids.push_back(cells[0]);
        out.labels.push_back(cells[1]);
        feat::FeatureVector f;
        for (int i = 0; i < feat::FeatureVector::dim; ++i) f.values[static_cast<size_t>(i)] = std::stod(cells[2 + i]);
        out.features.push_back(f);
    }
    require(!out.features.empty(), ErrorKind::Io, "features CSV is empty: " + path.string());
    return out;
}

}  // namespace

json cmd_origin_study(const json& opts) {
    JsonReader r(opts, "origin-study");
    const fs::path features_path = r.require<std::string>("features");
    const fs::path report_path = r.require<std::string>("report");
    const std::string plot_path = r.get<std::string>("plot", "");
    const std::string kind_str = r.get<std::string>("kind", "linear_hinge");
    const std::uint64_t seed = r.get("seed", static_cast<std::uint64_t>(0));
    const double test_fraction = r.get("test_fraction", 0.3);
    r.finish();

    FeatureCsv data = read_feature_csv(features_path);
    auto result = feat::train_origin_classifier(data.features, data.labels,
                                                feat::classifier_kind_from_string(kind_str), seed, test_fraction);
    json report = result.report.to_json();
    report["kind"] = kind_str;
    report["seed"] = seed;
    if (report_path.parent_path() != fs::path()) fs::create_directories(report_path.parent_path());
    save_json_file(report, report_path);

    if (!plot_path.empty()) {
        auto coords = feat::embed_2d_features(data.features, true);
        std::ofstream csv(plot_path);
        require(static_cast<bool>(csv), ErrorKind::Io, "origin-study: cannot write " + plot_path);
        csv << "case,label,x,y\n";
        csv.precision(10);
        for (size_t i = 0; i < coords.size(); ++i)
            csv << data.ids[i] << "," << data.labels[i] << "," << coords[i][0] << "," << coords[i][1] << "\n";
    }
    json summary;
    summary["report"] = report_path.string();
    summary["test_macro_precision"] = result.report.test.macro_precision;
    summary["test_macro_recall"] = result.report.test.macro_recall;
    return summary;
}

bool is_known_command(const std::string& name) {
    static const char* names[] = {"phantom-gen", "preprocess",       "train-ae",          "train-diff",
                                  "maskgen",     "synth",            "train-seg",         "eval",
                                  "ablate-timesteps", "ablate-annotations", "features", "origin-study"};
    for (const char* n : names)
        if (name == n) return true;
    return false;
}

json run_command(const std::string& name, const json& opts) {
    if (name == "phantom-gen") return cmd_phantom_gen(opts);
    if (name == "preprocess") return cmd_preprocess(opts);
    if (name == "train-ae") return cmd_train_ae(opts);
    if (name == "train-diff") return cmd_train_diff(opts);
    if (name == "maskgen") return cmd_maskgen(opts);
    if (name == "synth") return cmd_synth(opts);
    if (name == "train-seg") return cmd_train_seg(opts);
    if (name == "eval") return cmd_eval(opts);
    if (name == "ablate-timesteps") return cmd_ablate_timesteps(opts);
    if (name == "ablate-annotations") return cmd_ablate_annotations(opts);
    if (name == "features") return cmd_features(opts);
    if (name == "origin-study") return cmd_origin_study(opts);
    fail_runtime("unknown command: " + name);
}

}  // namespace tsyn::pipe
