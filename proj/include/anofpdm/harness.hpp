#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "anofpdm/config.hpp"
#include "anofpdm/denoiser.hpp"
#include "anofpdm/forward.hpp"
#include "anofpdm/io.hpp"
#include "anofpdm/metrics.hpp"
#include "anofpdm/phantom.hpp"
#include "anofpdm/segmentation.hpp"
#include "anofpdm/selection.hpp"

namespace fpdm {

// --- logging (FPDM_LOG = error | info | debug) -------------------------------

enum class LogLevel : int { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("FPDM_LOG");
        if (!env) return LogLevel::Info;
        std::string v(env);
        if (v == "error") return LogLevel::Error;
        if (v == "debug") return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return level;
}

template <class... Args>
void log_at(LogLevel lvl, const char* fmt, Args... args) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    std::fprintf(stderr, "[fpdm] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

#define FPDM_INFO(...) ::fpdm::log_at(::fpdm::LogLevel::Info, __VA_ARGS__)
#define FPDM_DEBUG(...) ::fpdm::log_at(::fpdm::LogLevel::Debug, __VA_ARGS__)
#define FPDM_ERROR(...) ::fpdm::log_at(::fpdm::LogLevel::Error, __VA_ARGS__)

// Runs fn(i) for i in [0, n) on `workers` threads. Work items must be
// independent; exceptions are rethrown on the calling thread.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr error;
    auto run = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(err_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    int count = std::min<std::size_t>(workers, n);
    for (int i = 0; i < count; ++i) pool.emplace_back(run);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// --- dataset access -----------------------------------------------------------

struct LoadedSplit {
    DatasetManifest manifest;
    std::vector<PhantomSample> samples;
};

inline std::filesystem::path manifest_path(const ExperimentConfig& cfg, const std::string& split) {
    return std::filesystem::path(cfg.paths.data_dir) / ("manifest_" + split + ".json");
}

inline LoadedSplit load_split(const ExperimentConfig& cfg, const std::string& split) {
    auto path = manifest_path(cfg, split);
    if (!std::filesystem::exists(path))
        throw PrerequisiteError("missing dataset manifest: " + path.string() +
                                " (run `generate` first)");
    LoadedSplit out;
    out.manifest = load_manifest(path);
    out.samples.reserve(out.manifest.entries.size());
    for (const auto& e : out.manifest.entries) {
        auto s = load_sample(std::filesystem::path(cfg.paths.data_dir) / e.file);
        s.seed = e.seed;
        out.samples.push_back(std::move(s));
    }
    return out;
}

// --- backend construction ------------------------------------------------------

inline MixtureParams explicit_mixture(const OracleConfig& o, int h, int w) {
    MixtureParams p;
    p.mean_healthy = ImageGrid::constant(h, w, o.mean_h, GridRole::Image);
    p.var_healthy = ImageGrid::constant(h, w, o.var_h);
    p.mean_unhealthy = ImageGrid::constant(h, w, o.mean_u, GridRole::Image);
    p.var_unhealthy = ImageGrid::constant(h, w, o.var_u);
    p.prior_healthy = o.prior_h;
    return p;
}

inline std::unique_ptr<NoisePredictor> build_backend(const ExperimentConfig& cfg,
                                                     const DiffusionSchedule& schedule) {
    if (cfg.backend == "oracle") {
        MixtureParams params;
        if (cfg.oracle.source == "explicit") {
            params = explicit_mixture(cfg.oracle, cfg.phantom.height, cfg.phantom.width);
        } else {
            LoadedSplit train = load_split(cfg, "train");
            std::vector<const ImageGrid*> views;
            std::vector<bool> labels;
            for (const auto& s : train.samples) {
                views.push_back(&s.image);
                labels.push_back(s.unhealthy);
            }
            params = fit_gaussian_mixture(views, labels, cfg.oracle.var_floor,
                                          cfg.oracle.pool_means);
            FPDM_DEBUG("oracle fitted from %zu training samples", views.size());
        }
        return std::make_unique<GaussianMixtureOracle>(std::move(params), schedule);
    }
    std::string path = cfg.backend.substr(std::string("checkpoint:").size());
    if (!std::filesystem::exists(path))
        throw PrerequisiteError("missing checkpoint: " + path + " (run `train` first)");
    auto ckpt = load_checkpoint<float>(path);
    FPDM_DEBUG("loaded checkpoint %s (%s)", path.c_str(), ckpt.ema ? "EMA" : "raw");
    return std::make_unique<DenoiserPredictor<float>>(ckpt.inference_net());
}

// --- calibration persistence ----------------------------------------------------

inline void save_calibration(const std::filesystem::path& path, const SelectionCalibration& c,
                             const std::string& cfg_hash) {
    nlohmann::json j;
    j["w_star"] = c.w_star;
    j["cos_threshold"] = c.cos_threshold;
    j["m_max"] = c.m_max;
    j["a"] = c.quantile_lo;
    j["b"] = c.quantile_hi;
    j["rho"] = c.accuracy_ratio;
    j["schedule_fingerprint"] = c.schedule_fingerprint;
    j["config_hash"] = cfg_hash;
    io::atomic_write_file(path, j.dump(2) + "\n");
}

inline SelectionCalibration load_calibration(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw PrerequisiteError("missing calibration: " + path.string() +
                                " (run `calibrate` first)");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("calibration: " + std::string(e.what()));
    }
    SelectionCalibration c;
    try {
        c.w_star = j.at("w_star").get<double>();
        c.cos_threshold = j.at("cos_threshold").get<double>();
        c.m_max = j.at("m_max").get<double>();
        c.quantile_lo = j.at("a").get<double>();
        c.quantile_hi = j.at("b").get<double>();
        c.accuracy_ratio = j.at("rho").get<double>();
        c.schedule_fingerprint = j.at("schedule_fingerprint").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("calibration: " + std::string(e.what()));
    }
    c.validate();
    return c;
}

// --- commands -------------------------------------------------------------------

inline void cmd_generate(const ExperimentConfig& cfg) {
    cfg.validate();
    std::string hash = config_hash(cfg);
    const std::filesystem::path dir(cfg.paths.data_dir);
    struct SplitPlan {
        const char* name;
        std::size_t count;
    };
    for (SplitPlan plan : {SplitPlan{"train", cfg.splits.train}, SplitPlan{"val", cfg.splits.val},
                           SplitPlan{"test", cfg.splits.test}}) {
        auto manifest =
            generate_dataset(cfg.phantom, plan.name, plan.count, cfg.seed, dir, hash);
        std::size_t unhealthy = 0;
        for (const auto& e : manifest.entries) unhealthy += e.unhealthy;
        FPDM_INFO("generated split %-5s: %zu samples (%zu unhealthy)", plan.name, plan.count,
                  unhealthy);
    }
}

inline std::filesystem::path cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    auto schedule = cfg.make_schedule();
    LoadedSplit train = load_split(cfg, "train");
    if (train.samples.empty()) throw PrerequisiteError("train: empty training split");

    DenoiserSpec spec;
    spec.widths = cfg.train.widths;
    spec.emb_dim = cfg.train.emb_dim;
    TrainConfig tc = cfg.train.opt;
    tc.seed = cfg.seed;
    tc.validate();

    TinyDenoiser<float> model(spec, derive_seed(cfg.seed, kStreamInit));
    TinyDenoiser<float> shadow = model;
    AdamState<float> adam(model.param_count());
    Rng rng(derive_seed(cfg.seed, kStreamTrain));

    std::vector<std::size_t> order(train.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::string log_csv = "step,loss\n";
    long step = 0;
    bool done = false;
    for (int epoch = 0; epoch < tc.epochs && !done; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (std::size_t off = 0; off + tc.batch <= order.size(); off += tc.batch) {
            std::vector<TrainItem> batch;
            batch.reserve(tc.batch);
            for (int b = 0; b < tc.batch; ++b) {
                const auto& s = train.samples[order[off + b]];
                batch.push_back({&s.image, s.unhealthy});
            }
            double loss = training_step(model, adam, batch, schedule, tc, rng);
            ema_update(shadow, model, tc.ema_rate);
            ++step;
            if (step % cfg.train.log_every == 0 || step == 1) {
                log_csv += std::to_string(step) + "," + std::to_string(loss) + "\n";
                FPDM_INFO("train step %ld (epoch %d): loss %.6f", step, epoch, loss);
            }
            if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) {
                done = true;
                break;
            }
        }
    }
    Checkpoint<float> ckpt{std::move(model), std::move(shadow)};
    save_checkpoint(cfg.paths.model, ckpt);
    io::atomic_write_file(std::filesystem::path(cfg.paths.model).string() + ".train_log.csv",
                          log_csv);
    FPDM_INFO("saved checkpoint to %s after %ld steps", cfg.paths.model.c_str(), step);
    return cfg.paths.model;
}

struct CalibrationOutcome {
    SelectionCalibration calibration;
    GuidanceSelection guidance;
};

// Validation sweeps across guidance candidates, guidance/threshold
// selection, and the divergence ceiling for quantile scaling.
inline CalibrationOutcome cmd_calibrate(const ExperimentConfig& cfg) {
    cfg.validate();
    auto schedule = cfg.make_schedule();
    auto backend = build_backend(cfg, schedule);
    LoadedSplit val = load_split(cfg, "val");
    if (val.samples.size() < 2) throw PrerequisiteError("calibrate: validation split too small");

    const auto& candidates = cfg.guidance_candidates;
    std::vector<std::vector<LabeledScore>> scores(candidates.size());
    std::vector<std::vector<double>> end_divergences(candidates.size());
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        scores[ci].resize(val.samples.size());
        end_divergences[ci].resize(val.samples.size());
        SweepOptions opt;
        opt.w = candidates[ci];
        opt.encoding = cfg.encoding_kind();
        opt.stride = cfg.stride;
        opt.storage = TraceStorage::TwoPass;
        opt.guided_drift = cfg.guided_drift;
        parallel_for(val.samples.size(), cfg.workers, [&](std::size_t i) {
            const auto& s = val.samples[i];
            std::uint64_t seed = derive_seed(cfg.seed ^ io::fnv1a64("calibrate"), kStreamSample, i);
            ForwardTrace trace = sweep(s.image, *backend, schedule, opt, seed);
            scores[ci][i] = {cosine_score(trace), s.unhealthy};
            end_divergences[ci][i] = select_end_step(trace).second;
        });
        FPDM_INFO("calibrate: swept validation at w=%.3g", candidates[ci]);
    }
    GuidanceSelection sel = select_guidance(candidates, scores, cfg.accuracy_ratio);
    std::size_t chosen = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (candidates[i] == sel.w_star) chosen = i;

    SelectionCalibration calib;
    calib.w_star = sel.w_star;
    calib.cos_threshold = sel.cos_threshold;
    calib.m_max = calibrate_m_max(end_divergences[chosen]);
    calib.quantile_lo = cfg.quantile_lo;
    calib.quantile_hi = cfg.quantile_hi;
    calib.accuracy_ratio = cfg.accuracy_ratio;
    calib.schedule_fingerprint = schedule.fingerprint();
    calib.validate();
    save_calibration(cfg.paths.calibration, calib, config_hash(cfg));

    std::string csv = "w,accuracy,threshold\n";
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        char row[96];
        std::snprintf(row, sizeof(row), "%.6g,%.6f,%.9g\n", candidates[i],
                      sel.candidate_accuracy[i], sel.candidate_threshold[i]);
        csv += row;
    }
    std::filesystem::create_directories(cfg.paths.out);
    io::atomic_write_file(std::filesystem::path(cfg.paths.out) / "accuracy_vs_w.csv", csv);
    FPDM_INFO("calibrate: w*=%.3g threshold=%.6f m_max=%.6g accuracy=%.4f", calib.w_star,
              calib.cos_threshold, calib.m_max, sel.accuracy);
    return {calib, sel};
}

struct InferredSample {
    std::size_t index = 0;
    std::string file;
    bool truth_unhealthy = false;
    SegmentationResult seg;
};

inline SegmentOptions segment_options(const ExperimentConfig& cfg) {
    SegmentOptions opt;
    opt.sweep.encoding = cfg.encoding_kind();
    opt.sweep.stride = cfg.stride;
    opt.sweep.storage = cfg.storage_kind();
    opt.sweep.guided_drift = cfg.guided_drift;
    opt.mode = cfg.sam_mode_kind();
    opt.median_kernel = cfg.median_kernel;
    opt.min_component = cfg.min_component;
    opt.force_segmentation = true;  // ungated masks feed the unhealthy-only setup
    return opt;
}

inline std::uint64_t infer_seed(const ExperimentConfig& cfg, std::size_t index) {
    return derive_seed(cfg.seed ^ io::fnv1a64("infer"), kStreamSample, index);
}

// Runs the full per-input pipeline over a loaded split, in sample order.
inline std::vector<InferredSample> run_inference(const ExperimentConfig& cfg,
                                                 const NoisePredictor& backend,
                                                 const DiffusionSchedule& schedule,
                                                 const SelectionCalibration& calib,
                                                 const LoadedSplit& split,
                                                 const SegmentOptions& opt) {
    std::vector<InferredSample> out(split.samples.size());
    parallel_for(split.samples.size(), cfg.workers, [&](std::size_t i) {
        const auto& s = split.samples[i];
        InferredSample r;
        r.index = i;
        r.file = split.manifest.entries[i].file;
        r.truth_unhealthy = s.unhealthy;
        r.seg = segment(s.image, backend, schedule, calib, opt, infer_seed(cfg, i));
        out[i] = std::move(r);
    });
    return out;
}

inline void write_trace_csv(const std::filesystem::path& path, const ForwardTrace& trace) {
    std::string csv = "t,M_t,MSE_h,MSE_null\n";
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        char row[128];
        std::snprintf(row, sizeof(row), "%d,%.12g,%.12g,%.12g\n", trace.steps[i],
                      trace.divergence[i], trace.mse_healthy[i], trace.mse_unguided[i]);
        csv += row;
    }
    io::atomic_write_file(path, csv);
}

inline void cmd_infer(const ExperimentConfig& cfg) {
    cfg.validate();
    auto schedule = cfg.make_schedule();
    SelectionCalibration calib = load_calibration(cfg.paths.calibration);
    if (calib.schedule_fingerprint != schedule.fingerprint())
        throw PrerequisiteError("infer: calibration was made for a different schedule (" +
                                calib.schedule_fingerprint + ")");
    auto backend = build_backend(cfg, schedule);
    LoadedSplit test = load_split(cfg, "test");
    if (test.samples.empty()) throw PrerequisiteError("infer: empty test split");

    const std::filesystem::path out(cfg.paths.out);
    std::filesystem::create_directories(out);
    std::string hash = config_hash(cfg);

    SegmentOptions opt = segment_options(cfg);
    std::vector<InferredSample> results = run_inference(cfg, *backend, schedule, calib, test, opt);

    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        std::string stem = "sample_" + std::to_string(i);
        double lo = 0.0, hi = 0.0;
        if (!r.seg.aam.values.empty()) {
            lo = *std::min_element(r.seg.aam.values.begin(), r.seg.aam.values.end());
            hi = *std::max_element(r.seg.aam.values.begin(), r.seg.aam.values.end());
        }
        io::write_pgm16(out / (stem + "_aam.pgm"), r.seg.aam, lo, hi);
        nlohmann::json sidecar{{"lo", lo}, {"hi", hi}, {"config_hash", hash}};
        io::atomic_write_file(out / (stem + "_aam.json"), sidecar.dump(2) + "\n");
        io::write_pgm_mask(out / (stem + "_mask.pgm"), r.seg.post_mask);
        io::write_pgm_mask(out / (stem + "_mask_ungated.pgm"), r.seg.post_mask_ungated);
        write_trace_csv(out / (stem + "_trace.csv"), r.seg.trace);

        samples.push_back({{"index", i},
                           {"file", r.file},
                           {"verdict", to_string(r.seg.verdict)},
                           {"cosine", r.seg.cosine},
                           {"t_e", r.seg.t_e},
                           {"m_te", r.seg.m_te},
                           {"q_star", r.seg.q_star},
                           {"quantile_level", r.seg.quantile_level},
                           {"aam", stem + "_aam.pgm"},
                           {"aam_lo", lo},
                           {"aam_hi", hi},
                           {"mask", stem + "_mask.pgm"},
                           {"mask_ungated", stem + "_mask_ungated.pgm"},
                           {"trace", stem + "_trace.csv"}});
    }
    nlohmann::json j{{"config_hash", hash},
                     {"schedule_fingerprint", schedule.fingerprint()},
                     {"w_star", calib.w_star},
                     {"samples", samples}};
    io::atomic_write_file(out / "results.json", j.dump(2) + "\n");
    FPDM_INFO("infer: wrote %zu results to %s", results.size(), out.string().c_str());
}

inline EvalReport cmd_evaluate(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::filesystem::path out(cfg.paths.out);
    auto results_path = out / "results.json";
    if (!std::filesystem::exists(results_path))
        throw PrerequisiteError("evaluate: missing " + results_path.string() +
                                " (run `infer` first)");
    nlohmann::json results;
    try {
        results = nlohmann::json::parse(io::read_file(results_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("results: " + std::string(e.what()));
    }
    std::string hash = config_hash(cfg);
    if (results.at("config_hash").get<std::string>() != hash)
        throw PrerequisiteError("evaluate: results were produced under a different config");

    LoadedSplit test = load_split(cfg, "test");
    if (test.samples.empty()) throw PrerequisiteError("evaluate: empty test split");
    const auto& samples = results.at("samples");
    if (samples.size() != test.samples.size())
        throw PrerequisiteError("evaluate: result count does not match the test split");

    EvalReport report;
    report.total_samples = test.samples.size();
    std::vector<double> mixed_dice, mixed_iou, unhealthy_dice, unhealthy_iou;
    std::vector<ImageGrid> mixed_maps, unhealthy_maps;
    std::vector<const BinaryMask*> mixed_truth, mixed_fg, unh_truth, unh_fg;
    std::vector<double> sizes, divergences;
    std::size_t correct = 0;

    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        const auto& entry = samples.at(i);
        const auto& truth = test.samples[i];
        bool predicted_unhealthy = entry.at("verdict").get<std::string>() == "unhealthy";
        correct += predicted_unhealthy == truth.unhealthy;

        BinaryMask gated = io::read_pgm_mask(out / entry.at("mask").get<std::string>());
        double lo = entry.at("aam_lo").get<double>(), hi = entry.at("aam_hi").get<double>();
        ImageGrid aam = io::read_pgm16(out / entry.at("aam").get<std::string>(), lo, hi);

        mixed_dice.push_back(dice(gated, truth.lesion_mask));
        mixed_iou.push_back(iou(gated, truth.lesion_mask));
        // predicted-healthy samples contribute all-zero score maps
        mixed_maps.push_back(predicted_unhealthy
                                 ? aam
                                 : ImageGrid::zeros(aam.height, aam.width, GridRole::AnomalyMap));
        mixed_truth.push_back(&truth.lesion_mask);
        mixed_fg.push_back(&truth.foreground_mask);

        if (truth.unhealthy) {
            BinaryMask ungated =
                io::read_pgm_mask(out / entry.at("mask_ungated").get<std::string>());
            unhealthy_dice.push_back(dice(ungated, truth.lesion_mask));
            unhealthy_iou.push_back(iou(ungated, truth.lesion_mask));
            unhealthy_maps.push_back(aam);
            unh_truth.push_back(&truth.lesion_mask);
            unh_fg.push_back(&truth.foreground_mask);
            sizes.push_back(static_cast<double>(truth.lesion_mask.count()));
            divergences.push_back(entry.at("m_te").get<double>());
        }
    }
    report.unhealthy_samples = sizes.size();
    report.classification_accuracy =
        static_cast<double>(correct) / static_cast<double>(report.total_samples);

    auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
    };
    report.mixed.dice = mean(mixed_dice);
    report.mixed.iou = mean(mixed_iou);
    report.mixed.samples = mixed_dice.size();
    report.unhealthy_only.dice = mean(unhealthy_dice);
    report.unhealthy_only.iou = mean(unhealthy_iou);
    report.unhealthy_only.samples = unhealthy_dice.size();

    std::vector<const ImageGrid*> mixed_views, unh_views;
    for (const auto& m : mixed_maps) mixed_views.push_back(&m);
    for (const auto& m : unhealthy_maps) unh_views.push_back(&m);
    if (!unh_views.empty()) {
        report.mixed.auprc = auprc(mixed_views, mixed_truth, mixed_fg);
        report.unhealthy_only.auprc = auprc(unh_views, unh_truth, unh_fg);
    }
    if (sizes.size() >= 2) {
        try {
            report.pearson_size_divergence = pearson(sizes, divergences);
            report.pearson_defined = true;
        } catch (const UndefinedMetricError&) {
            report.pearson_defined = false;
        }
    }

    nlohmann::json j{
        {"config_hash", hash},
        {"total_samples", report.total_samples},
        {"unhealthy_samples", report.unhealthy_samples},
        {"classification_accuracy", report.classification_accuracy},
        {"mixed",
         {{"dice", report.mixed.dice}, {"iou", report.mixed.iou}, {"auprc", report.mixed.auprc}}},
        {"unhealthy",
         {{"dice", report.unhealthy_only.dice},
          {"iou", report.unhealthy_only.iou},
          {"auprc", report.unhealthy_only.auprc}}},
        {"pearson_size_divergence",
         report.pearson_defined ? nlohmann::json(report.pearson_size_divergence)
                                : nlohmann::json()}};
    io::atomic_write_file(out / "report.json", j.dump(2) + "\n");
    char csv[512];
    std::snprintf(csv, sizeof(csv),
                  "setup,dice,iou,auprc\nmixed,%.6f,%.6f,%.6f\nunhealthy,%.6f,%.6f,%.6f\n",
                  report.mixed.dice, report.mixed.iou, report.mixed.auprc,
                  report.unhealthy_only.dice, report.unhealthy_only.iou,
                  report.unhealthy_only.auprc);
    io::atomic_write_file(out / "report.csv", csv);
    FPDM_INFO("evaluate: mixed dice %.4f | unhealthy dice %.4f | accuracy %.4f",
              report.mixed.dice, report.unhealthy_only.dice, report.classification_accuracy);
    return report;
}

namespace detail {
inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    std::size_t mid = v.size() / 2;
    return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

// Evenly spaced quantile levels of the pooled values; the standard fixed
// comparison grid.
inline std::vector<double> threshold_grid(const std::vector<double>& pooled, int points,
                                          double q_lo = 0.50, double q_hi = 0.995) {
    std::vector<double> grid;
    grid.reserve(points);
    for (int i = 0; i < points; ++i) {
        double q = q_lo + (q_hi - q_lo) * i / (points - 1);
        grid.push_back(quantile(std::span<const double>(pooled), q));
    }
    return grid;
}
}  // namespace detail

// Hyperparameter ablations over the test split; each axis emits one CSV.
inline std::filesystem::path cmd_ablate(const ExperimentConfig& cfg, const std::string& axis) {
    cfg.validate();
    auto schedule = cfg.make_schedule();
    auto backend = build_backend(cfg, schedule);
    LoadedSplit test = load_split(cfg, "test");
    if (test.samples.empty()) throw PrerequisiteError("ablate: empty test split");
    const std::filesystem::path out(cfg.paths.out);
    std::filesystem::create_directories(out);

    if (axis == "w") {
        // guidance strength: per candidate, recalibrate on validation and
        // rerun the full pipeline on the test split
        LoadedSplit val = load_split(cfg, "val");
        std::string csv = "w,accuracy,mixed_dice,unhealthy_dice\n";
        for (double w : cfg.guidance_candidates) {
            std::vector<LabeledScore> scores(val.samples.size());
            std::vector<double> end_div(val.samples.size());
            SweepOptions sopt;
            sopt.w = w;
            sopt.encoding = cfg.encoding_kind();
            sopt.stride = cfg.stride;
            sopt.storage = TraceStorage::TwoPass;
            sopt.guided_drift = cfg.guided_drift;
            parallel_for(val.samples.size(), cfg.workers, [&](std::size_t i) {
                std::uint64_t seed =
                    derive_seed(cfg.seed ^ io::fnv1a64("ablate-w"), kStreamSample, i);
                ForwardTrace trace = sweep(val.samples[i].image, *backend, schedule, sopt, seed);
                scores[i] = {cosine_score(trace), val.samples[i].unhealthy};
                end_div[i] = select_end_step(trace).second;
            });
            auto [threshold, acc_val] = best_threshold(scores);
            (void)acc_val;
            SelectionCalibration calib;
            calib.w_star = w;
            calib.cos_threshold = threshold;
            calib.m_max = calibrate_m_max(end_div);
            calib.quantile_lo = cfg.quantile_lo;
            calib.quantile_hi = cfg.quantile_hi;
            calib.accuracy_ratio = cfg.accuracy_ratio;
            calib.schedule_fingerprint = schedule.fingerprint();

            auto results = run_inference(cfg, *backend, schedule, calib, test,
                                         segment_options(cfg));
            std::vector<double> mixed, unhealthy;
            std::size_t correct = 0;
            for (const auto& r : results) {
                const auto& truth = test.samples[r.index];
                correct += (r.seg.verdict == ImageVerdict::Unhealthy) == truth.unhealthy;
                mixed.push_back(dice(r.seg.post_mask, truth.lesion_mask));
                if (truth.unhealthy)
                    unhealthy.push_back(dice(r.seg.post_mask_ungated, truth.lesion_mask));
            }
            char row[128];
            std::snprintf(row, sizeof(row), "%.6g,%.6f,%.6f,%.6f\n", w,
                          static_cast<double>(correct) / results.size(),
                          detail::mean_of(mixed), detail::mean_of(unhealthy));
            csv += row;
            FPDM_INFO("ablate w=%.3g done", w);
        }
        auto path = out / "ablate_w.csv";
        io::atomic_write_file(path, csv);
        return path;
    }

    SelectionCalibration calib = load_calibration(cfg.paths.calibration);
    if (calib.schedule_fingerprint != schedule.fingerprint())
        throw PrerequisiteError("ablate: calibration schedule mismatch");

    if (axis == "te") {
        // aggregation horizon: multiples of the selected end step
        const std::vector<double> multipliers{0.25, 0.5, 1.0, 1.5, 2.0, 3.0};
        std::vector<std::size_t> unhealthy_idx;
        for (std::size_t i = 0; i < test.samples.size(); ++i)
            if (test.samples[i].unhealthy) unhealthy_idx.push_back(i);
        std::vector<std::vector<double>> dice_per_mult(multipliers.size());
        for (auto& v : dice_per_mult) v.resize(unhealthy_idx.size());

        SweepOptions sopt;
        sopt.w = calib.w_star;
        sopt.encoding = cfg.encoding_kind();
        sopt.stride = cfg.stride;
        sopt.storage = TraceStorage::StoreAll;
        sopt.guided_drift = cfg.guided_drift;
        parallel_for(unhealthy_idx.size(), cfg.workers, [&](std::size_t k) {
            std::size_t i = unhealthy_idx[k];
            const auto& s = test.samples[i];
            ForwardTrace trace = sweep(s.image, *backend, schedule, sopt, infer_seed(cfg, i));
            auto [t_e, m_te] = select_end_step(trace);
            for (std::size_t mi = 0; mi < multipliers.size(); ++mi) {
                int target = std::clamp(static_cast<int>(std::lround(multipliers[mi] * t_e)), 1,
                                        schedule.steps);
                int t_agg = trace.steps.front();
                for (int st : trace.steps)
                    if (st <= target) t_agg = st;
                ImageGrid aam =
                    aggregate(trace, t_agg, cfg.sam_mode_kind(), schedule, calib.w_star);
                double q_star = select_quantile(m_te, calib, aam);
                BinaryMask mask = postprocess(aam, q_star, cfg.median_kernel, cfg.min_component);
                dice_per_mult[mi][k] = dice(mask, s.lesion_mask);
            }
        });
        std::string csv = "multiplier,median_dice,mean_dice\n";
        for (std::size_t mi = 0; mi < multipliers.size(); ++mi) {
            char row[96];
            std::snprintf(row, sizeof(row), "%.3g,%.6f,%.6f\n", multipliers[mi],
                          detail::median_of(dice_per_mult[mi]), detail::mean_of(dice_per_mult[mi]));
            csv += row;
        }
        auto path = out / "ablate_te.csv";
        io::atomic_write_file(path, csv);
        return path;
    }

    if (axis == "fixed-threshold") {
        // dynamic quantile vs one global threshold on the same maps
        std::vector<std::size_t> unhealthy_idx;
        for (std::size_t i = 0; i < test.samples.size(); ++i)
            if (test.samples[i].unhealthy) unhealthy_idx.push_back(i);
        std::vector<ImageGrid> aams(unhealthy_idx.size());
        std::vector<double> dynamic_dice(unhealthy_idx.size());
        SegmentOptions opt = segment_options(cfg);
        parallel_for(unhealthy_idx.size(), cfg.workers, [&](std::size_t k) {
            std::size_t i = unhealthy_idx[k];
            const auto& s = test.samples[i];
            auto res = segment(s.image, *backend, schedule, calib, opt, infer_seed(cfg, i));
            dynamic_dice[k] = dice(res.post_mask_ungated, s.lesion_mask);
            aams[k] = std::move(res.aam);
        });
        std::vector<double> pooled;
        for (const auto& a : aams) pooled.insert(pooled.end(), a.values.begin(), a.values.end());
        std::string csv = "threshold,mean_dice\n";
        {
            char row[96];
            std::snprintf(row, sizeof(row), "dynamic,%.6f\n", detail::mean_of(dynamic_dice));
            csv += row;
        }
        double best_fixed = 0.0;
        for (double thr : detail::threshold_grid(pooled, 50)) {
            std::vector<double> scores(aams.size());
            for (std::size_t k = 0; k < aams.size(); ++k) {
                BinaryMask mask = postprocess(aams[k], thr, cfg.median_kernel, cfg.min_component);
                scores[k] = dice(mask, test.samples[unhealthy_idx[k]].lesion_mask);
            }
            double m = detail::mean_of(scores);
            best_fixed = std::max(best_fixed, m);
            char row[96];
            std::snprintf(row, sizeof(row), "%.9g,%.6f\n", thr, m);
            csv += row;
        }
        FPDM_INFO("ablate fixed-threshold: dynamic %.4f vs best fixed %.4f",
                  detail::mean_of(dynamic_dice), best_fixed);
        auto path = out / "ablate_fixed_threshold.csv";
        io::atomic_write_file(path, csv);
        return path;
    }

    if (axis == "sam-mode") {
        std::vector<std::size_t> unhealthy_idx;
        for (std::size_t i = 0; i < test.samples.size(); ++i)
            if (test.samples[i].unhealthy) unhealthy_idx.push_back(i);
        const std::vector<SamMode> modes{SamMode::Full, SamMode::EndStep, SamMode::Gradient,
                                         SamMode::WeightedGradient};
        std::vector<std::vector<double>> dices(modes.size()), ious(modes.size());
        std::vector<std::vector<ImageGrid>> maps(modes.size());
        for (std::size_t m = 0; m < modes.size(); ++m) {
            dices[m].resize(unhealthy_idx.size());
            ious[m].resize(unhealthy_idx.size());
            maps[m].resize(unhealthy_idx.size());
        }
        SweepOptions sopt;
        sopt.w = calib.w_star;
        sopt.encoding = cfg.encoding_kind();
        sopt.stride = cfg.stride;
        sopt.storage = TraceStorage::StoreAll;
        sopt.guided_drift = cfg.guided_drift;
        parallel_for(unhealthy_idx.size(), cfg.workers, [&](std::size_t k) {
            std::size_t i = unhealthy_idx[k];
            const auto& s = test.samples[i];
            ForwardTrace trace = sweep(s.image, *backend, schedule, sopt, infer_seed(cfg, i));
            auto [t_e, m_te] = select_end_step(trace);
            for (std::size_t m = 0; m < modes.size(); ++m) {
                ImageGrid aam = aggregate(trace, t_e, modes[m], schedule, calib.w_star);
                double q_star = select_quantile(m_te, calib, aam);
                BinaryMask mask = postprocess(aam, q_star, cfg.median_kernel, cfg.min_component);
                dices[m][k] = dice(mask, s.lesion_mask);
                ious[m][k] = iou(mask, s.lesion_mask);
                maps[m][k] = std::move(aam);
            }
        });
        std::string csv = "mode,dice,iou,auprc\n";
        for (std::size_t m = 0; m < modes.size(); ++m) {
            std::vector<const ImageGrid*> views;
            std::vector<const BinaryMask*> truths, fgs;
            for (std::size_t k = 0; k < unhealthy_idx.size(); ++k) {
                views.push_back(&maps[m][k]);
                truths.push_back(&test.samples[unhealthy_idx[k]].lesion_mask);
                fgs.push_back(&test.samples[unhealthy_idx[k]].foreground_mask);
            }
            double pr = views.empty() ? 0.0 : auprc(views, truths, fgs);
            char row[128];
            std::snprintf(row, sizeof(row), "%s,%.6f,%.6f,%.6f\n", to_string(modes[m]),
                          detail::mean_of(dices[m]), detail::mean_of(ious[m]), pr);
            csv += row;
        }
        auto path = out / "ablate_sam_mode.csv";
        io::atomic_write_file(path, csv);
        return path;
    }
    throw ConfigError("ablate: unknown axis '" + axis +
                      "' (expected w | te | fixed-threshold | sam-mode)");
}

struct BaselineOutcome {
    int best_lambda = 0;
    double best_threshold = 0.0;
    double unhealthy_dice = 0.0;
    double mixed_dice = 0.0;
    double unhealthy_auprc = 0.0;
};

// Gaussian-noise reconstruction baseline: noise to a fixed scale, sample
// back unconditionally, score |x0 - x0_hat| with the best global threshold
// from a sweep. Postprocessing matches the main pipeline.
inline BaselineOutcome cmd_baseline(const ExperimentConfig& cfg) {
    cfg.validate();
    auto schedule = cfg.make_schedule();
    auto backend = build_backend(cfg, schedule);
    LoadedSplit test = load_split(cfg, "test");
    if (test.samples.empty()) throw PrerequisiteError("baseline: empty test split");
    const std::filesystem::path out(cfg.paths.out);
    std::filesystem::create_directories(out);

    BaselineOutcome best;
    std::string csv = "lambda,threshold,unhealthy_dice,mixed_dice\n";
    for (int lambda : cfg.effective_baseline_lambdas()) {
        std::vector<ImageGrid> filtered(test.samples.size());
        std::vector<ImageGrid> raw_maps(test.samples.size());
        parallel_for(test.samples.size(), cfg.workers, [&](std::size_t i) {
            Rng rng(derive_seed(cfg.seed ^ io::fnv1a64("baseline"), kStreamBaseline,
                                i * static_cast<std::size_t>(schedule.steps + 1) + lambda));
            ImageGrid map =
                reconstruction_baseline(test.samples[i].image, *backend, schedule, lambda, rng);
            filtered[i] = median_filter(map, cfg.median_kernel);
            raw_maps[i] = std::move(map);
        });
        std::vector<double> pooled;
        for (const auto& f : filtered)
            pooled.insert(pooled.end(), f.values.begin(), f.values.end());

        double lambda_best_thr = 0.0, lambda_best_unh = -1.0, lambda_best_mixed = 0.0;
        for (double thr : detail::threshold_grid(pooled, 50)) {
            std::vector<double> unh, mixed;
            for (std::size_t i = 0; i < test.samples.size(); ++i) {
                BinaryMask mask(filtered[i].height, filtered[i].width);
                for (std::size_t p = 0; p < mask.size(); ++p)
                    mask.values[p] = filtered[i].values[p] >= thr;
                mask = connected_component_filter(mask, cfg.min_component);
                double d = dice(mask, test.samples[i].lesion_mask);
                mixed.push_back(d);
                if (test.samples[i].unhealthy) unh.push_back(d);
            }
            double unh_mean = detail::mean_of(unh);
            if (unh_mean > lambda_best_unh) {
                lambda_best_unh = unh_mean;
                lambda_best_thr = thr;
                lambda_best_mixed = detail::mean_of(mixed);
            }
        }
        char row[128];
        std::snprintf(row, sizeof(row), "%d,%.9g,%.6f,%.6f\n", lambda, lambda_best_thr,
                      lambda_best_unh, lambda_best_mixed);
        csv += row;
        FPDM_INFO("baseline lambda=%d: best unhealthy dice %.4f", lambda, lambda_best_unh);
        if (lambda_best_unh > best.unhealthy_dice) {
            best.best_lambda = lambda;
            best.best_threshold = lambda_best_thr;
            best.unhealthy_dice = lambda_best_unh;
            best.mixed_dice = lambda_best_mixed;
            std::vector<const ImageGrid*> views;
            std::vector<const BinaryMask*> truths, fgs;
            for (std::size_t i = 0; i < test.samples.size(); ++i) {
                if (!test.samples[i].unhealthy) continue;
                views.push_back(&raw_maps[i]);
                truths.push_back(&test.samples[i].lesion_mask);
                fgs.push_back(&test.samples[i].foreground_mask);
            }
            best.unhealthy_auprc = views.empty() ? 0.0 : auprc(views, truths, fgs);
        }
    }
    io::atomic_write_file(out / "baseline_curve.csv", csv);
    nlohmann::json j{{"config_hash", config_hash(cfg)},
                     {"best_lambda", best.best_lambda},
                     {"best_threshold", best.best_threshold},
                     {"unhealthy_dice", best.unhealthy_dice},
                     {"mixed_dice", best.mixed_dice},
                     {"unhealthy_auprc", best.unhealthy_auprc}};
    io::atomic_write_file(out / "baseline_report.json", j.dump(2) + "\n");
    return best;
}

}  // namespace fpdm
