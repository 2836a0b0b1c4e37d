#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anofpdm/denoiser.hpp"
#include "anofpdm/errors.hpp"
#include "anofpdm/forward.hpp"
#include "anofpdm/io.hpp"
#include "anofpdm/phantom.hpp"
#include "anofpdm/schedule.hpp"
#include "anofpdm/segmentation.hpp"

namespace fpdm {

struct ScheduleConfig {
    int steps = 200;
    double beta_start = 1e-4;
    // Desk-scale default chosen so the final alpha_bar matches the common
    // 1000-step setting (about 4e-5).
    double beta_end = 0.1;
};

struct OracleConfig {
    // "fit-train": fit the mixture per pixel from the training split.
    // "explicit": constant per-class moments below, at phantom dimensions.
    std::string source = "fit-train";
    double var_floor = 1e-6;
    bool pool_means = true;  // classes share per-pixel means when fitting
    double mean_h = -0.3, var_h = 0.01;
    double mean_u = 0.2, var_u = 0.01;
    double prior_h = 0.5;
};

struct TrainSettings {
    TrainConfig opt;  // lr, moments, batch, epochs, null ratio, EMA, seed
    std::array<int, 3> widths{16, 32, 64};
    int emb_dim = 32;
    long max_steps = 0;  // 0 = run all epochs
    int log_every = 50;
};

struct SplitSizes {
    std::size_t train = 2000;
    std::size_t val = 100;
    std::size_t test = 200;
};

struct PathsConfig {
    std::string data_dir = "data";
    std::string model = "model.ckpt";
    std::string calibration = "calibration.json";
    std::string out = "out";
};

struct ExperimentConfig {
    ScheduleConfig schedule;
    std::uint64_t seed = 7;
    int workers = 1;
    std::string encoding = "ddim";   // ddpm | ddim
    std::string backend = "oracle";  // oracle | checkpoint:PATH
    int stride = 1;
    std::string storage = "store-all";  // store-all | two-pass
    std::string sam_mode = "full";
    bool guided_drift = false;
    std::vector<double> guidance_candidates{0.5, 1.0, 2.0, 4.0, 8.0};
    double accuracy_ratio = 0.98;
    double quantile_lo = 0.90;
    double quantile_hi = 0.98;
    int median_kernel = 5;
    int min_component = 4;
    PhantomConfig phantom;
    SplitSizes splits;
    TrainSettings train;
    OracleConfig oracle;
    std::vector<int> baseline_lambdas;  // empty -> T/8, T/4, T/2
    PathsConfig paths;

    DiffusionSchedule make_schedule() const {
        return make_linear_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
    }

    EncodingKind encoding_kind() const {
        if (encoding == "ddpm") return EncodingKind::Stochastic;
        if (encoding == "ddim") return EncodingKind::Deterministic;
        throw ConfigError("config: encoding must be ddpm or ddim");
    }

    TraceStorage storage_kind() const {
        if (storage == "store-all") return TraceStorage::StoreAll;
        if (storage == "two-pass") return TraceStorage::TwoPass;
        throw ConfigError("config: storage must be store-all or two-pass");
    }

    SamMode sam_mode_kind() const { return sam_mode_from_string(sam_mode); }

    std::vector<int> effective_baseline_lambdas() const {
        if (!baseline_lambdas.empty()) return baseline_lambdas;
        int t = schedule.steps;
        return {std::max(1, t / 8), std::max(1, t / 4), std::max(1, t / 2)};
    }

    void validate() const {
        if (schedule.steps < 1) throw ConfigError("config: schedule steps must be >= 1");
        if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end &&
              schedule.beta_end < 1.0))
            throw ConfigError("config: bad beta bounds");
        encoding_kind();
        storage_kind();
        sam_mode_kind();
        if (stride < 1) throw ConfigError("config: stride must be >= 1");
        if (workers < 1) throw ConfigError("config: workers must be >= 1");
        if (guidance_candidates.empty())
            throw ConfigError("config: need at least one guidance candidate");
        if (!std::is_sorted(guidance_candidates.begin(), guidance_candidates.end()))
            throw ConfigError("config: guidance candidates must be ascending");
        for (double w : guidance_candidates)
            if (w < 0.0) throw ConfigError("config: guidance candidates must be >= 0");
        if (!(accuracy_ratio > 0.0 && accuracy_ratio <= 1.0))
            throw ConfigError("config: accuracy ratio must be in (0,1]");
        if (!(quantile_lo >= 0.0 && quantile_lo < quantile_hi && quantile_hi <= 1.0))
            throw ConfigError("config: need 0 <= quantile_lo < quantile_hi <= 1");
        if (median_kernel < 1 || median_kernel % 2 == 0)
            throw ConfigError("config: median kernel must be odd");
        if (min_component < 0) throw ConfigError("config: min component must be >= 0");
        if (backend != "oracle" && backend.rfind("checkpoint:", 0) != 0)
            throw ConfigError("config: backend must be 'oracle' or 'checkpoint:PATH'");
        if (oracle.source != "fit-train" && oracle.source != "explicit")
            throw ConfigError("config: oracle source must be fit-train or explicit");
        for (int lambda : baseline_lambdas)
            if (lambda < 1 || lambda > schedule.steps)
                throw ConfigError("config: baseline lambda outside schedule");
        phantom.validate();
        train.opt.validate();
        DenoiserSpec spec;
        spec.widths = train.widths;
        spec.emb_dim = train.emb_dim;
        spec.validate();
    }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["schedule"] = {{"steps", c.schedule.steps},
                     {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end}};
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    j["encoding"] = c.encoding;
    j["backend"] = c.backend;
    j["stride"] = c.stride;
    j["storage"] = c.storage;
    j["sam_mode"] = c.sam_mode;
    j["guided_drift"] = c.guided_drift;
    j["guidance_candidates"] = c.guidance_candidates;
    j["accuracy_ratio"] = c.accuracy_ratio;
    j["quantile_lo"] = c.quantile_lo;
    j["quantile_hi"] = c.quantile_hi;
    j["median_kernel"] = c.median_kernel;
    j["min_component"] = c.min_component;
    j["phantom"] = {{"height", c.phantom.height},
                    {"width", c.phantom.width},
                    {"unhealthy_prob", c.phantom.unhealthy_prob},
                    {"ellipse_ry_lo", c.phantom.ellipse_ry_lo},
                    {"ellipse_ry_hi", c.phantom.ellipse_ry_hi},
                    {"ellipse_rx_lo", c.phantom.ellipse_rx_lo},
                    {"ellipse_rx_hi", c.phantom.ellipse_rx_hi},
                    {"background", c.phantom.background},
                    {"tissue_base", c.phantom.tissue_base},
                    {"texture_amp", c.phantom.texture_amp},
                    {"pixel_noise", c.phantom.pixel_noise},
                    {"normalize_headroom", c.phantom.normalize_headroom},
                    {"lesion_count_min", c.phantom.lesion_count_min},
                    {"lesion_count_max", c.phantom.lesion_count_max},
                    {"lesion_area_min", c.phantom.lesion_area_min},
                    {"lesion_area_max", c.phantom.lesion_area_max},
                    {"lesion_contrast_lo", c.phantom.lesion_contrast_lo},
                    {"lesion_contrast_hi", c.phantom.lesion_contrast_hi},
                    {"lesion_texture_amp", c.phantom.lesion_texture_amp}};
    j["splits"] = {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}};
    j["train"] = {{"lr", c.train.opt.lr},
                  {"beta1", c.train.opt.beta1},
                  {"beta2", c.train.opt.beta2},
                  {"batch", c.train.opt.batch},
                  {"epochs", c.train.opt.epochs},
                  {"null_ratio", c.train.opt.null_ratio},
                  {"ema_rate", c.train.opt.ema_rate},
                  {"widths", c.train.widths},
                  {"emb_dim", c.train.emb_dim},
                  {"max_steps", c.train.max_steps},
                  {"log_every", c.train.log_every}};
    j["oracle"] = {{"source", c.oracle.source},
                   {"var_floor", c.oracle.var_floor},
                   {"pool_means", c.oracle.pool_means},
                   {"mean_h", c.oracle.mean_h},
                   {"var_h", c.oracle.var_h},
                   {"mean_u", c.oracle.mean_u},
                   {"var_u", c.oracle.var_u},
                   {"prior_h", c.oracle.prior_h}};
    j["baseline_lambdas"] = c.baseline_lambdas;
    j["paths"] = {{"data_dir", c.paths.data_dir},
                  {"model", c.paths.model},
                  {"calibration", c.paths.calibration},
                  {"out", c.paths.out}};
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.schedule.steps = s.value("steps", c.schedule.steps);
            c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
            c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
        }
        c.seed = j.value("seed", c.seed);
        c.workers = j.value("workers", c.workers);
        c.encoding = j.value("encoding", c.encoding);
        c.backend = j.value("backend", c.backend);
        c.stride = j.value("stride", c.stride);
        c.storage = j.value("storage", c.storage);
        c.sam_mode = j.value("sam_mode", c.sam_mode);
        c.guided_drift = j.value("guided_drift", c.guided_drift);
        if (j.contains("guidance_candidates"))
            c.guidance_candidates = j.at("guidance_candidates").get<std::vector<double>>();
        c.accuracy_ratio = j.value("accuracy_ratio", c.accuracy_ratio);
        c.quantile_lo = j.value("quantile_lo", c.quantile_lo);
        c.quantile_hi = j.value("quantile_hi", c.quantile_hi);
        c.median_kernel = j.value("median_kernel", c.median_kernel);
        c.min_component = j.value("min_component", c.min_component);
        if (j.contains("phantom")) {
            const auto& p = j.at("phantom");
            c.phantom.height = p.value("height", c.phantom.height);
            c.phantom.width = p.value("width", c.phantom.width);
            c.phantom.unhealthy_prob = p.value("unhealthy_prob", c.phantom.unhealthy_prob);
            c.phantom.ellipse_ry_lo = p.value("ellipse_ry_lo", c.phantom.ellipse_ry_lo);
            c.phantom.ellipse_ry_hi = p.value("ellipse_ry_hi", c.phantom.ellipse_ry_hi);
            c.phantom.ellipse_rx_lo = p.value("ellipse_rx_lo", c.phantom.ellipse_rx_lo);
            c.phantom.ellipse_rx_hi = p.value("ellipse_rx_hi", c.phantom.ellipse_rx_hi);
            c.phantom.background = p.value("background", c.phantom.background);
            c.phantom.tissue_base = p.value("tissue_base", c.phantom.tissue_base);
            c.phantom.texture_amp = p.value("texture_amp", c.phantom.texture_amp);
            c.phantom.pixel_noise = p.value("pixel_noise", c.phantom.pixel_noise);
            c.phantom.normalize_headroom =
                p.value("normalize_headroom", c.phantom.normalize_headroom);
            c.phantom.lesion_count_min = p.value("lesion_count_min", c.phantom.lesion_count_min);
            c.phantom.lesion_count_max = p.value("lesion_count_max", c.phantom.lesion_count_max);
            c.phantom.lesion_area_min = p.value("lesion_area_min", c.phantom.lesion_area_min);
            c.phantom.lesion_area_max = p.value("lesion_area_max", c.phantom.lesion_area_max);
            c.phantom.lesion_contrast_lo =
                p.value("lesion_contrast_lo", c.phantom.lesion_contrast_lo);
            c.phantom.lesion_contrast_hi =
                p.value("lesion_contrast_hi", c.phantom.lesion_contrast_hi);
            c.phantom.lesion_texture_amp =
                p.value("lesion_texture_amp", c.phantom.lesion_texture_amp);
        }
        if (j.contains("splits")) {
            const auto& s = j.at("splits");
            c.splits.train = s.value("train", c.splits.train);
            c.splits.val = s.value("val", c.splits.val);
            c.splits.test = s.value("test", c.splits.test);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.train.opt.lr = t.value("lr", c.train.opt.lr);
            c.train.opt.beta1 = t.value("beta1", c.train.opt.beta1);
            c.train.opt.beta2 = t.value("beta2", c.train.opt.beta2);
            c.train.opt.batch = t.value("batch", c.train.opt.batch);
            c.train.opt.epochs = t.value("epochs", c.train.opt.epochs);
            c.train.opt.null_ratio = t.value("null_ratio", c.train.opt.null_ratio);
            c.train.opt.ema_rate = t.value("ema_rate", c.train.opt.ema_rate);
            if (t.contains("widths")) {
                auto w = t.at("widths").get<std::vector<int>>();
                if (w.size() != 3) throw ConfigError("config: train.widths must have 3 entries");
                std::copy(w.begin(), w.end(), c.train.widths.begin());
            }
            c.train.emb_dim = t.value("emb_dim", c.train.emb_dim);
            c.train.max_steps = t.value("max_steps", c.train.max_steps);
            c.train.log_every = t.value("log_every", c.train.log_every);
        }
        if (j.contains("oracle")) {
            const auto& o = j.at("oracle");
            c.oracle.source = o.value("source", c.oracle.source);
            c.oracle.var_floor = o.value("var_floor", c.oracle.var_floor);
            c.oracle.pool_means = o.value("pool_means", c.oracle.pool_means);
            c.oracle.mean_h = o.value("mean_h", c.oracle.mean_h);
            c.oracle.var_h = o.value("var_h", c.oracle.var_h);
            c.oracle.mean_u = o.value("mean_u", c.oracle.mean_u);
            c.oracle.var_u = o.value("var_u", c.oracle.var_u);
            c.oracle.prior_h = o.value("prior_h", c.oracle.prior_h);
        }
        if (j.contains("baseline_lambdas"))
            c.baseline_lambdas = j.at("baseline_lambdas").get<std::vector<int>>();
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            c.paths.data_dir = p.value("data_dir", c.paths.data_dir);
            c.paths.model = p.value("model", c.paths.model);
            c.paths.calibration = p.value("calibration", c.paths.calibration);
            c.paths.out = p.value("out", c.paths.out);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: cannot parse " + path.string() + ": " + e.what());
    } catch (const PrerequisiteError&) {
        throw ConfigError("config: cannot open " + path.string());
    }
    return config_from_json(j);
}

// Stable identity of the full effective config; embedded in every artifact.
inline std::string config_hash(const ExperimentConfig& c) {
    return io::hex64(io::fnv1a64(to_json(c).dump()));
}

}  // namespace fpdm
