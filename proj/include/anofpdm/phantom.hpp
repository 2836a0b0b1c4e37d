#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/io.hpp"
#include "anofpdm/numerics.hpp"
#include "anofpdm/rng.hpp"

namespace fpdm {

// Synthetic 2-D sample generator: a smooth elliptical tissue region with
// low-frequency texture on a dark background; unhealthy samples add bright
// blob lesions carrying higher-frequency texture. Intensities are
// normalized by the 99th-percentile foreground value and scaled to [-1,1].
struct PhantomConfig {
    int height = 64;
    int width = 64;
    double unhealthy_prob = 0.5;

    // foreground ellipse semi-axes as fractions of the grid size
    double ellipse_ry_lo = 0.36, ellipse_ry_hi = 0.40;
    double ellipse_rx_lo = 0.29, ellipse_rx_hi = 0.33;

    double background = 0.05;
    double tissue_base = 0.70;
    double texture_amp = 0.06;
    double pixel_noise = 0.015;
    // Intensity ceiling as a multiple of the tissue percentile; leaves
    // headroom so bright lesions do not saturate at the top of the range.
    double normalize_headroom = 1.5;

    int lesion_count_min = 1, lesion_count_max = 2;
    int lesion_area_min = 30, lesion_area_max = 500;  // pixels, total
    double lesion_contrast_lo = 0.25, lesion_contrast_hi = 0.75;
    double lesion_texture_amp = 0.10;

    void validate() const {
        if (height < 8 || width < 8) throw ConfigError("phantom: grid too small");
        if (!(unhealthy_prob >= 0.0 && unhealthy_prob <= 1.0))
            throw ConfigError("phantom: unhealthy_prob outside [0,1]");
        if (!(ellipse_ry_lo <= ellipse_ry_hi && ellipse_rx_lo <= ellipse_rx_hi))
            throw ConfigError("phantom: bad ellipse ranges");
        if (lesion_count_min < 1 || lesion_count_max < lesion_count_min)
            throw ConfigError("phantom: bad lesion count range");
        if (lesion_area_min < 1 || lesion_area_max < lesion_area_min)
            throw ConfigError("phantom: bad lesion area range");
        if (!(lesion_contrast_lo > 0.0 && lesion_contrast_hi >= lesion_contrast_lo))
            throw ConfigError("phantom: bad lesion contrast range");
    }
};

struct PhantomSample {
    ImageGrid image;
    bool unhealthy = false;
    BinaryMask lesion_mask;
    BinaryMask foreground_mask;
    std::uint64_t seed = 0;
};

namespace detail {
struct Blob {
    double cy, cx, ry, rx, theta;
};

inline void paint_blob(const Blob& b, const BinaryMask& fg, BinaryMask& out) {
    double c = std::cos(b.theta), s = std::sin(b.theta);
    int y0 = std::max(0, static_cast<int>(b.cy - b.ry - b.rx - 1));
    int y1 = std::min(out.height - 1, static_cast<int>(b.cy + b.ry + b.rx + 1));
    int x0 = std::max(0, static_cast<int>(b.cx - b.ry - b.rx - 1));
    int x1 = std::min(out.width - 1, static_cast<int>(b.cx + b.ry + b.rx + 1));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double dy = y - b.cy, dx = x - b.cx;
            double u = c * dx + s * dy;
            double v = -s * dx + c * dy;
            double r = (u / b.rx) * (u / b.rx) + (v / b.ry) * (v / b.ry);
            if (r <= 1.0 && fg.at(y, x)) out.set(y, x, true);
        }
    }
}
}  // namespace detail

inline PhantomSample generate_sample(const PhantomConfig& cfg, std::uint64_t seed,
                                     std::optional<bool> forced_label = std::nullopt) {
    cfg.validate();
    Rng rng(seed);
    PhantomSample out;
    out.seed = seed;
    out.unhealthy = forced_label ? *forced_label : rng.uniform() < cfg.unhealthy_prob;

    int h = cfg.height, w = cfg.width;
    double cy = 0.5 * (h - 1) + rng.uniform(-1.5, 1.5);
    double cx = 0.5 * (w - 1) + rng.uniform(-1.5, 1.5);
    double ry = rng.uniform(cfg.ellipse_ry_lo, cfg.ellipse_ry_hi) * h;
    double rx = rng.uniform(cfg.ellipse_rx_lo, cfg.ellipse_rx_hi) * w;

    out.foreground_mask = BinaryMask(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double dy = (y - cy) / ry, dx = (x - cx) / rx;
            out.foreground_mask.set(y, x, dy * dy + dx * dx <= 1.0);
        }

    // smooth tissue texture: a few low-frequency cosine waves
    struct Wave {
        double fy, fx, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
        waves.push_back({rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08),
                         rng.uniform(0.0, 2.0 * M_PI), cfg.texture_amp * rng.uniform(0.4, 1.0)});

    out.lesion_mask = BinaryMask(h, w);
    double lesion_contrast = 0.0;
    Wave lesion_wave{rng.uniform(0.15, 0.25), rng.uniform(0.15, 0.25),
                     rng.uniform(0.0, 2.0 * M_PI), cfg.lesion_texture_amp};
    if (out.unhealthy) {
        lesion_contrast = rng.uniform(cfg.lesion_contrast_lo, cfg.lesion_contrast_hi);
        bool placed = false;
        for (int attempt = 0; attempt < 25 && !placed; ++attempt) {
            BinaryMask trial(h, w);
            int target = rng.uniform_int(cfg.lesion_area_min, cfg.lesion_area_max);
            int count = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
            for (int b = 0; b < count; ++b) {
                double area = static_cast<double>(target) / count;
                double aspect = rng.uniform(0.6, 1.6);
                double bry = std::sqrt(area * aspect / M_PI);
                double brx = std::sqrt(area / (aspect * M_PI));
                // keep the blob center well inside the tissue
                double bcy, bcx;
                int tries = 0;
                do {
                    bcy = cy + rng.uniform(-0.7, 0.7) * ry;
                    bcx = cx + rng.uniform(-0.7, 0.7) * rx;
                } while (++tries < 20 &&
                         !out.foreground_mask.at(static_cast<int>(bcy), static_cast<int>(bcx)));
                detail::paint_blob({bcy, bcx, bry, brx, rng.uniform(0.0, M_PI)},
                                   out.foreground_mask, trial);
            }
            auto area = static_cast<int>(trial.count());
            if (area >= cfg.lesion_area_min && area <= cfg.lesion_area_max) {
                out.lesion_mask = trial;
                placed = true;
            }
        }
        if (!placed)
            throw ConfigError("phantom: could not place lesions within the configured area bounds");
    }

    // raw intensities, then 99th-percentile normalization. The percentile is
    // taken over lesion-free tissue: at volume scale a lesion is a tiny
    // fraction of the foreground and barely moves the percentile, while on a
    // single small grid it would capture it and dim the tissue of every
    // unhealthy sample, leaking the label into the global intensity scale.
    ImageGrid raw(h, w, GridRole::AnomalyMap, cfg.background);
    std::vector<double> tissue_values;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!out.foreground_mask.at(y, x)) continue;
            double v = cfg.tissue_base + cfg.pixel_noise * rng.normal();
            for (const auto& wave : waves)
                v += wave.amp * std::cos(2.0 * M_PI * (wave.fy * y + wave.fx * x) + wave.phase);
            if (out.lesion_mask.at(y, x)) {
                v += lesion_contrast;
                v += lesion_wave.amp *
                     std::cos(2.0 * M_PI * (lesion_wave.fy * y + lesion_wave.fx * x) +
                              lesion_wave.phase);
            } else {
                tissue_values.push_back(v);
            }
            raw.at(y, x) = v;
        }
    double p99 = quantile(std::span<const double>(tissue_values), 0.99);
    out.image = ImageGrid(h, w, GridRole::Image);
    double ceiling = cfg.normalize_headroom;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        double norm = std::clamp(raw.values[i] / p99, 0.0, ceiling) / ceiling;
        out.image.values[i] = 2.0 * norm - 1.0;
    }
    return out;
}

// --- sample file format -----------------------------------------------------
// magic "FPD1", u16 version, u16 height, u16 width, u8 label, foreground
// mask rows (bit-packed, LSB first), lesion mask rows, float32 LE pixels.

namespace detail {
constexpr char kSampleMagic[4] = {'F', 'P', 'D', '1'};
constexpr std::uint16_t kSampleVersion = 1;

inline void pack_mask(io::ByteWriter& w, const BinaryMask& m) {
    int row_bytes = (m.width + 7) / 8;
    for (int y = 0; y < m.height; ++y) {
        for (int b = 0; b < row_bytes; ++b) {
            std::uint8_t byte = 0;
            for (int bit = 0; bit < 8; ++bit) {
                int x = b * 8 + bit;
                if (x < m.width && m.at(y, x)) byte |= static_cast<std::uint8_t>(1u << bit);
            }
            w.u8(byte);
        }
    }
}

inline BinaryMask unpack_mask(io::ByteReader& r, int h, int w) {
    BinaryMask m(h, w);
    int row_bytes = (w + 7) / 8;
    for (int y = 0; y < h; ++y) {
        for (int b = 0; b < row_bytes; ++b) {
            std::uint8_t byte = r.u8();
            for (int bit = 0; bit < 8; ++bit) {
                int x = b * 8 + bit;
                if (x < w) m.set(y, x, (byte >> bit) & 1);
            }
        }
    }
    return m;
}
}  // namespace detail

inline void save_sample(const std::filesystem::path& path, const PhantomSample& s) {
    io::ByteWriter w;
    w.bytes(detail::kSampleMagic, 4);
    w.u16(detail::kSampleVersion);
    w.u16(static_cast<std::uint16_t>(s.image.height));
    w.u16(static_cast<std::uint16_t>(s.image.width));
    w.u8(s.unhealthy ? 1 : 0);
    detail::pack_mask(w, s.foreground_mask);
    detail::pack_mask(w, s.lesion_mask);
    for (double v : s.image.values) w.f32(static_cast<float>(v));
    io::atomic_write_file(path, w.buf);
}

inline PhantomSample load_sample(const std::filesystem::path& path) {
    std::string data = io::read_file(path);
    io::ByteReader r(data);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, detail::kSampleMagic, 4) != 0)
        throw FormatError("sample: bad magic in " + path.string());
    if (r.u16() != detail::kSampleVersion)
        throw FormatError("sample: unsupported version in " + path.string());
    int h = r.u16(), w = r.u16();
    if (h < 1 || w < 1) throw FormatError("sample: bad dimensions in " + path.string());
    PhantomSample s;
    s.unhealthy = r.u8() != 0;
    s.foreground_mask = detail::unpack_mask(r, h, w);
    s.lesion_mask = detail::unpack_mask(r, h, w);
    s.image = ImageGrid(h, w, GridRole::Image);
    for (std::size_t i = 0; i < s.image.size(); ++i)
        s.image.values[i] = static_cast<double>(r.f32());
    if (!r.at_end()) throw FormatError("sample: trailing bytes in " + path.string());
    return s;
}

// --- dataset manifests -------------------------------------------------------

struct ManifestEntry {
    std::string file;
    bool unhealthy = false;
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::string split;
    std::size_t count = 0;
    std::string config_hash;
    std::vector<ManifestEntry> entries;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["split"] = m.split;
    j["count"] = m.count;
    j["config_hash"] = m.config_hash;
    auto entries = nlohmann::json::array();
    for (const auto& e : m.entries)
        entries.push_back({{"file", e.file}, {"unhealthy", e.unhealthy}, {"seed", e.seed}});
    j["samples"] = entries;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.split = j.at("split").get<std::string>();
    m.count = j.at("count").get<std::size_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& e : j.at("samples")) {
        ManifestEntry entry;
        entry.file = e.at("file").get<std::string>();
        entry.unhealthy = e.at("unhealthy").get<bool>();
        entry.seed = e.at("seed").get<std::uint64_t>();
        m.entries.push_back(std::move(entry));
    }
    if (m.entries.size() != m.count)
        throw FormatError("manifest: count does not match sample list");
    return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    io::atomic_write_file(path, to_json(m).dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: " + std::string(e.what()));
    }
    return manifest_from_json(j);
}

// Generates `count` samples with per-sample seeds derived from the master
// seed and the split name; writes sample files plus a manifest.
inline DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::string& split,
                                        std::size_t count, std::uint64_t master_seed,
                                        const std::filesystem::path& dir,
                                        const std::string& config_hash) {
    cfg.validate();
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.split = split;
    m.count = count;
    m.config_hash = config_hash;
    std::uint64_t split_tag = io::fnv1a64(split);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t seed = derive_seed(master_seed ^ split_tag, kStreamSample, i);
        PhantomSample s = generate_sample(cfg, seed);
        std::string name = split + "_" + std::to_string(i) + ".fpd";
        save_sample(dir / name, s);
        m.entries.push_back({name, s.unhealthy, seed});
    }
    save_manifest(dir / ("manifest_" + split + ".json"), m);
    return m;
}

}  // namespace fpdm
