#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"

namespace fpdm {

// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const BinaryMask& pred, const BinaryMask& truth) {
    if (!pred.same_shape(truth)) throw ContractViolation("dice: shape mismatch");
    std::size_t inter = 0, total = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool a = pred.values[i] != 0, b = truth.values[i] != 0;
        inter += a && b;
        total += a;
        total += b;
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

// |A n B| / |A u B|; two empty masks score 1.
inline double iou(const BinaryMask& pred, const BinaryMask& truth) {
    if (!pred.same_shape(truth)) throw ContractViolation("iou: shape mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool a = pred.values[i] != 0, b = truth.values[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {
// Area under the precision-recall curve for pooled (score, positive) pairs:
// descending-score sweep with tied scores grouped, trapezoidal integration,
// anchored at (recall 0, precision of the top group).
inline double auprc_pooled(std::vector<std::pair<double, bool>>& pixels) {
    std::size_t total_pos = 0;
    for (const auto& p : pixels) total_pos += p.second;
    if (total_pos == 0) throw UndefinedMetricError("auprc: no positive pixels");
    std::sort(pixels.begin(), pixels.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    double area = 0.0;
    double prev_recall = 0.0, prev_precision = -1.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < pixels.size()) {
        double score = pixels[i].first;
        while (i < pixels.size() && pixels[i].first == score) {
            tp += pixels[i].second;
            fp += !pixels[i].second;
            ++i;
        }
        double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        if (prev_precision < 0.0) prev_precision = precision;  // anchor at recall 0
        area += (recall - prev_recall) * 0.5 * (precision + prev_precision);
        prev_recall = recall;
        prev_precision = precision;
    }
    return area;
}
}  // namespace detail

// Pixel-pooled area under the precision-recall curve restricted to
// foreground pixels across all samples.
inline double auprc(const std::vector<const ImageGrid*>& scores,
                    const std::vector<const BinaryMask*>& truths,
                    const std::vector<const BinaryMask*>& foregrounds) {
    if (scores.empty() || scores.size() != truths.size() || scores.size() != foregrounds.size())
        throw ContractViolation("auprc: need aligned nonempty lists");
    std::vector<std::pair<double, bool>> pixels;
    for (std::size_t s = 0; s < scores.size(); ++s) {
        const ImageGrid& map = *scores[s];
        const BinaryMask& truth = *truths[s];
        const BinaryMask& fg = *foregrounds[s];
        if (map.height != truth.height || map.width != truth.width || !truth.same_shape(fg))
            throw ContractViolation("auprc: shape mismatch");
        for (std::size_t i = 0; i < map.size(); ++i)
            if (fg.values[i] != 0) pixels.emplace_back(map.values[i], truth.values[i] != 0);
    }
    if (pixels.empty()) throw UndefinedMetricError("auprc: empty foreground");
    return detail::auprc_pooled(pixels);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ContractViolation("pearson: need equal lengths >= 2");
    double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw UndefinedMetricError("pearson: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

struct SetupMetrics {
    double dice = 0.0;
    double iou = 0.0;
    double auprc = 0.0;
    std::size_t samples = 0;
};

struct EvalReport {
    SetupMetrics mixed;
    SetupMetrics unhealthy_only;
    double classification_accuracy = 0.0;
    double pearson_size_divergence = 0.0;
    bool pearson_defined = false;
    std::size_t total_samples = 0;
    std::size_t unhealthy_samples = 0;
};

}  // namespace fpdm
