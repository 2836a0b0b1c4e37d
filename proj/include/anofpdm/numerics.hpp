#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"

namespace fpdm {

// ||a - b||^2 / d
inline double mse(const ImageGrid& a, const ImageGrid& b) {
    require_same_shape(a, b, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double diff = a.values[i] - b.values[i];
        acc += diff * diff;
    }
    return acc / static_cast<double>(a.size());
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size() || u.empty())
        throw ContractViolation("cosine_similarity: sequences must have equal nonzero length");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0)
        throw UndefinedMetricError("cosine_similarity: undefined for an all-zero sequence");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

// Linear-interpolation quantile: q=0 is the minimum, q=1 the maximum.
inline double quantile(std::span<const double> data, double q) {
    if (data.empty()) throw ContractViolation("quantile: empty input");
    if (!(q >= 0.0 && q <= 1.0)) throw ContractViolation("quantile: q outside [0,1]");
    std::vector<double> sorted(data.begin(), data.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted.size() == 1) return sorted[0];
    double pos = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(const ImageGrid& map, double q) {
    return quantile(std::span<const double>(map.values), q);
}

namespace detail {
// Symmetric (edge-repeating) reflection of an out-of-range index.
inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}
}  // namespace detail

inline ImageGrid median_filter(const ImageGrid& map, int kernel) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ConfigError("median_filter: kernel must be odd and >= 1");
    if (kernel == 1) return map;
    ImageGrid out(map.height, map.width, map.role);
    int half = kernel / 2;
    std::vector<double> window;
    window.reserve(static_cast<std::size_t>(kernel) * kernel);
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            window.clear();
            for (int dy = -half; dy <= half; ++dy) {
                int sy = detail::reflect_index(y + dy, map.height);
                for (int dx = -half; dx <= half; ++dx) {
                    int sx = detail::reflect_index(x + dx, map.width);
                    window.push_back(map.at(sy, sx));
                }
            }
            auto mid = window.begin() + window.size() / 2;
            std::nth_element(window.begin(), mid, window.end());
            out.at(y, x) = *mid;  // window size is odd, so this is the median
        }
    }
    return out;
}

// Remove 8-connected components smaller than min_size pixels.
inline BinaryMask connected_component_filter(const BinaryMask& mask, int min_size) {
    if (min_size < 0) throw ContractViolation("connected_component_filter: min_size must be >= 0");
    BinaryMask out(mask.height, mask.width);
    if (min_size <= 1) {
        out.values = mask.values;
        return out;
    }
    std::vector<std::uint8_t> visited(mask.size(), 0);
    std::vector<std::size_t> stack, component;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (mask.values[start] == 0 || visited[start]) continue;
        component.clear();
        stack.assign(1, start);
        visited[start] = 1;
        while (!stack.empty()) {
            std::size_t idx = stack.back();
            stack.pop_back();
            component.push_back(idx);
            int y = static_cast<int>(idx) / mask.width;
            int x = static_cast<int>(idx) % mask.width;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= mask.height || nx < 0 || nx >= mask.width) continue;
                    std::size_t nidx = static_cast<std::size_t>(ny) * mask.width + nx;
                    if (mask.values[nidx] != 0 && !visited[nidx]) {
                        visited[nidx] = 1;
                        stack.push_back(nidx);
                    }
                }
            }
        }
        if (component.size() >= static_cast<std::size_t>(min_size))
            for (std::size_t idx : component) out.values[idx] = 1;
    }
    return out;
}

}  // namespace fpdm
