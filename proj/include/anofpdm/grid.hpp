#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "anofpdm/errors.hpp"

namespace fpdm {

// What a grid's values mean. Image-role grids are expected to live in
// [-1, 1]; map and gradient grids are unconstrained.
enum class GridRole : std::uint8_t { Image, AnomalyMap, Gradient };

// H x W single-channel real field, row-major.
struct ImageGrid {
    int height = 0;
    int width = 0;
    GridRole role = GridRole::AnomalyMap;
    std::vector<double> values;

    ImageGrid() = default;
    ImageGrid(int h, int w, GridRole r, double fill = 0.0)
        : height(h), width(w), role(r), values(static_cast<std::size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0) throw ContractViolation("ImageGrid: dimensions must be positive");
    }

    static ImageGrid zeros(int h, int w, GridRole r = GridRole::AnomalyMap) {
        return ImageGrid(h, w, r, 0.0);
    }
    static ImageGrid constant(int h, int w, double c, GridRole r = GridRole::AnomalyMap) {
        return ImageGrid(h, w, r, c);
    }

    std::size_t size() const { return values.size(); }
    double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

    bool same_shape(const ImageGrid& o) const { return height == o.height && width == o.width; }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* where) {
    if (!a.same_shape(b))
        throw ContractViolation(std::string(where) + ": shape mismatch (" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                                std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
}

// Per-pixel boolean mask with the same layout as its source grid.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;  // 0 or 1

    BinaryMask() = default;
    BinaryMask(int h, int w, bool fill = false)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {
        if (h <= 0 || w <= 0) throw ContractViolation("BinaryMask: dimensions must be positive");
    }

    std::size_t size() const { return values.size(); }
    bool at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v) { values[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : values) n += v != 0;
        return n;
    }

    bool operator==(const BinaryMask& o) const {
        return height == o.height && width == o.width && values == o.values;
    }
};

}  // namespace fpdm
