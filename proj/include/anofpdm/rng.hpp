#pragma once

#include <cstdint>
#include <random>

namespace fpdm {

// splitmix64 step; used to derive independent child seeds from a master
// seed so that per-sample / per-step streams can be replayed in isolation.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
    return mix_seed(mix_seed((master ^ 0x6a09e667f3bcc908ULL) + stream) + index);
}

// Named stream tags keep unrelated consumers of the same master seed apart.
enum : std::uint64_t {
    kStreamNoise = 1,       // forward-process noise draws
    kStreamSample = 2,      // per-sample dataset seeds
    kStreamTrain = 3,       // training batch/label/noise draws
    kStreamInit = 4,        // parameter initialization
    kStreamBaseline = 5,    // reconstruction baseline sampling
};

// Seeded generator for all stochastic draws in the pipeline.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }  // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace fpdm
