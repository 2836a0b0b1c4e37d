#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/io.hpp"
#include "anofpdm/rng.hpp"
#include "anofpdm/schedule.hpp"
#include "anofpdm/score.hpp"

namespace fpdm {

// Architecture of the small conditional denoiser: a 3-level convolutional
// encoder-decoder with skip connections. Conditioning enters as a learned
// per-channel bias (projected from a sinusoidal time embedding plus a label
// embedding) after every convolution except the output head.
struct DenoiserSpec {
    int in_channels = 1;
    std::array<int, 3> widths{16, 32, 64};
    int emb_dim = 32;

    bool operator==(const DenoiserSpec& o) const = default;

    void validate() const {
        if (in_channels != 1) throw ConfigError("denoiser: only single-channel inputs supported");
        for (int w : widths)
            if (w < 1) throw ConfigError("denoiser: widths must be positive");
        if (emb_dim < 2 || emb_dim % 2 != 0)
            throw ConfigError("denoiser: embedding dimension must be even and >= 2");
    }
};

template <class Real>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    std::vector<Real> v;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_)
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, Real(0)) {}

    Real* plane(int ci) { return v.data() + static_cast<std::size_t>(ci) * h * w; }
    const Real* plane(int ci) const { return v.data() + static_cast<std::size_t>(ci) * h * w; }
    std::size_t size() const { return v.size(); }
};

namespace nn {

// y[co] = bias[co] + sum_ci conv3x3(x[ci], w[co][ci]); zero padding, same size.
template <class Real>
void conv3x3_forward(const Tensor3<Real>& x, const Real* weight, const Real* bias, int cout,
                     Tensor3<Real>& y) {
    int h = x.h, w = x.w;
    y.c = cout;
    y.h = h;
    y.w = w;
    y.v.assign(static_cast<std::size_t>(cout) * h * w, Real(0));
    for (int co = 0; co < cout; ++co) {
        Real* out = y.plane(co);
        Real b = bias[co];
        for (int i = 0; i < h * w; ++i) out[i] = b;
        for (int ci = 0; ci < x.c; ++ci) {
            const Real* in = x.plane(ci);
            const Real* wv = weight + (static_cast<std::size_t>(co) * x.c + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    Real wk = wv[ky * 3 + kx];
                    if (wk == Real(0)) continue;
                    int dy = ky - 1, dx = kx - 1;
                    int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int yy = y0; yy < y1; ++yy) {
                        Real* orow = out + yy * w;
                        const Real* irow = in + (yy + dy) * w + dx;
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wk * irow[xx];
                    }
                }
            }
        }
    }
}

// Accumulates dW/db and, when dx is nonnull, the input gradient.
template <class Real>
void conv3x3_backward(const Tensor3<Real>& x, const Real* weight, int cout,
                      const Tensor3<Real>& dy, Real* dweight, Real* dbias, Tensor3<Real>* dx) {
    int h = x.h, w = x.w;
    if (dx) {
        dx->c = x.c;
        dx->h = h;
        dx->w = w;
        dx->v.assign(x.size(), Real(0));
    }
    for (int co = 0; co < cout; ++co) {
        const Real* dout = dy.plane(co);
        Real db = 0;
        for (int i = 0; i < h * w; ++i) db += dout[i];
        dbias[co] += db;
        for (int ci = 0; ci < x.c; ++ci) {
            const Real* in = x.plane(ci);
            Real* dwv = dweight + (static_cast<std::size_t>(co) * x.c + ci) * 9;
            const Real* wv = weight + (static_cast<std::size_t>(co) * x.c + ci) * 9;
            Real* dxp = dx ? dx->plane(ci) : nullptr;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    int dy_ = ky - 1, dx_ = kx - 1;
                    int y0 = std::max(0, -dy_), y1 = std::min(h, h - dy_);
                    int x0 = std::max(0, -dx_), x1 = std::min(w, w - dx_);
                    Real acc = 0;
                    for (int yy = y0; yy < y1; ++yy) {
                        const Real* orow = dout + yy * w;
                        const Real* irow = in + (yy + dy_) * w + dx_;
                        for (int xx = x0; xx < x1; ++xx) acc += orow[xx] * irow[xx];
                    }
                    dwv[ky * 3 + kx] += acc;
                    if (dxp) {
                        Real wk = wv[ky * 3 + kx];
                        if (wk == Real(0)) continue;
                        for (int yy = y0; yy < y1; ++yy) {
                            const Real* orow = dout + yy * w;
                            Real* drow = dxp + (yy + dy_) * w + dx_;
                            for (int xx = x0; xx < x1; ++xx) drow[xx] += wk * orow[xx];
                        }
                    }
                }
            }
        }
    }
}

template <class Real>
Tensor3<Real> avgpool2(const Tensor3<Real>& x) {
    Tensor3<Real> y(x.c, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c) {
        const Real* in = x.plane(c);
        Real* out = y.plane(c);
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx) {
                const Real* p = in + 2 * yy * x.w + 2 * xx;
                out[yy * y.w + xx] = Real(0.25) * (p[0] + p[1] + p[x.w] + p[x.w + 1]);
            }
    }
    return y;
}

template <class Real>
void avgpool2_backward(const Tensor3<Real>& dy, Tensor3<Real>& dx_accum) {
    for (int c = 0; c < dy.c; ++c) {
        const Real* g = dy.plane(c);
        Real* out = dx_accum.plane(c);
        int w = dx_accum.w;
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
                Real v = Real(0.25) * g[yy * dy.w + xx];
                Real* p = out + 2 * yy * w + 2 * xx;
                p[0] += v;
                p[1] += v;
                p[w] += v;
                p[w + 1] += v;
            }
    }
}

template <class Real>
Tensor3<Real> upsample2(const Tensor3<Real>& x) {
    Tensor3<Real> y(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c) {
        const Real* in = x.plane(c);
        Real* out = y.plane(c);
        for (int yy = 0; yy < x.h; ++yy)
            for (int xx = 0; xx < x.w; ++xx) {
                Real v = in[yy * x.w + xx];
                Real* p = out + 2 * yy * y.w + 2 * xx;
                p[0] = v;
                p[1] = v;
                p[y.w] = v;
                p[y.w + 1] = v;
            }
    }
    return y;
}

template <class Real>
Tensor3<Real> upsample2_backward(const Tensor3<Real>& dy) {
    Tensor3<Real> dx(dy.c, dy.h / 2, dy.w / 2);
    for (int c = 0; c < dy.c; ++c) {
        const Real* g = dy.plane(c);
        Real* out = dx.plane(c);
        for (int yy = 0; yy < dx.h; ++yy)
            for (int xx = 0; xx < dx.w; ++xx) {
                const Real* p = g + 2 * yy * dy.w + 2 * xx;
                out[yy * dx.w + xx] = p[0] + p[1] + p[dy.w] + p[dy.w + 1];
            }
    }
    return dx;
}

template <class Real>
Tensor3<Real> concat(const Tensor3<Real>& a, const Tensor3<Real>& b) {
    Tensor3<Real> y(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + a.v.size());
    return y;
}

template <class Real>
inline Real silu(Real z) {
    return z / (Real(1) + std::exp(-z));
}

template <class Real>
inline Real silu_grad(Real z) {
    Real s = Real(1) / (Real(1) + std::exp(-z));
    return s * (Real(1) + z * (Real(1) - s));
}

}  // namespace nn

// Small conditional noise predictor with time/label conditioning, suitable
// for CPU training. Parameters live in one flat vector so optimizers, EMA
// and checkpoints can treat the model as a plain value.
template <class Real>
class TinyDenoiser {
public:
    struct ConvDesc {
        std::size_t w_off = 0, b_off = 0;
        int cin = 0, cout = 0;
    };
    struct ProjDesc {
        std::size_t off = 0;
        int cout = 0;
    };

    TinyDenoiser() = default;

    explicit TinyDenoiser(DenoiserSpec spec, std::uint64_t init_seed = 1) : spec_(spec) {
        spec_.validate();
        layout();
        params_.assign(total_, Real(0));
        init_params(init_seed);
    }

    const DenoiserSpec& spec() const { return spec_; }
    std::vector<Real>& parameters() { return params_; }
    const std::vector<Real>& parameters() const { return params_; }
    std::size_t param_count() const { return total_; }

    // NoisePredictor-shaped entry point with double conversion at the edges.
    ImageGrid predict_grid(const ImageGrid& x, int t, Condition c) const {
        Tensor3<Real> in(1, x.height, x.width);
        for (std::size_t i = 0; i < x.size(); ++i) in.v[i] = static_cast<Real>(x.values[i]);
        Tensor3<Real> out = forward(in, t, c);
        ImageGrid g(x.height, x.width, GridRole::Gradient);
        for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = static_cast<double>(out.v[i]);
        return g;
    }

    struct Cache {
        Tensor3<Real> x, z0, h0, d1, z1, h1, d2, z2, h2, u1, cat1, z3, h3, u0, cat0, z4, h4;
        std::vector<Real> emb;
        int t = 0;
        Condition cond = Condition::Null;
    };

    Tensor3<Real> forward(const Tensor3<Real>& x, int t, Condition c, Cache* cache = nullptr) const {
        if (x.c != 1) throw ContractViolation("denoiser: expected one input channel");
        if (x.h % 4 != 0 || x.w % 4 != 0)
            throw ContractViolation("denoiser: height and width must be divisible by 4");
        std::vector<Real> emb = embedding(t, c);
        const Real* p = params_.data();

        Tensor3<Real> z0;
        nn::conv3x3_forward(x, p + conv_[0].w_off, p + conv_[0].b_off, conv_[0].cout, z0);
        add_emb(z0, emb, 0);
        Tensor3<Real> h0 = activated(z0);

        Tensor3<Real> d1 = nn::avgpool2(h0);
        Tensor3<Real> z1;
        nn::conv3x3_forward(d1, p + conv_[1].w_off, p + conv_[1].b_off, conv_[1].cout, z1);
        add_emb(z1, emb, 1);
        Tensor3<Real> h1 = activated(z1);

        Tensor3<Real> d2 = nn::avgpool2(h1);
        Tensor3<Real> z2;
        nn::conv3x3_forward(d2, p + conv_[2].w_off, p + conv_[2].b_off, conv_[2].cout, z2);
        add_emb(z2, emb, 2);
        Tensor3<Real> h2 = activated(z2);

        Tensor3<Real> u1 = nn::upsample2(h2);
        Tensor3<Real> cat1 = nn::concat(u1, h1);
        Tensor3<Real> z3;
        nn::conv3x3_forward(cat1, p + conv_[3].w_off, p + conv_[3].b_off, conv_[3].cout, z3);
        add_emb(z3, emb, 3);
        Tensor3<Real> h3 = activated(z3);

        Tensor3<Real> u0 = nn::upsample2(h3);
        Tensor3<Real> cat0 = nn::concat(u0, h0);
        Tensor3<Real> z4;
        nn::conv3x3_forward(cat0, p + conv_[4].w_off, p + conv_[4].b_off, conv_[4].cout, z4);
        add_emb(z4, emb, 4);
        Tensor3<Real> h4 = activated(z4);

        Tensor3<Real> y;
        nn::conv3x3_forward(h4, p + conv_[5].w_off, p + conv_[5].b_off, conv_[5].cout, y);

        if (cache) {
            cache->x = x;
            cache->z0 = std::move(z0);
            cache->h0 = std::move(h0);
            cache->d1 = std::move(d1);
            cache->z1 = std::move(z1);
            cache->h1 = std::move(h1);
            cache->d2 = std::move(d2);
            cache->z2 = std::move(z2);
            cache->h2 = std::move(h2);
            cache->u1 = std::move(u1);
            cache->cat1 = std::move(cat1);
            cache->z3 = std::move(z3);
            cache->h3 = std::move(h3);
            cache->u0 = std::move(u0);
            cache->cat0 = std::move(cat0);
            cache->z4 = std::move(z4);
            cache->h4 = std::move(h4);
            cache->emb = std::move(emb);
            cache->t = t;
            cache->cond = c;
        }
        return y;
    }

    // Accumulates parameter gradients for dL/dy into grad (same layout as
    // the parameter vector).
    void backward(const Cache& cache, const Tensor3<Real>& dy, std::vector<Real>& grad) const {
        if (grad.size() != total_) throw ContractViolation("denoiser backward: bad grad size");
        const Real* p = params_.data();
        Real* g = grad.data();
        std::vector<Real> demb(spec_.emb_dim, Real(0));

        Tensor3<Real> dh4;
        nn::conv3x3_backward(cache.h4, p + conv_[5].w_off, conv_[5].cout, dy, g + conv_[5].w_off,
                             g + conv_[5].b_off, &dh4);

        Tensor3<Real> dz4 = silu_backward(dh4, cache.z4);
        emb_backward(dz4, cache.emb, 4, g, demb);
        Tensor3<Real> dcat0;
        nn::conv3x3_backward(cache.cat0, p + conv_[4].w_off, conv_[4].cout, dz4,
                             g + conv_[4].w_off, g + conv_[4].b_off, &dcat0);

        auto [du0, dh0_skip] = split(dcat0, conv_[3].cout);
        Tensor3<Real> dh3 = nn::upsample2_backward(du0);

        Tensor3<Real> dz3 = silu_backward(dh3, cache.z3);
        emb_backward(dz3, cache.emb, 3, g, demb);
        Tensor3<Real> dcat1;
        nn::conv3x3_backward(cache.cat1, p + conv_[3].w_off, conv_[3].cout, dz3,
                             g + conv_[3].w_off, g + conv_[3].b_off, &dcat1);

        auto [du1, dh1_skip] = split(dcat1, conv_[2].cout);
        Tensor3<Real> dh2 = nn::upsample2_backward(du1);

        Tensor3<Real> dz2 = silu_backward(dh2, cache.z2);
        emb_backward(dz2, cache.emb, 2, g, demb);
        Tensor3<Real> dd2;
        nn::conv3x3_backward(cache.d2, p + conv_[2].w_off, conv_[2].cout, dz2, g + conv_[2].w_off,
                             g + conv_[2].b_off, &dd2);

        Tensor3<Real> dh1 = dh1_skip;
        nn::avgpool2_backward(dd2, dh1);

        Tensor3<Real> dz1 = silu_backward(dh1, cache.z1);
        emb_backward(dz1, cache.emb, 1, g, demb);
        Tensor3<Real> dd1;
        nn::conv3x3_backward(cache.d1, p + conv_[1].w_off, conv_[1].cout, dz1, g + conv_[1].w_off,
                             g + conv_[1].b_off, &dd1);

        Tensor3<Real> dh0 = dh0_skip;
        nn::avgpool2_backward(dd1, dh0);

        Tensor3<Real> dz0 = silu_backward(dh0, cache.z0);
        emb_backward(dz0, cache.emb, 0, g, demb);
        nn::conv3x3_backward(cache.x, p + conv_[0].w_off, conv_[0].cout, dz0, g + conv_[0].w_off,
                             g + conv_[0].b_off, static_cast<Tensor3<Real>*>(nullptr));

        // only the label part of the embedding carries parameters
        Real* lg = g + label_off_ + static_cast<std::size_t>(static_cast<int>(cache.cond)) *
                                        spec_.emb_dim;
        for (int e = 0; e < spec_.emb_dim; ++e) lg[e] += demb[e];
    }

    const ConvDesc& conv_desc(int i) const { return conv_[i]; }

private:
    void layout() {
        int c0 = spec_.widths[0], c1 = spec_.widths[1], c2 = spec_.widths[2];
        std::size_t off = 0;
        auto add_conv = [&](int cin, int cout) {
            ConvDesc d;
            d.cin = cin;
            d.cout = cout;
            d.w_off = off;
            off += static_cast<std::size_t>(cout) * cin * 9;
            d.b_off = off;
            off += cout;
            return d;
        };
        conv_[0] = add_conv(spec_.in_channels, c0);
        conv_[1] = add_conv(c0, c1);
        conv_[2] = add_conv(c1, c2);
        conv_[3] = add_conv(c2 + c1, c1);
        conv_[4] = add_conv(c1 + c0, c0);
        conv_[5] = add_conv(c0, spec_.in_channels);
        for (int i = 0; i < 5; ++i) {
            proj_[i].cout = conv_[i].cout;
            proj_[i].off = off;
            off += static_cast<std::size_t>(conv_[i].cout) * spec_.emb_dim;
        }
        label_off_ = off;
        off += 3 * static_cast<std::size_t>(spec_.emb_dim);
        total_ = off;
    }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, kStreamInit));
        for (const auto& c : conv_) {
            double scale = std::sqrt(2.0 / (9.0 * c.cin));
            for (std::size_t i = 0; i < static_cast<std::size_t>(c.cout) * c.cin * 9; ++i)
                params_[c.w_off + i] = static_cast<Real>(scale * rng.normal());
            // conv biases start at zero
        }
        for (const auto& pr : proj_) {
            double scale = 0.1 / std::sqrt(static_cast<double>(spec_.emb_dim));
            for (std::size_t i = 0; i < static_cast<std::size_t>(pr.cout) * spec_.emb_dim; ++i)
                params_[pr.off + i] = static_cast<Real>(scale * rng.normal());
        }
        for (std::size_t i = 0; i < 3 * static_cast<std::size_t>(spec_.emb_dim); ++i)
            params_[label_off_ + i] = static_cast<Real>(0.1 * rng.normal());
    }

    std::vector<Real> embedding(int t, Condition c) const {
        int half = spec_.emb_dim / 2;
        std::vector<Real> e(spec_.emb_dim);
        for (int k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * k / half);
            e[2 * k] = static_cast<Real>(std::sin(t * freq));
            e[2 * k + 1] = static_cast<Real>(std::cos(t * freq));
        }
        const Real* row =
            params_.data() + label_off_ + static_cast<std::size_t>(static_cast<int>(c)) * spec_.emb_dim;
        for (int k = 0; k < spec_.emb_dim; ++k) e[k] += row[k];
        return e;
    }

    void add_emb(Tensor3<Real>& z, const std::vector<Real>& emb, int proj_idx) const {
        const Real* w = params_.data() + proj_[proj_idx].off;
        for (int c = 0; c < z.c; ++c) {
            Real b = 0;
            const Real* row = w + static_cast<std::size_t>(c) * spec_.emb_dim;
            for (int e = 0; e < spec_.emb_dim; ++e) b += row[e] * emb[e];
            Real* plane = z.plane(c);
            for (int i = 0; i < z.h * z.w; ++i) plane[i] += b;
        }
    }

    void emb_backward(const Tensor3<Real>& dz, const std::vector<Real>& emb, int proj_idx,
                      Real* grad, std::vector<Real>& demb) const {
        const Real* w = params_.data() + proj_[proj_idx].off;
        Real* gw = grad + proj_[proj_idx].off;
        for (int c = 0; c < dz.c; ++c) {
            const Real* plane = dz.plane(c);
            Real db = 0;
            for (int i = 0; i < dz.h * dz.w; ++i) db += plane[i];
            const Real* row = w + static_cast<std::size_t>(c) * spec_.emb_dim;
            Real* grow = gw + static_cast<std::size_t>(c) * spec_.emb_dim;
            for (int e = 0; e < spec_.emb_dim; ++e) {
                grow[e] += db * emb[e];
                demb[e] += db * row[e];
            }
        }
    }

    Tensor3<Real> activated(const Tensor3<Real>& z) const {
        Tensor3<Real> h(z.c, z.h, z.w);
        for (std::size_t i = 0; i < z.size(); ++i) h.v[i] = nn::silu(z.v[i]);
        return h;
    }

    Tensor3<Real> silu_backward(const Tensor3<Real>& dh, const Tensor3<Real>& z) const {
        Tensor3<Real> dz(z.c, z.h, z.w);
        for (std::size_t i = 0; i < z.size(); ++i) dz.v[i] = dh.v[i] * nn::silu_grad(z.v[i]);
        return dz;
    }

    static std::pair<Tensor3<Real>, Tensor3<Real>> split(const Tensor3<Real>& cat, int c_first) {
        Tensor3<Real> a(c_first, cat.h, cat.w);
        Tensor3<Real> b(cat.c - c_first, cat.h, cat.w);
        std::copy(cat.v.begin(), cat.v.begin() + a.v.size(), a.v.begin());
        std::copy(cat.v.begin() + a.v.size(), cat.v.end(), b.v.begin());
        return {std::move(a), std::move(b)};
    }

    DenoiserSpec spec_;
    std::vector<Real> params_;
    std::array<ConvDesc, 6> conv_{};
    std::array<ProjDesc, 5> proj_{};
    std::size_t label_off_ = 0;
    std::size_t total_ = 0;
};

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch = 64;
    int epochs = 10;
    double null_ratio = 0.1;
    double ema_rate = 0.9999;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("train: moment coefficients must be in [0,1)");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (!(null_ratio >= 0.0 && null_ratio < 1.0))
            throw ConfigError("train: null-label ratio must be in [0,1)");
        if (!(ema_rate > 0.0 && ema_rate <= 1.0))
            throw ConfigError("train: EMA rate must be in (0,1]");
    }
};

template <class Real>
struct AdamState {
    std::vector<Real> m, v;
    long step = 0;

    explicit AdamState(std::size_t n) : m(n, Real(0)), v(n, Real(0)) {}
};

// Label presented during training: the image-level label, replaced by the
// null condition with probability null_ratio.
inline Condition draw_training_condition(bool unhealthy, double null_ratio, Rng& rng) {
    if (null_ratio > 0.0 && rng.uniform() < null_ratio) return Condition::Null;
    return unhealthy ? Condition::Unhealthy : Condition::Healthy;
}

struct TrainItem {
    const ImageGrid* image = nullptr;
    bool unhealthy = false;
};

// One optimizer step on a batch: per item draw a uniform step, Gaussian
// noise and a (possibly dropped) label, regress the model output onto the
// noise, then apply an Adam update. Returns the batch loss.
template <class Real>
double training_step(TinyDenoiser<Real>& model, AdamState<Real>& adam,
                     const std::vector<TrainItem>& batch, const DiffusionSchedule& schedule,
                     const TrainConfig& cfg, Rng& rng) {
    if (batch.empty()) throw ContractViolation("training_step: empty batch");
    std::vector<Real> grad(model.param_count(), Real(0));
    double loss = 0.0;
    typename TinyDenoiser<Real>::Cache cache;
    for (const auto& item : batch) {
        const ImageGrid& x0 = *item.image;
        int t = rng.uniform_int(1, schedule.steps);
        Condition c = draw_training_condition(item.unhealthy, cfg.null_ratio, rng);
        double root_ab = std::sqrt(schedule.alpha_bar[t]);
        double root_rem = std::sqrt(1.0 - schedule.alpha_bar[t]);
        Tensor3<Real> xt(1, x0.height, x0.width);
        std::vector<Real> eps(x0.size());
        for (std::size_t i = 0; i < x0.size(); ++i) {
            double e = rng.normal();
            eps[i] = static_cast<Real>(e);
            xt.v[i] = static_cast<Real>(root_ab * x0.values[i] + root_rem * e);
        }
        Tensor3<Real> y = model.forward(xt, t, c, &cache);
        Tensor3<Real> dy(1, x0.height, x0.width);
        double scale = 1.0 / (static_cast<double>(x0.size()) * batch.size());
        for (std::size_t i = 0; i < x0.size(); ++i) {
            double r = static_cast<double>(y.v[i]) - static_cast<double>(eps[i]);
            loss += r * r * scale;
            dy.v[i] = static_cast<Real>(2.0 * r * scale);
        }
        model.backward(cache, dy, grad);
    }
    if (!std::isfinite(loss)) throw NumericError("training_step: non-finite loss (divergence)");

    adam.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
    auto& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double g = static_cast<double>(grad[i]);
        double m = cfg.beta1 * static_cast<double>(adam.m[i]) + (1.0 - cfg.beta1) * g;
        double v = cfg.beta2 * static_cast<double>(adam.v[i]) + (1.0 - cfg.beta2) * g * g;
        adam.m[i] = static_cast<Real>(m);
        adam.v[i] = static_cast<Real>(v);
        double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
        p[i] = static_cast<Real>(static_cast<double>(p[i]) - update);
    }
    return loss;
}

// shadow <- rate * shadow + (1 - rate) * model, parameterwise.
template <class Real>
void ema_update(TinyDenoiser<Real>& shadow, const TinyDenoiser<Real>& model, double rate) {
    if (!(shadow.spec() == model.spec()))
        throw ContractViolation("ema_update: architecture mismatch");
    if (!(rate >= 0.0 && rate <= 1.0)) throw ContractViolation("ema_update: rate outside [0,1]");
    auto& s = shadow.parameters();
    const auto& m = model.parameters();
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = static_cast<Real>(rate * static_cast<double>(s[i]) +
                                 (1.0 - rate) * static_cast<double>(m[i]));
}

// Adapter that exposes a frozen denoiser behind the predictor contract.
template <class Real>
class DenoiserPredictor : public NoisePredictor {
public:
    explicit DenoiserPredictor(TinyDenoiser<Real> net) : net_(std::move(net)) {}
    const TinyDenoiser<Real>& net() const { return net_; }

    ImageGrid predict(const ImageGrid& x_t, int t, Condition c) const override {
        return net_.predict_grid(x_t, t, c);
    }

private:
    TinyDenoiser<Real> net_;
};

// Checkpoint layout: magic "FPDM", u16 version, architecture block
// (u16 in_channels, 3x u16 widths, u16 emb_dim), u8 flags (bit 0: EMA shadow
// present), then u64 parameter count + float32 little-endian parameters,
// repeated for the shadow when present.
template <class Real>
struct Checkpoint {
    TinyDenoiser<Real> model;
    std::optional<TinyDenoiser<Real>> ema;

    const TinyDenoiser<Real>& inference_net() const { return ema ? *ema : model; }
};

namespace detail {
constexpr char kCheckpointMagic[4] = {'F', 'P', 'D', 'M'};
constexpr std::uint16_t kCheckpointVersion = 1;

template <class Real>
void append_params(io::ByteWriter& w, const TinyDenoiser<Real>& net) {
    w.u64(net.param_count());
    for (Real p : net.parameters()) w.f32(static_cast<float>(p));
}

template <class Real>
void read_params(io::ByteReader& r, TinyDenoiser<Real>& net) {
    std::uint64_t n = r.u64();
    if (n != net.param_count()) throw FormatError("checkpoint: parameter count mismatch");
    auto& p = net.parameters();
    for (std::uint64_t i = 0; i < n; ++i) p[i] = static_cast<Real>(r.f32());
}
}  // namespace detail

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Real>& ckpt) {
    io::ByteWriter w;
    w.bytes(detail::kCheckpointMagic, 4);
    w.u16(detail::kCheckpointVersion);
    const DenoiserSpec& s = ckpt.model.spec();
    w.u16(static_cast<std::uint16_t>(s.in_channels));
    for (int width : s.widths) w.u16(static_cast<std::uint16_t>(width));
    w.u16(static_cast<std::uint16_t>(s.emb_dim));
    w.u8(ckpt.ema ? 1 : 0);
    detail::append_params(w, ckpt.model);
    if (ckpt.ema) {
        if (!(ckpt.ema->spec() == s))
            throw ContractViolation("save_checkpoint: EMA architecture mismatch");
        detail::append_params(w, *ckpt.ema);
    }
    io::atomic_write_file(path, w.buf);
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
    std::string data = io::read_file(path);
    io::ByteReader r(data);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic in " + path.string());
    if (r.u16() != detail::kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version in " + path.string());
    DenoiserSpec spec;
    spec.in_channels = r.u16();
    for (int i = 0; i < 3; ++i) spec.widths[i] = r.u16();
    spec.emb_dim = r.u16();
    bool has_ema = (r.u8() & 1) != 0;
    Checkpoint<Real> ckpt{TinyDenoiser<Real>(spec), std::nullopt};
    detail::read_params(r, ckpt.model);
    if (has_ema) {
        ckpt.ema = TinyDenoiser<Real>(spec);
        detail::read_params(r, *ckpt.ema);
    }
    if (!r.at_end()) throw FormatError("checkpoint: trailing bytes in " + path.string());
    return ckpt;
}

}  // namespace fpdm
