#pragma once

// Test-only reference implementations. These are deliberately written as
// plain scalar loops, independent of the library's im2col/tape machinery,
// so they can serve as oracles for the fast paths.

#include <cmath>
#include <vector>

#include "phar/tensor.hpp"

namespace oracle {

inline int reflect(int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

// Direct cross-correlation, zero or reflect padding.
inline phar::Tensor conv2d(const phar::Tensor& x, const phar::Tensor& w, const phar::Tensor& b,
                           int stride, int pad, bool reflect_pad = false) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    phar::Tensor out(phar::Shape(xs.n, ws.n, oh, ow));
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < ws.n; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = b.at(0, co, 0, 0);
                    for (int ci = 0; ci < ws.c; ++ci)
                        for (int ky = 0; ky < ws.h; ++ky)
                            for (int kx = 0; kx < ws.w; ++kx) {
                                int iy = oy * stride - pad + ky;
                                int ix = ox * stride - pad + kx;
                                if (reflect_pad) {
                                    iy = reflect(iy, xs.h);
                                    ix = reflect(ix, xs.w);
                                }
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                acc += static_cast<double>(x.at(n, ci, iy, ix)) *
                                       w.at(co, ci, ky, kx);
                            }
                    out.at(n, co, oy, ox) = static_cast<float>(acc);
                }
    return out;
}

// Per-(batch,channel) moments over mask=1 pixels; std = sqrt(var + eps).
inline void masked_moments(const phar::Tensor& x, const phar::Tensor& m, float eps,
                           std::vector<double>& mean, std::vector<double>& stdev) {
    const auto& xs = x.shape();
    mean.assign(static_cast<size_t>(xs.n) * xs.c, 0.0);
    stdev.assign(static_cast<size_t>(xs.n) * xs.c, 0.0);
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            double s = 0.0, cnt = 0.0;
            for (int y = 0; y < xs.h; ++y)
                for (int xx = 0; xx < xs.w; ++xx)
                    if (m.at(n, 0, y, xx) > 0.5f) {
                        s += x.at(n, c, y, xx);
                        cnt += 1.0;
                    }
            const double mu = s / cnt;
            double sq = 0.0;
            for (int y = 0; y < xs.h; ++y)
                for (int xx = 0; xx < xs.w; ++xx)
                    if (m.at(n, 0, y, xx) > 0.5f) {
                        const double d = x.at(n, c, y, xx) - mu;
                        sq += d * d;
                    }
            mean[static_cast<size_t>(n) * xs.c + c] = mu;
            stdev[static_cast<size_t>(n) * xs.c + c] = std::sqrt(sq / cnt + eps);
        }
}

// Nearest-neighbour upsampling by index replication.
inline phar::Tensor upsample(const phar::Tensor& x, int scale) {
    const auto& xs = x.shape();
    phar::Tensor out(phar::Shape(xs.n, xs.c, xs.h * scale, xs.w * scale));
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < xs.h * scale; ++y)
                for (int xx = 0; xx < xs.w * scale; ++xx)
                    out.at(n, c, y, xx) = x.at(n, c, y / scale, xx / scale);
    return out;
}

// 2x2 max pool, used for mask pyramids.
inline phar::Tensor maxpool2(const phar::Tensor& x) {
    const auto& xs = x.shape();
    phar::Tensor out(phar::Shape(xs.n, xs.c, xs.h / 2, xs.w / 2));
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < xs.h / 2; ++y)
                for (int xx = 0; xx < xs.w / 2; ++xx) {
                    float best = x.at(n, c, 2 * y, 2 * xx);
                    best = std::max(best, x.at(n, c, 2 * y, 2 * xx + 1));
                    best = std::max(best, x.at(n, c, 2 * y + 1, 2 * xx));
                    best = std::max(best, x.at(n, c, 2 * y + 1, 2 * xx + 1));
                    out.at(n, c, y, xx) = best;
                }
    return out;
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline phar::Tensor filled(phar::Shape s, float v) { return phar::Tensor(s, v); }

inline phar::Tensor random_uniform(phar::Shape s, phar::Rng& rng, float lo = 0.1f,
                                   float hi = 1.0f) {
    phar::Tensor t(s);
    float* d = t.data();
    for (size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace oracle
