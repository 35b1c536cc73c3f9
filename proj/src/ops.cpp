#include "phar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace phar {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->needs_grad()) return true;
    return false;
}

void record1(const char* name, std::vector<Tensor> inputs, const Tensor& out,
             std::function<void()> bw) {
    Tape::active()->record(Node{name, std::move(inputs), {out}, std::move(bw)});
}

int reflect_index(int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

// col layout: [C*kH*kW rows, OH*OW columns], row-major.
void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            PadMode mode, int OH, int OW, float* col) {
    const size_t P = static_cast<size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        const float* xc = x + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* dst = col + (static_cast<size_t>(c * kh + ky) * kw + kx) * P;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (mode == PadMode::reflect) iy = reflect_index(iy, H);
                    float* d = dst + static_cast<size_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(d, d + OW, 0.0f);
                        continue;
                    }
                    const float* xr = xc + static_cast<size_t>(iy) * W;
                    if (mode == PadMode::zero && stride == 1) {
                        // contiguous fast path for the common 3x3/pad-1 case
                        int ix0 = -pad + kx;
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ix0 + ox;
                            d[ox] = (ix >= 0 && ix < W) ? xr[ix] : 0.0f;
                        }
                    } else {
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride - pad + kx;
                            if (mode == PadMode::reflect) ix = reflect_index(ix, W);
                            d[ox] = (ix >= 0 && ix < W) ? xr[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im_acc(const float* dcol, int C, int H, int W, int kh, int kw, int stride, int pad,
                PadMode mode, int OH, int OW, float* dx) {
    const size_t P = static_cast<size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        float* xc = dx + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float* src = dcol + (static_cast<size_t>(c * kh + ky) * kw + kx) * P;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (mode == PadMode::reflect) iy = reflect_index(iy, H);
                    if (iy < 0 || iy >= H) continue;
                    const float* s = src + static_cast<size_t>(oy) * OW;
                    float* xr = xc + static_cast<size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (mode == PadMode::reflect) ix = reflect_index(ix, W);
                        if (ix >= 0 && ix < W) xr[ix] += s[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, PadMode pad_mode) {
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    const int Cout = ws.n, Cin = ws.c, kh = ws.h, kw = ws.w;
    if (xs.c != Cin)
        throw_shape("conv2d: input channels C=" + std::to_string(xs.c) +
                    " do not match weight Cin=" + std::to_string(Cin));
    if (bias.shape() != Shape(1, Cout, 1, 1))
        throw_shape("conv2d: bias shape " + bias.shape().str() + " must be [1," +
                    std::to_string(Cout) + ",1,1]");
    if (stride < 1) throw_value("conv2d: stride must be positive");
    if (padding < 0) throw_value("conv2d: padding must be non-negative");
    if (pad_mode == PadMode::reflect) {
        if (padding >= kh || padding >= kw)
            throw_value("conv2d: reflect padding must be smaller than the kernel extent");
        if (padding >= xs.h || padding >= xs.w)
            throw_shape("conv2d: reflect padding " + std::to_string(padding) +
                        " too large for input " + xs.str());
    }
    const int OH = (xs.h + 2 * padding - kh) / stride + 1;
    const int OW = (xs.w + 2 * padding - kw) / stride + 1;
    if (xs.h + 2 * padding < kh || xs.w + 2 * padding < kw)
        throw_shape("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                    " larger than padded input " + xs.str());

    const int K = Cin * kh * kw;
    const size_t P = static_cast<size_t>(OH) * OW;
    Tensor out(Shape(xs.n, Cout, OH, OW));

    std::vector<float> col(static_cast<size_t>(K) * P);
    std::vector<double> acc(P);
    const float* xd = input.data();
    const float* wd = weight.data();
    const float* bd = bias.data();
    float* od = out.data();
    for (int n = 0; n < xs.n; ++n) {
        im2col(xd + static_cast<size_t>(n) * xs.c * xs.h * xs.w, Cin, xs.h, xs.w, kh, kw, stride,
               padding, pad_mode, OH, OW, col.data());
        for (int co = 0; co < Cout; ++co) {
            // double accumulation, one rounding at the store
            std::fill(acc.begin(), acc.end(), static_cast<double>(bd[co]));
            const float* wrow = wd + static_cast<size_t>(co) * K;
            for (int k = 0; k < K; ++k) {
                const double wv = wrow[k];
                const float* crow = col.data() + static_cast<size_t>(k) * P;
                for (size_t p = 0; p < P; ++p) acc[p] += wv * crow[p];
            }
            float* orow = od + (static_cast<size_t>(n) * Cout + co) * P;
            for (size_t p = 0; p < P; ++p) orow[p] = static_cast<float>(acc[p]);
        }
    }

    if (recording({&input, &weight, &bias})) {
        Tensor x = input, w = weight, b = bias, y = out;
        Shape xsh = xs;
        record1("conv2d", {input, weight, bias}, out,
                [x, w, b, y, xsh, Cout, Cin, kh, kw, stride, padding, pad_mode, OH, OW]() mutable {
                    const int K = Cin * kh * kw;
                    const size_t P = static_cast<size_t>(OH) * OW;
                    const bool need_dx = x.needs_grad();
                    const bool need_dw = w.needs_grad();
                    const bool need_db = b.needs_grad();
                    if (need_dx) x.ensure_grad();
                    if (need_dw) w.ensure_grad();
                    if (need_db) b.ensure_grad();
                    const float* dy = y.grad();
                    const float* wd = w.data();
                    std::vector<float> col;
                    std::vector<float> dcol;
                    if (need_dx || need_dw) col.resize(static_cast<size_t>(K) * P);
                    if (need_dx) dcol.resize(static_cast<size_t>(K) * P);
                    for (int n = 0; n < xsh.n; ++n) {
                        const float* dyn = dy + static_cast<size_t>(n) * Cout * P;
                        if (need_dx || need_dw)
                            im2col(x.data() + static_cast<size_t>(n) * xsh.c * xsh.h * xsh.w, Cin,
                                   xsh.h, xsh.w, kh, kw, stride, padding, pad_mode, OH, OW,
                                   col.data());
                        if (need_db) {
                            float* db = b.grad();
                            for (int co = 0; co < Cout; ++co) {
                                double acc = 0.0;
                                const float* r = dyn + static_cast<size_t>(co) * P;
                                for (size_t p = 0; p < P; ++p) acc += r[p];
                                db[co] += static_cast<float>(acc);
                            }
                        }
                        if (need_dw) {
                            float* dw = w.grad();
                            for (int co = 0; co < Cout; ++co) {
                                const float* r = dyn + static_cast<size_t>(co) * P;
                                for (int k = 0; k < K; ++k) {
                                    const float* crow = col.data() + static_cast<size_t>(k) * P;
                                    double acc = 0.0;
                                    for (size_t p = 0; p < P; ++p) acc += r[p] * crow[p];
                                    dw[static_cast<size_t>(co) * K + k] += static_cast<float>(acc);
                                }
                            }
                        }
                        if (need_dx) {
                            std::fill(dcol.begin(), dcol.end(), 0.0f);
                            for (int co = 0; co < Cout; ++co) {
                                const float* r = dyn + static_cast<size_t>(co) * P;
                                const float* wrow = wd + static_cast<size_t>(co) * K;
                                for (int k = 0; k < K; ++k) {
                                    const float wv = wrow[k];
                                    float* drow = dcol.data() + static_cast<size_t>(k) * P;
                                    for (size_t p = 0; p < P; ++p) drow[p] += wv * r[p];
                                }
                            }
                            col2im_acc(dcol.data(), Cin, xsh.h, xsh.w, kh, kw, stride, padding,
                                       pad_mode, OH, OW,
                                       x.grad() + static_cast<size_t>(n) * xsh.c * xsh.h * xsh.w);
                        }
                    }
                });
    }
    return out;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool train, float momentum,
                   float eps) {
    const Shape& xs = input.shape();
    const int C = xs.c;
    if (gamma.shape() != Shape(1, C, 1, 1) || beta.shape() != Shape(1, C, 1, 1))
        throw_shape("batchnorm2d: gamma/beta must be [1," + std::to_string(C) + ",1,1], got " +
                    gamma.shape().str() + " / " + beta.shape().str());
    if (running_mean.shape() != Shape(1, C, 1, 1) || running_var.shape() != Shape(1, C, 1, 1))
        throw_shape("batchnorm2d: running stats must be [1," + std::to_string(C) + ",1,1]");

    const size_t HW = static_cast<size_t>(xs.h) * xs.w;
    const size_t count = static_cast<size_t>(xs.n) * HW;
    Tensor out(xs);
    const float* xd = input.data();
    const float* gd = gamma.data();
    const float* bd = beta.data();
    float* od = out.data();

    std::vector<double> use_mean(C), use_invstd(C);
    if (train) {
        float* rm = running_mean.data();
        float* rv = running_var.data();
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const float* p = xd + (static_cast<size_t>(n) * C + c) * HW;
                for (size_t i = 0; i < HW; ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(count);
            double sq = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const float* p = xd + (static_cast<size_t>(n) * C + c) * HW;
                for (size_t i = 0; i < HW; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(count);
            use_mean[c] = mu;
            use_invstd[c] = 1.0 / std::sqrt(var + eps);
            rm[c] = (1.0f - momentum) * rm[c] + momentum * static_cast<float>(mu);
            rv[c] = (1.0f - momentum) * rv[c] + momentum * static_cast<float>(var);
        }
    } else {
        const float* rm = running_mean.data();
        const float* rv = running_var.data();
        for (int c = 0; c < C; ++c) {
            use_mean[c] = rm[c];
            use_invstd[c] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
        }
    }

    // normalize in double, round once at the store
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = xd + (static_cast<size_t>(n) * C + c) * HW;
            float* q = od + (static_cast<size_t>(n) * C + c) * HW;
            const double m = use_mean[c], is = use_invstd[c], g = gd[c], bb = bd[c];
            for (size_t i = 0; i < HW; ++i)
                q[i] = static_cast<float>(g * ((p[i] - m) * is) + bb);
        }

    if (recording({&input, &gamma, &beta})) {
        Tensor x = input, g = gamma, b = beta, y = out;
        record1("batchnorm2d", {input, gamma, beta}, out,
                [x, g, b, y, use_mean, use_invstd, train, C, HW, count]() mutable {
                    const bool need_dx = x.needs_grad();
                    const bool need_dg = g.needs_grad();
                    const bool need_db = b.needs_grad();
                    if (need_dx) x.ensure_grad();
                    if (need_dg) g.ensure_grad();
                    if (need_db) b.ensure_grad();
                    const float* dy = y.grad();
                    const float* xd = x.data();
                    const float* gd = g.data();
                    const int N = x.shape().n;
                    for (int c = 0; c < C; ++c) {
                        const double m = use_mean[c], is = use_invstd[c];
                        double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
                        for (int n = 0; n < N; ++n) {
                            const float* dp = dy + (static_cast<size_t>(n) * C + c) * HW;
                            const float* xp = xd + (static_cast<size_t>(n) * C + c) * HW;
                            for (size_t i = 0; i < HW; ++i) {
                                s1 += dp[i];
                                s2 += dp[i] * ((xp[i] - m) * is);
                            }
                        }
                        if (need_dg) g.grad()[c] += static_cast<float>(s2);
                        if (need_db) b.grad()[c] += static_cast<float>(s1);
                        if (!need_dx) continue;
                        float* dxp = x.grad();
                        if (train) {
                            const double k1 = s1 / static_cast<double>(count);
                            const double k2 = s2 / static_cast<double>(count);
                            for (int n = 0; n < N; ++n) {
                                const float* dp = dy + (static_cast<size_t>(n) * C + c) * HW;
                                const float* xp = xd + (static_cast<size_t>(n) * C + c) * HW;
                                float* dx = dxp + (static_cast<size_t>(n) * C + c) * HW;
                                for (size_t i = 0; i < HW; ++i) {
                                    const double xh = (xp[i] - m) * is;
                                    dx[i] += static_cast<float>(gd[c] * is *
                                                                (dp[i] - k1 - xh * k2));
                                }
                            }
                        } else {
                            for (int n = 0; n < N; ++n) {
                                const float* dp = dy + (static_cast<size_t>(n) * C + c) * HW;
                                float* dx = dxp + (static_cast<size_t>(n) * C + c) * HW;
                                for (size_t i = 0; i < HW; ++i)
                                    dx[i] += static_cast<float>(gd[c] * is * dp[i]);
                            }
                        }
                    }
                });
    }
    return out;
}

Tensor activation(const Tensor& input, Act kind, float negative_slope) {
    Tensor out(input.shape());
    const float* xd = input.data();
    float* od = out.data();
    const size_t n = input.numel();
    switch (kind) {
        case Act::relu:
            for (size_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
            break;
        case Act::leaky_relu:
            for (size_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0f ? xd[i] : negative_slope * xd[i];
            break;
        case Act::sigmoid:
            for (size_t i = 0; i < n; ++i) {
                const float v = xd[i];
                if (v >= 0.0f) {
                    od[i] = 1.0f / (1.0f + std::exp(-v));
                } else {
                    const float e = std::exp(v);
                    od[i] = e / (1.0f + e);
                }
            }
            break;
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("activation", {input}, out, [x, y, kind, negative_slope]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const float* dy = y.grad();
            const float* xd = x.data();
            const float* yd = y.data();
            float* dx = x.grad();
            const size_t n = x.numel();
            switch (kind) {
                case Act::relu:
                    for (size_t i = 0; i < n; ++i)
                        if (xd[i] > 0.0f) dx[i] += dy[i];
                    break;
                case Act::leaky_relu:
                    for (size_t i = 0; i < n; ++i)
                        dx[i] += dy[i] * (xd[i] > 0.0f ? 1.0f : negative_slope);
                    break;
                case Act::sigmoid:
                    for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * yd[i] * (1.0f - yd[i]);
                    break;
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& input) { return activation(input, Act::relu); }
Tensor leaky_relu(const Tensor& input, float negative_slope) {
    return activation(input, Act::leaky_relu, negative_slope);
}
Tensor sigmoid(const Tensor& input) { return activation(input, Act::sigmoid); }

Tensor upsample_nearest(const Tensor& input, int scale) {
    if (scale < 1) throw_value("upsample_nearest: scale must be positive");
    const Shape& xs = input.shape();
    Tensor out(Shape(xs.n, xs.c, xs.h * scale, xs.w * scale));
    const float* xd = input.data();
    float* od = out.data();
    const int OH = xs.h * scale, OW = xs.w * scale;
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * xs.h * xs.w;
        float* op = od + static_cast<size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            const float* xr = xp + static_cast<size_t>(oy / scale) * xs.w;
            float* orow = op + static_cast<size_t>(oy) * OW;
            for (int ox = 0; ox < OW; ++ox) orow[ox] = xr[ox / scale];
        }
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("upsample_nearest", {input}, out, [x, y, scale]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const Shape& xs = x.shape();
            const int OW = xs.w * scale;
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int nc = 0; nc < xs.n * xs.c; ++nc) {
                const float* dp = dy + static_cast<size_t>(nc) * xs.h * scale * OW;
                float* dxp = dx + static_cast<size_t>(nc) * xs.h * xs.w;
                for (int iy = 0; iy < xs.h; ++iy)
                    for (int ix = 0; ix < xs.w; ++ix) {
                        double acc = 0.0;
                        for (int sy = 0; sy < scale; ++sy) {
                            const float* r = dp + static_cast<size_t>(iy * scale + sy) * OW;
                            for (int sx = 0; sx < scale; ++sx) acc += r[ix * scale + sx];
                        }
                        dxp[static_cast<size_t>(iy) * xs.w + ix] += static_cast<float>(acc);
                    }
            }
        });
    }
    return out;
}

Tensor maxpool2x2(const Tensor& input) {
    const Shape& xs = input.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        throw_shape("maxpool2x2: spatial dims must be even, got " + xs.str() +
                    "; pad the input first");
    const int OH = xs.h / 2, OW = xs.w / 2;
    Tensor out(Shape(xs.n, xs.c, OH, OW));
    auto argmax = std::make_shared<std::vector<uint8_t>>(out.numel());
    const float* xd = input.data();
    float* od = out.data();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * xs.h * xs.w;
        float* op = od + static_cast<size_t>(nc) * OH * OW;
        uint8_t* ap = argmax->data() + static_cast<size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                const float* base = xp + static_cast<size_t>(2 * oy) * xs.w + 2 * ox;
                const float cand[4] = {base[0], base[1], base[xs.w], base[xs.w + 1]};
                int best = 0;
                for (int k = 1; k < 4; ++k)
                    if (cand[k] > cand[best]) best = k;
                op[static_cast<size_t>(oy) * OW + ox] = cand[best];
                ap[static_cast<size_t>(oy) * OW + ox] = static_cast<uint8_t>(best);
            }
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("maxpool2x2", {input}, out, [x, y, argmax]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const Shape& xs = x.shape();
            const int OH = xs.h / 2, OW = xs.w / 2;
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int nc = 0; nc < xs.n * xs.c; ++nc) {
                const float* dp = dy + static_cast<size_t>(nc) * OH * OW;
                const uint8_t* ap = argmax->data() + static_cast<size_t>(nc) * OH * OW;
                float* dxp = dx + static_cast<size_t>(nc) * xs.h * xs.w;
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        const int k = ap[static_cast<size_t>(oy) * OW + ox];
                        const int iy = 2 * oy + k / 2, ix = 2 * ox + k % 2;
                        dxp[static_cast<size_t>(iy) * xs.w + ix] +=
                            dp[static_cast<size_t>(oy) * OW + ox];
                    }
            }
        });
    }
    return out;
}

Tensor avgpool2x2(const Tensor& input) {
    const Shape& xs = input.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        throw_shape("avgpool2x2: spatial dims must be even, got " + xs.str());
    const int OH = xs.h / 2, OW = xs.w / 2;
    Tensor out(Shape(xs.n, xs.c, OH, OW));
    const float* xd = input.data();
    float* od = out.data();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * xs.h * xs.w;
        float* op = od + static_cast<size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                const float* base = xp + static_cast<size_t>(2 * oy) * xs.w + 2 * ox;
                // double accumulation keeps nearest-upsample round trips exact
                const double s = (static_cast<double>(base[0]) + base[1]) +
                                 (static_cast<double>(base[xs.w]) + base[xs.w + 1]);
                op[static_cast<size_t>(oy) * OW + ox] = static_cast<float>(s * 0.25);
            }
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("avgpool2x2", {input}, out, [x, y]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const Shape& xs = x.shape();
            const int OH = xs.h / 2, OW = xs.w / 2;
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int nc = 0; nc < xs.n * xs.c; ++nc) {
                const float* dp = dy + static_cast<size_t>(nc) * OH * OW;
                float* dxp = dx + static_cast<size_t>(nc) * xs.h * xs.w;
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        const float g = 0.25f * dp[static_cast<size_t>(oy) * OW + ox];
                        float* base = dxp + static_cast<size_t>(2 * oy) * xs.w + 2 * ox;
                        base[0] += g;
                        base[1] += g;
                        base[xs.w] += g;
                        base[xs.w + 1] += g;
                    }
            }
        });
    }
    return out;
}

Tensor pad2d(const Tensor& input, int top, int bottom, int left, int right, PadMode mode) {
    if (top < 0 || bottom < 0 || left < 0 || right < 0)
        throw_value("pad2d: negative padding");
    const Shape& xs = input.shape();
    if (mode == PadMode::reflect &&
        (top >= xs.h || bottom >= xs.h || left >= xs.w || right >= xs.w))
        throw_shape("pad2d: reflect padding must be smaller than the input extent " + xs.str());
    const int OH = xs.h + top + bottom, OW = xs.w + left + right;
    Tensor out(Shape(xs.n, xs.c, OH, OW));
    const float* xd = input.data();
    float* od = out.data();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * xs.h * xs.w;
        float* op = od + static_cast<size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            int iy = oy - top;
            if (mode == PadMode::reflect) iy = reflect_index(iy, xs.h);
            float* orow = op + static_cast<size_t>(oy) * OW;
            if (iy < 0 || iy >= xs.h) {
                std::fill(orow, orow + OW, 0.0f);
                continue;
            }
            const float* xr = xp + static_cast<size_t>(iy) * xs.w;
            for (int ox = 0; ox < OW; ++ox) {
                int ix = ox - left;
                if (mode == PadMode::reflect) ix = reflect_index(ix, xs.w);
                orow[ox] = (ix >= 0 && ix < xs.w) ? xr[ix] : 0.0f;
            }
        }
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("pad2d", {input}, out, [x, y, top, left, mode]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const Shape& xs = x.shape();
            const Shape& ys = y.shape();
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int nc = 0; nc < xs.n * xs.c; ++nc) {
                const float* dp = dy + static_cast<size_t>(nc) * ys.h * ys.w;
                float* dxp = dx + static_cast<size_t>(nc) * xs.h * xs.w;
                for (int oy = 0; oy < ys.h; ++oy) {
                    int iy = oy - top;
                    if (mode == PadMode::reflect) iy = reflect_index(iy, xs.h);
                    if (iy < 0 || iy >= xs.h) continue;
                    const float* drow = dp + static_cast<size_t>(oy) * ys.w;
                    float* xr = dxp + static_cast<size_t>(iy) * xs.w;
                    for (int ox = 0; ox < ys.w; ++ox) {
                        int ix = ox - left;
                        if (mode == PadMode::reflect) ix = reflect_index(ix, xs.w);
                        if (ix >= 0 && ix < xs.w) xr[ix] += drow[ox];
                    }
                }
            }
        });
    }
    return out;
}

Tensor crop2d(const Tensor& input, int top, int left, int out_h, int out_w) {
    const Shape& xs = input.shape();
    if (top < 0 || left < 0 || out_h < 1 || out_w < 1 || top + out_h > xs.h ||
        left + out_w > xs.w)
        throw_shape("crop2d: region (" + std::to_string(top) + "," + std::to_string(left) + "," +
                    std::to_string(out_h) + "," + std::to_string(out_w) +
                    ") outside input " + xs.str());
    Tensor out(Shape(xs.n, xs.c, out_h, out_w));
    const float* xd = input.data();
    float* od = out.data();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * xs.h * xs.w;
        float* op = od + static_cast<size_t>(nc) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy)
            std::memcpy(op + static_cast<size_t>(oy) * out_w,
                        xp + static_cast<size_t>(oy + top) * xs.w + left,
                        sizeof(float) * out_w);
    }
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("crop2d", {input}, out, [x, y, top, left, out_h, out_w]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const Shape& xs = x.shape();
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int nc = 0; nc < xs.n * xs.c; ++nc) {
                const float* dp = dy + static_cast<size_t>(nc) * out_h * out_w;
                float* dxp = dx + static_cast<size_t>(nc) * xs.h * xs.w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const float* drow = dp + static_cast<size_t>(oy) * out_w;
                    float* xr = dxp + static_cast<size_t>(oy + top) * xs.w + left;
                    for (int ox = 0; ox < out_w; ++ox) xr[ox] += drow[ox];
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw_value("concat_channels: no inputs");
    const Shape& s0 = inputs[0].shape();
    int C = 0;
    for (const Tensor& t : inputs) {
        const Shape& s = t.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw_shape("concat_channels: mismatched shapes " + s0.str() + " vs " + s.str());
        C += s.c;
    }
    Tensor out(Shape(s0.n, C, s0.h, s0.w));
    const size_t HW = static_cast<size_t>(s0.h) * s0.w;
    float* od = out.data();
    for (int n = 0; n < s0.n; ++n) {
        size_t coff = 0;
        for (const Tensor& t : inputs) {
            const size_t tc = static_cast<size_t>(t.shape().c);
            std::memcpy(od + (static_cast<size_t>(n) * C + coff) * HW,
                        t.data() + static_cast<size_t>(n) * tc * HW, sizeof(float) * tc * HW);
            coff += tc;
        }
    }
    bool rec = Tape::active() != nullptr;
    if (rec) {
        rec = false;
        for (const Tensor& t : inputs)
            if (t.needs_grad()) {
                rec = true;
                break;
            }
    }
    if (rec) {
        std::vector<Tensor> xs = inputs;
        Tensor y = out;
        record1("concat_channels", inputs, out, [xs, y, C, HW]() mutable {
            const float* dy = y.grad();
            const int N = y.shape().n;
            for (int n = 0; n < N; ++n) {
                size_t coff = 0;
                for (Tensor& t : xs) {
                    const size_t tc = static_cast<size_t>(t.shape().c);
                    if (t.needs_grad()) {
                        t.ensure_grad();
                        float* dx = t.grad() + static_cast<size_t>(n) * tc * HW;
                        const float* dp = dy + (static_cast<size_t>(n) * C + coff) * HW;
                        for (size_t i = 0; i < tc * HW; ++i) dx[i] += dp[i];
                    }
                    coff += tc;
                }
            }
        });
    }
    return out;
}

namespace {

// Broadcast layout for the restricted rules: full [N,C,H,W], mask [N,1,H,W],
// statistic [N,C,1,1]. Strides are in elements; broadcast dims get stride 0.
struct BcOperand {
    size_t sn, sc, sh, sw;
};

BcOperand layout_for(const Shape& s, const Shape& out) {
    BcOperand o{};
    if (s == out) {
        o.sw = 1;
        o.sh = static_cast<size_t>(s.w);
        o.sc = static_cast<size_t>(s.h) * s.w;
        o.sn = static_cast<size_t>(s.c) * s.h * s.w;
    } else if (s.n == out.n && s.c == 1 && s.h == out.h && s.w == out.w) {
        o.sw = 1;
        o.sh = static_cast<size_t>(s.w);
        o.sc = 0;
        o.sn = static_cast<size_t>(s.h) * s.w;
    } else if (s.n == out.n && s.c == out.c && s.h == 1 && s.w == 1) {
        o.sw = 0;
        o.sh = 0;
        o.sc = 1;
        o.sn = static_cast<size_t>(s.c);
    } else {
        throw_shape("elementwise: shape " + s.str() + " cannot broadcast against " + out.str());
    }
    return o;
}

Shape broadcast_out(const Shape& a, const Shape& b) {
    if (a == b) return a;
    auto full_vs = [](const Shape& big, const Shape& small) {
        return (small.n == big.n && small.c == 1 && small.h == big.h && small.w == big.w) ||
               (small.n == big.n && small.c == big.c && small.h == 1 && small.w == 1);
    };
    if (full_vs(a, b)) return a;
    if (full_vs(b, a)) return b;
    throw_shape("elementwise: incompatible shapes " + a.str() + " and " + b.str());
}

enum class BinOp { add, sub, mul, div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    const Shape out_shape = broadcast_out(a.shape(), b.shape());
    const BcOperand la = layout_for(a.shape(), out_shape);
    const BcOperand lb = layout_for(b.shape(), out_shape);
    Tensor out(out_shape);
    const float* ad = a.data();
    const float* bd = b.data();
    float* od = out.data();
    size_t i = 0;
    for (int n = 0; n < out_shape.n; ++n)
        for (int c = 0; c < out_shape.c; ++c)
            for (int y = 0; y < out_shape.h; ++y) {
                const float* ap = ad + n * la.sn + c * la.sc + y * la.sh;
                const float* bp = bd + n * lb.sn + c * lb.sc + y * lb.sh;
                for (int x = 0; x < out_shape.w; ++x, ++i) {
                    const float av = ap[x * la.sw];
                    const float bv = bp[x * lb.sw];
                    switch (op) {
                        case BinOp::add: od[i] = av + bv; break;
                        case BinOp::sub: od[i] = av - bv; break;
                        case BinOp::mul: od[i] = av * bv; break;
                        case BinOp::div: od[i] = av / bv; break;
                    }
                }
            }

    if (out_shape.numel() == 1) {
        const double pa = a.precise_item();
        const double pb = b.precise_item();
        switch (op) {
            case BinOp::add: out.set_precise(pa + pb); break;
            case BinOp::sub: out.set_precise(pa - pb); break;
            case BinOp::mul: out.set_precise(pa * pb); break;
            case BinOp::div: out.set_precise(pa / pb); break;
        }
    }

    if (recording({&a, &b})) {
        Tensor ta = a, tb = b, y = out;
        record1(name, {a, b}, out, [ta, tb, y, la, lb, op]() mutable {
            const Shape& os = y.shape();
            const bool need_da = ta.needs_grad();
            const bool need_db = tb.needs_grad();
            if (need_da) ta.ensure_grad();
            if (need_db) tb.ensure_grad();
            const float* dy = y.grad();
            const float* ad = ta.data();
            const float* bd = tb.data();
            float* da = need_da ? ta.grad() : nullptr;
            float* db = need_db ? tb.grad() : nullptr;
            size_t i = 0;
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int yy = 0; yy < os.h; ++yy) {
                        const size_t abase = n * la.sn + c * la.sc + yy * la.sh;
                        const size_t bbase = n * lb.sn + c * lb.sc + yy * lb.sh;
                        for (int x = 0; x < os.w; ++x, ++i) {
                            const size_t ia = abase + x * la.sw;
                            const size_t ib = bbase + x * lb.sw;
                            const float g = dy[i];
                            switch (op) {
                                case BinOp::add:
                                    if (need_da) da[ia] += g;
                                    if (need_db) db[ib] += g;
                                    break;
                                case BinOp::sub:
                                    if (need_da) da[ia] += g;
                                    if (need_db) db[ib] -= g;
                                    break;
                                case BinOp::mul:
                                    if (need_da) da[ia] += g * bd[ib];
                                    if (need_db) db[ib] += g * ad[ia];
                                    break;
                                case BinOp::div: {
                                    const float inv = 1.0f / bd[ib];
                                    if (need_da) da[ia] += g * inv;
                                    if (need_db) db[ib] -= g * ad[ia] * inv * inv;
                                    break;
                                }
                            }
                        }
                    }
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::div, "div"); }

Tensor affine(const Tensor& input, float scale, float shift) {
    Tensor out(input.shape());
    const float* xd = input.data();
    float* od = out.data();
    const size_t n = input.numel();
    for (size_t i = 0; i < n; ++i) od[i] = scale * xd[i] + shift;
    if (n == 1)
        out.set_precise(static_cast<double>(scale) * input.precise_item() + shift);
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1("affine", {input}, out, [x, y, scale]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const float* dy = y.grad();
            float* dx = x.grad();
            const size_t n = x.numel();
            for (size_t i = 0; i < n; ++i) dx[i] += scale * dy[i];
        });
    }
    return out;
}

std::pair<Tensor, Tensor> masked_moments(const Tensor& feature, const Tensor& mask, float eps) {
    const Shape& fs = feature.shape();
    const Shape& ms = mask.shape();
    if (ms.n != fs.n || ms.c != 1 || ms.h != fs.h || ms.w != fs.w)
        throw_shape("masked_moments: mask shape " + ms.str() + " must be [" +
                    std::to_string(fs.n) + ",1," + std::to_string(fs.h) + "," +
                    std::to_string(fs.w) + "]");
    const size_t HW = static_cast<size_t>(fs.h) * fs.w;
    const float* md = mask.data();
    const float* xd = feature.data();

    std::vector<double> counts(fs.n);
    for (int n = 0; n < fs.n; ++n) {
        const float* mp = md + static_cast<size_t>(n) * HW;
        double cnt = 0.0;
        for (size_t i = 0; i < HW; ++i) {
            const float m = mp[i];
            if (m != 0.0f && m != 1.0f)
                throw_value("masked_moments: mask must be binary, found value " +
                            std::to_string(m));
            cnt += m;
        }
        if (cnt == 0.0)
            throw_value("masked_moments: empty mask for batch item " + std::to_string(n));
        counts[n] = cnt;
    }

    Tensor mean_t(Shape(fs.n, fs.c, 1, 1));
    Tensor std_t(Shape(fs.n, fs.c, 1, 1));
    float* mean_d = mean_t.data();
    float* std_d = std_t.data();
    for (int n = 0; n < fs.n; ++n) {
        const float* mp = md + static_cast<size_t>(n) * HW;
        for (int c = 0; c < fs.c; ++c) {
            const float* xp = xd + (static_cast<size_t>(n) * fs.c + c) * HW;
            double s = 0.0;
            for (size_t i = 0; i < HW; ++i) s += mp[i] * xp[i];
            const double mu = s / counts[n];
            double sq = 0.0;
            for (size_t i = 0; i < HW; ++i) {
                const double d = xp[i] - mu;
                sq += mp[i] * d * d;
            }
            const double var = sq / counts[n];
            mean_d[static_cast<size_t>(n) * fs.c + c] = static_cast<float>(mu);
            std_d[static_cast<size_t>(n) * fs.c + c] =
                static_cast<float>(std::sqrt(var + eps));
        }
    }

    if (recording({&feature})) {
        Tensor x = feature, m = mask, mu = mean_t, sd = std_t;
        Tape::active()->record(Node{
            "masked_moments",
            {feature, mask},
            {mean_t, std_t},
            [x, m, mu, sd, counts, HW]() mutable {
                if (!x.needs_grad()) return;
                x.ensure_grad();
                const Shape& fs = x.shape();
                const float* md = m.data();
                const float* xd = x.data();
                const float* mud = mu.data();
                const float* sdd = sd.data();
                const float* dmu = mu.has_grad() ? mu.grad() : nullptr;
                const float* dsd = sd.has_grad() ? sd.grad() : nullptr;
                float* dx = x.grad();
                for (int n = 0; n < fs.n; ++n) {
                    const float* mp = md + static_cast<size_t>(n) * HW;
                    const float inv_cnt = static_cast<float>(1.0 / counts[n]);
                    for (int c = 0; c < fs.c; ++c) {
                        const size_t nc = static_cast<size_t>(n) * fs.c + c;
                        const float gmu = dmu ? dmu[nc] : 0.0f;
                        const float gsd = dsd ? dsd[nc] : 0.0f;
                        if (gmu == 0.0f && gsd == 0.0f) continue;
                        const float* xp = xd + nc * HW;
                        float* dp = dx + nc * HW;
                        const float mean_v = mud[nc];
                        const float k = gsd * inv_cnt / sdd[nc];
                        const float a = gmu * inv_cnt;
                        for (size_t i = 0; i < HW; ++i)
                            dp[i] += mp[i] * (a + k * (xp[i] - mean_v));
                    }
                }
            }});
    }
    return {mean_t, std_t};
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw_shape("mse: shapes differ, " + a.shape().str() + " vs " + b.shape().str());
    const size_t n = a.numel();
    const float* ad = a.data();
    const float* bd = b.data();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(ad[i]) - bd[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    out.set_precise(acc / static_cast<double>(n));
    if (recording({&a, &b})) {
        Tensor ta = a, tb = b, y = out;
        record1("mse", {a, b}, out, [ta, tb, y]() mutable {
            const float g = y.grad()[0];
            const size_t n = ta.numel();
            const float k = 2.0f * g / static_cast<float>(n);
            const float* ad = ta.data();
            const float* bd = tb.data();
            if (ta.needs_grad()) {
                ta.ensure_grad();
                float* da = ta.grad();
                for (size_t i = 0; i < n; ++i) da[i] += k * (ad[i] - bd[i]);
            }
            if (tb.needs_grad()) {
                tb.ensure_grad();
                float* db = tb.grad();
                for (size_t i = 0; i < n; ++i) db[i] -= k * (ad[i] - bd[i]);
            }
        });
    }
    return out;
}

namespace {

Tensor reduce_all(const Tensor& input, bool take_mean, const char* name) {
    const size_t n = input.numel();
    const float* xd = input.data();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += xd[i];
    if (take_mean) acc /= static_cast<double>(n);
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    out.set_precise(acc);
    if (recording({&input})) {
        Tensor x = input, y = out;
        record1(name, {input}, out, [x, y, take_mean]() mutable {
            if (!x.needs_grad()) return;
            x.ensure_grad();
            const size_t n = x.numel();
            const float g = take_mean ? y.grad()[0] / static_cast<float>(n) : y.grad()[0];
            float* dx = x.grad();
            for (size_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

}  // namespace

Tensor sum(const Tensor& input) { return reduce_all(input, false, "sum"); }
Tensor mean(const Tensor& input) { return reduce_all(input, true, "mean"); }

}  // namespace phar
