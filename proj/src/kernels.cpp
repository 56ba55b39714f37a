#include "mathena/kernels.hpp"

#include <atomic>
#include <cstring>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace mathena::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

// ---------------- matmul ----------------

void matmul_serial(const float* a, const float* b, float* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            const float* arow = a + static_cast<int64_t>(i) * k;
            for (int p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * b[static_cast<int64_t>(p) * n + j];
            y[static_cast<int64_t>(i) * n + j] = static_cast<float>(acc);
        }
    }
}

void matmul_omp(const float* a, const float* b, float* y, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            const float* arow = a + static_cast<int64_t>(i) * k;
            for (int p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * b[static_cast<int64_t>(p) * n + j];
            y[static_cast<int64_t>(i) * n + j] = static_cast<float>(acc);
        }
    }
}

void matmul(const float* a, const float* b, float* y, int m, int k, int n) {
    if (parallel_enabled())
        matmul_omp(a, b, y, m, k, n);
    else
        matmul_serial(a, b, y, m, k, n);
}

// ---------------- conv2d ----------------

namespace {

template <bool Parallel>
void conv2d_forward_impl(const float* x, const float* w, float* y, int cin, int h, int win,
                         int cout, int k, int stride, int pad, int hout, int wout) {
#pragma omp parallel for schedule(static) if (Parallel)
    for (int co = 0; co < cout; ++co) {
        const float* wco = w + static_cast<int64_t>(co) * cin * k * k;
        float* yco = y + static_cast<int64_t>(co) * hout * wout;
        for (int oy = 0; oy < hout; ++oy) {
            for (int ox = 0; ox < wout; ++ox) {
                float acc = 0.0f;
                const int iy0 = oy * stride - pad;
                const int ix0 = ox * stride - pad;
                for (int ci = 0; ci < cin; ++ci) {
                    const float* xc = x + static_cast<int64_t>(ci) * h * win;
                    const float* wk = wco + static_cast<int64_t>(ci) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const float* xrow = xc + static_cast<int64_t>(iy) * win;
                        const float* wrow = wk + static_cast<int64_t>(ky) * k;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= win) continue;
                            acc += xrow[ix] * wrow[kx];
                        }
                    }
                }
                yco[static_cast<int64_t>(oy) * wout + ox] = acc;
            }
        }
    }
}

template <bool Parallel>
void conv2d_backward_impl(const float* x, const float* w, const float* gy, float* gx, float* gw,
                          int cin, int h, int win, int cout, int k, int stride, int pad,
                          int hout, int wout) {
    // grad wrt input: each thread owns one input channel
    if (gx) {
#pragma omp parallel for schedule(static) if (Parallel)
        for (int ci = 0; ci < cin; ++ci) {
            float* gxc = gx + static_cast<int64_t>(ci) * h * win;
            for (int co = 0; co < cout; ++co) {
                const float* wk = w + (static_cast<int64_t>(co) * cin + ci) * k * k;
                const float* gyc = gy + static_cast<int64_t>(co) * hout * wout;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy0 = oy * stride - pad;
                    for (int ox = 0; ox < wout; ++ox) {
                        const float g = gyc[static_cast<int64_t>(oy) * wout + ox];
                        if (g == 0.0f) continue;
                        const int ix0 = ox * stride - pad;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= win) continue;
                                gxc[static_cast<int64_t>(iy) * win + ix] += g * wk[static_cast<int64_t>(ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    // grad wrt weight: each thread owns one output channel
    if (gw) {
#pragma omp parallel for schedule(static) if (Parallel)
        for (int co = 0; co < cout; ++co) {
            const float* gyc = gy + static_cast<int64_t>(co) * hout * wout;
            float* gwc = gw + static_cast<int64_t>(co) * cin * k * k;
            for (int ci = 0; ci < cin; ++ci) {
                const float* xc = x + static_cast<int64_t>(ci) * h * win;
                float* gwk = gwc + static_cast<int64_t>(ci) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        float acc = 0.0f;
                        for (int oy = 0; oy < hout; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            const float* xrow = xc + static_cast<int64_t>(iy) * win;
                            const float* grow = gyc + static_cast<int64_t>(oy) * wout;
                            for (int ox = 0; ox < wout; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= win) continue;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                        gwk[static_cast<int64_t>(ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace

void conv2d_forward_serial(const float* x, const float* w, float* y, int cin, int h, int win,
                           int cout, int k, int stride, int pad, int hout, int wout) {
    conv2d_forward_impl<false>(x, w, y, cin, h, win, cout, k, stride, pad, hout, wout);
}

void conv2d_forward_omp(const float* x, const float* w, float* y, int cin, int h, int win,
                        int cout, int k, int stride, int pad, int hout, int wout) {
    conv2d_forward_impl<true>(x, w, y, cin, h, win, cout, k, stride, pad, hout, wout);
}

void conv2d_forward(const float* x, const float* w, float* y, int cin, int h, int win,
                    int cout, int k, int stride, int pad, int hout, int wout) {
    if (parallel_enabled())
        conv2d_forward_omp(x, w, y, cin, h, win, cout, k, stride, pad, hout, wout);
    else
        conv2d_forward_serial(x, w, y, cin, h, win, cout, k, stride, pad, hout, wout);
}

void conv2d_backward_serial(const float* x, const float* w, const float* gy, float* gx, float* gw,
                            int cin, int h, int win, int cout, int k, int stride, int pad,
                            int hout, int wout) {
    conv2d_backward_impl<false>(x, w, gy, gx, gw, cin, h, win, cout, k, stride, pad, hout, wout);
}

void conv2d_backward_omp(const float* x, const float* w, const float* gy, float* gx, float* gw,
                         int cin, int h, int win, int cout, int k, int stride, int pad,
                         int hout, int wout) {
    conv2d_backward_impl<true>(x, w, gy, gx, gw, cin, h, win, cout, k, stride, pad, hout, wout);
}

void conv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                     int cin, int h, int win, int cout, int k, int stride, int pad,
                     int hout, int wout) {
    if (parallel_enabled())
        conv2d_backward_omp(x, w, gy, gx, gw, cin, h, win, cout, k, stride, pad, hout, wout);
    else
        conv2d_backward_serial(x, w, gy, gx, gw, cin, h, win, cout, k, stride, pad, hout, wout);
}

// ---------------- depthwise ----------------

void dwconv2d_forward(const float* x, const float* w, float* y, int c, int h, int win,
                      int k, int stride, int pad, int hout, int wout) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int ci = 0; ci < c; ++ci) {
        const float* xc = x + static_cast<int64_t>(ci) * h * win;
        const float* wk = w + static_cast<int64_t>(ci) * k * k;
        float* yc = y + static_cast<int64_t>(ci) * hout * wout;
        for (int oy = 0; oy < hout; ++oy) {
            for (int ox = 0; ox < wout; ++ox) {
                float acc = 0.0f;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= win) continue;
                        acc += xc[static_cast<int64_t>(iy) * win + ix] * wk[static_cast<int64_t>(ky) * k + kx];
                    }
                }
                yc[static_cast<int64_t>(oy) * wout + ox] = acc;
            }
        }
    }
}

void dwconv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                       int c, int h, int win, int k, int stride, int pad, int hout, int wout) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int ci = 0; ci < c; ++ci) {
        const float* xc = x + static_cast<int64_t>(ci) * h * win;
        const float* wk = w + static_cast<int64_t>(ci) * k * k;
        const float* gyc = gy + static_cast<int64_t>(ci) * hout * wout;
        float* gxc = gx ? gx + static_cast<int64_t>(ci) * h * win : nullptr;
        float* gwc = gw ? gw + static_cast<int64_t>(ci) * k * k : nullptr;
        for (int oy = 0; oy < hout; ++oy) {
            for (int ox = 0; ox < wout; ++ox) {
                const float g = gyc[static_cast<int64_t>(oy) * wout + ox];
                if (g == 0.0f) continue;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= win) continue;
                        if (gxc) gxc[static_cast<int64_t>(iy) * win + ix] += g * wk[static_cast<int64_t>(ky) * k + kx];
                        if (gwc) gwc[static_cast<int64_t>(ky) * k + kx] += g * xc[static_cast<int64_t>(iy) * win + ix];
                    }
                }
            }
        }
    }
}

// ---------------- transposed conv ----------------

void tconv2d_forward(const float* x, const float* w, float* y, int cin, int h, int win,
                     int cout, int k, int stride, int hout, int wout) {
    // gather form: each output pixel sums contributions, thread-safe per output channel
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int co = 0; co < cout; ++co) {
        float* yc = y + static_cast<int64_t>(co) * hout * wout;
        for (int oy = 0; oy < hout; ++oy) {
            for (int ox = 0; ox < wout; ++ox) {
                float acc = 0.0f;
                for (int ky = 0; ky < k; ++ky) {
                    const int t = oy - ky;
                    if (t < 0 || t % stride != 0) continue;
                    const int iy = t / stride;
                    if (iy >= h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int s = ox - kx;
                        if (s < 0 || s % stride != 0) continue;
                        const int ix = s / stride;
                        if (ix >= win) continue;
                        for (int ci = 0; ci < cin; ++ci) {
                            acc += x[(static_cast<int64_t>(ci) * h + iy) * win + ix] *
                                   w[((static_cast<int64_t>(ci) * cout + co) * k + ky) * k + kx];
                        }
                    }
                }
                yc[static_cast<int64_t>(oy) * wout + ox] = acc;
            }
        }
    }
}

void tconv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                      int cin, int h, int win, int cout, int k, int stride, int hout, int wout) {
    if (gx) {
        // dX[ci,iy,ix] = sum_{co,ky,kx} gy[co, iy*stride+ky, ix*stride+kx] * w[ci,co,ky,kx]
#pragma omp parallel for schedule(static) if (parallel_enabled())
        for (int ci = 0; ci < cin; ++ci) {
            float* gxc = gx + static_cast<int64_t>(ci) * h * win;
            for (int iy = 0; iy < h; ++iy) {
                for (int ix = 0; ix < win; ++ix) {
                    float acc = 0.0f;
                    for (int co = 0; co < cout; ++co) {
                        const float* gyc = gy + static_cast<int64_t>(co) * hout * wout;
                        const float* wk = w + (static_cast<int64_t>(ci) * cout + co) * k * k;
                        for (int ky = 0; ky < k; ++ky) {
                            const int oy = iy * stride + ky;
                            if (oy >= hout) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ox = ix * stride + kx;
                                if (ox >= wout) continue;
                                acc += gyc[static_cast<int64_t>(oy) * wout + ox] * wk[static_cast<int64_t>(ky) * k + kx];
                            }
                        }
                    }
                    gxc[static_cast<int64_t>(iy) * win + ix] += acc;
                }
            }
        }
    }
    if (gw) {
        // dW[ci,co,ky,kx] = sum_{iy,ix} x[ci,iy,ix] * gy[co, iy*stride+ky, ix*stride+kx]
#pragma omp parallel for schedule(static) if (parallel_enabled())
        for (int ci = 0; ci < cin; ++ci) {
            const float* xc = x + static_cast<int64_t>(ci) * h * win;
            for (int co = 0; co < cout; ++co) {
                const float* gyc = gy + static_cast<int64_t>(co) * hout * wout;
                float* gwk = gw + (static_cast<int64_t>(ci) * cout + co) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        float acc = 0.0f;
                        for (int iy = 0; iy < h; ++iy) {
                            const int oy = iy * stride + ky;
                            if (oy >= hout) continue;
                            for (int ix = 0; ix < win; ++ix) {
                                const int ox = ix * stride + kx;
                                if (ox >= wout) continue;
                                acc += xc[static_cast<int64_t>(iy) * win + ix] *
                                       gyc[static_cast<int64_t>(oy) * wout + ox];
                            }
                        }
                        gwk[static_cast<int64_t>(ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace mathena::kernels
