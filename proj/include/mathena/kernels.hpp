#pragma once

#include <cstdint>

namespace mathena::kernels {

// Runtime switch between the OpenMP kernels and the serial reference.
// Both produce bit-identical results: the parallel loops only split the
// outer output index, inner accumulation order is unchanged.
void set_parallel(bool enabled);
bool parallel_enabled();

// y[M,N] = a[M,K] * b[K,N], accumulation in double
void matmul_serial(const float* a, const float* b, float* y, int m, int k, int n);
void matmul_omp(const float* a, const float* b, float* y, int m, int k, int n);
void matmul(const float* a, const float* b, float* y, int m, int k, int n);

// cross-correlation, CHW input, [Cout,Cin,k,k] weight
void conv2d_forward_serial(const float* x, const float* w, float* y, int cin, int h, int win,
                           int cout, int k, int stride, int pad, int hout, int wout);
void conv2d_forward_omp(const float* x, const float* w, float* y, int cin, int h, int win,
                        int cout, int k, int stride, int pad, int hout, int wout);
void conv2d_forward(const float* x, const float* w, float* y, int cin, int h, int win,
                    int cout, int k, int stride, int pad, int hout, int wout);

// gradients; gx/gw may be null to skip
void conv2d_backward_serial(const float* x, const float* w, const float* gy, float* gx, float* gw,
                            int cin, int h, int win, int cout, int k, int stride, int pad,
                            int hout, int wout);
void conv2d_backward_omp(const float* x, const float* w, const float* gy, float* gx, float* gw,
                         int cin, int h, int win, int cout, int k, int stride, int pad,
                         int hout, int wout);
void conv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                     int cin, int h, int win, int cout, int k, int stride, int pad,
                     int hout, int wout);

// depthwise: weight [C,k,k]
void dwconv2d_forward(const float* x, const float* w, float* y, int c, int h, int win,
                      int k, int stride, int pad, int hout, int wout);
void dwconv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                       int c, int h, int win, int k, int stride, int pad, int hout, int wout);

// transposed conv: weight [Cin,Cout,k,k], output (h-1)*stride + k
void tconv2d_forward(const float* x, const float* w, float* y, int cin, int h, int win,
                     int cout, int k, int stride, int hout, int wout);
void tconv2d_backward(const float* x, const float* w, const float* gy, float* gx, float* gw,
                      int cin, int h, int win, int cout, int k, int stride, int hout, int wout);

}  // namespace mathena::kernels
