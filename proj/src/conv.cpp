#include <cmath>
#include <memory>

#include "mathena/kernels.hpp"
#include "mathena/tensor.hpp"

namespace mathena {

namespace {

int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 3) throw ShapeError("conv2d: input must be CHW");
    if (weight.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,k,k]");
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin) throw ShapeError("conv2d: weight Cin mismatch");
    if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
    if (bias.defined() && bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");
    const int ho = conv_out_dim(h, k, stride, padding);
    const int wo = conv_out_dim(w, k, stride, padding);
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: output dimension < 1");

    std::vector<float> out(static_cast<size_t>(cout) * ho * wo);
    kernels::conv2d_forward(x.data().data(), weight.data().data(), out.data(), cin, h, w, cout, k,
                            stride, padding, ho, wo);
    if (bias.defined()) {
        const float* pb = bias.data().data();
        for (int co = 0; co < cout; ++co)
            for (int64_t p = 0; p < static_cast<int64_t>(ho) * wo; ++p)
                out[static_cast<size_t>(co) * ho * wo + p] += pb[co];
    }
    bool rg = x.requires_grad() || weight.requires_grad() || (bias.defined() && bias.requires_grad());
    auto node = std::make_shared<TensorNode>();
    {
        Tensor t = Tensor::from_data({cout, ho, wo}, std::move(out), rg);
        node = t.node();
    }
    if (rg) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        node->parents = {xn, wn};
        if (bn) node->parents.push_back(bn);
        node->backward_fn = [xn, wn, bn, cin, h, w, cout, k, stride, padding, ho, wo](TensorNode& n) {
            float* gx = nullptr;
            float* gw = nullptr;
            if (xn->requires_grad) {
                xn->ensure_grad();
                gx = xn->grad.data();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gw = wn->grad.data();
            }
            if (gx || gw)
                kernels::conv2d_backward(xn->data.data(), wn->data.data(), n.grad.data(), gx, gw,
                                         cin, h, w, cout, k, stride, padding, ho, wo);
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (int64_t p = 0; p < static_cast<int64_t>(ho) * wo; ++p)
                        acc += n.grad[static_cast<size_t>(co) * ho * wo + p];
                    bn->grad[static_cast<size_t>(co)] += static_cast<float>(acc);
                }
            }
        };
    }
    return Tensor(node);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, int stride, int padding) {
    return conv2d(x, weight, Tensor(), stride, padding);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, int stride, int padding) {
    if (x.rank() != 3) throw ShapeError("depthwise_conv2d: input must be CHW");
    if (weight.rank() != 3) throw ShapeError("depthwise_conv2d: weight must be [C,k,k]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int k = weight.dim(1);
    if (weight.dim(0) != c) throw ShapeError("depthwise_conv2d: one kernel per input channel required");
    if (weight.dim(2) != k) throw ShapeError("depthwise_conv2d: kernel must be square");
    const int ho = conv_out_dim(h, k, stride, padding);
    const int wo = conv_out_dim(w, k, stride, padding);
    if (ho < 1 || wo < 1) throw ShapeError("depthwise_conv2d: output dimension < 1");

    std::vector<float> out(static_cast<size_t>(c) * ho * wo);
    kernels::dwconv2d_forward(x.data().data(), weight.data().data(), out.data(), c, h, w, k,
                              stride, padding, ho, wo);
    bool rg = x.requires_grad() || weight.requires_grad();
    Tensor t = Tensor::from_data({c, ho, wo}, std::move(out), rg);
    auto node = t.node();
    if (rg) {
        auto xn = x.node();
        auto wn = weight.node();
        node->parents = {xn, wn};
        node->backward_fn = [xn, wn, c, h, w, k, stride, padding, ho, wo](TensorNode& n) {
            float* gx = nullptr;
            float* gw = nullptr;
            if (xn->requires_grad) {
                xn->ensure_grad();
                gx = xn->grad.data();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gw = wn->grad.data();
            }
            if (gx || gw)
                kernels::dwconv2d_backward(xn->data.data(), wn->data.data(), n.grad.data(), gx, gw,
                                           c, h, w, k, stride, padding, ho, wo);
        };
    }
    return t;
}

Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw_weight, const Tensor& pw_weight,
                                const Tensor& pw_bias, int stride) {
    if (pw_weight.rank() != 4 || pw_weight.dim(2) != 1 || pw_weight.dim(3) != 1)
        throw ShapeError("depthwise_separable_conv: pointwise weight must be [Cout,Cin,1,1]");
    const int k = dw_weight.dim(1);
    Tensor mid = depthwise_conv2d(x, dw_weight, stride, k / 2);
    return conv2d(mid, pw_weight, pw_bias, 1, 0);
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, int stride) {
    if (x.rank() != 3) throw ShapeError("transposed_conv2d: input must be CHW");
    if (weight.rank() != 4) throw ShapeError("transposed_conv2d: weight must be [Cin,Cout,k,k]");
    if (stride < 1) throw ShapeError("transposed_conv2d: stride must be >= 1");
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = weight.dim(1), k = weight.dim(2);
    if (weight.dim(0) != cin) throw ShapeError("transposed_conv2d: weight Cin mismatch");
    if (weight.dim(3) != k) throw ShapeError("transposed_conv2d: kernel must be square");
    const int ho = (h - 1) * stride + k;
    const int wo = (w - 1) * stride + k;

    std::vector<float> out(static_cast<size_t>(cout) * ho * wo);
    kernels::tconv2d_forward(x.data().data(), weight.data().data(), out.data(), cin, h, w, cout, k,
                             stride, ho, wo);
    bool rg = x.requires_grad() || weight.requires_grad();
    Tensor t = Tensor::from_data({cout, ho, wo}, std::move(out), rg);
    auto node = t.node();
    if (rg) {
        auto xn = x.node();
        auto wn = weight.node();
        node->parents = {xn, wn};
        node->backward_fn = [xn, wn, cin, h, w, cout, k, stride, ho, wo](TensorNode& n) {
            float* gx = nullptr;
            float* gw = nullptr;
            if (xn->requires_grad) {
                xn->ensure_grad();
                gx = xn->grad.data();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gw = wn->grad.data();
            }
            if (gx || gw)
                kernels::tconv2d_backward(xn->data.data(), wn->data.data(), n.grad.data(), gx, gw,
                                          cin, h, w, cout, k, stride, ho, wo);
        };
    }
    return t;
}

}  // namespace mathena
