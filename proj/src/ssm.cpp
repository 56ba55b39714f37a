#include "mathena/ssm.hpp"

#include <cmath>
#include <memory>

#include "mathena/kernels.hpp"

namespace mathena {

namespace {

inline float softplus_f(double x) {
    if (x > 30.0) return static_cast<float>(x);
    return static_cast<float>(std::log1p(std::exp(x)));
}

inline float sigmoid_f(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

SSMParams SSMParams::init(int channels, int state_dim, Rng& rng) {
    SSMParams p;
    p.channels = channels;
    p.state_dim = state_dim;
    std::vector<float> a(static_cast<size_t>(channels) * state_dim);
    for (int d = 0; d < channels; ++d)
        for (int n = 0; n < state_dim; ++n)
            a[static_cast<size_t>(d) * state_dim + n] = -static_cast<float>(n + 1);
    p.A = Tensor::from_data({channels, state_dim}, std::move(a), true);

    const float scale = 0.1f / std::sqrt(static_cast<float>(channels));
    auto randn = [&](const Shape& s) {
        std::vector<float> v(static_cast<size_t>(numel(s)));
        for (float& x : v) x = scale * static_cast<float>(rng.normal());
        return Tensor::from_data(s, std::move(v), true);
    };
    p.W_delta = randn({channels, channels});
    // softplus(b) ~= 0.1 at init
    p.b_delta = Tensor::full({channels}, std::log(std::exp(0.1f) - 1.0f), true);
    p.W_B = randn({channels, state_dim});
    p.W_C = randn({channels, state_dim});
    p.D_skip = Tensor::full({channels}, 1.0f, true);
    return p;
}

std::vector<Tensor*> SSMParams::parameters() {
    return {&A, &W_delta, &b_delta, &W_B, &W_C, &D_skip};
}

std::pair<Tensor, Tensor> discretize(const SSMParams& params, const Tensor& x_t) {
    const int d = params.channels, n = params.state_dim;
    if (x_t.size() != d) throw ShapeError("discretize: x_t must have D entries");
    // delta = softplus(W_delta^T-row product + bias), B = x W_B
    std::vector<float> delta(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        double s = params.b_delta.at(i);
        for (int j = 0; j < d; ++j) s += x_t.at(j) * params.W_delta.at(static_cast<size_t>(j) * d + i);
        if (!std::isfinite(s)) throw NumericsError("discretize: non-finite delta");
        delta[static_cast<size_t>(i)] = softplus_f(s);
    }
    std::vector<float> bv(static_cast<size_t>(n), 0.0f);
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += x_t.at(i) * params.W_B.at(static_cast<size_t>(i) * n + j);
        bv[static_cast<size_t>(j)] = static_cast<float>(s);
    }
    std::vector<float> abar(static_cast<size_t>(d) * n), bbarx(static_cast<size_t>(d) * n);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < n; ++j) {
            abar[static_cast<size_t>(i) * n + j] =
                std::exp(delta[static_cast<size_t>(i)] * params.A.at(static_cast<size_t>(i) * n + j));
            bbarx[static_cast<size_t>(i) * n + j] =
                delta[static_cast<size_t>(i)] * bv[static_cast<size_t>(j)] * x_t.at(i);
        }
    return {Tensor::from_data({d, n}, std::move(abar), false),
            Tensor::from_data({d, n}, std::move(bbarx), false)};
}

Tensor selective_scan(const SSMParams& params, const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("selective_scan: x must be [L,D]");
    const int L = x.dim(0), D = x.dim(1), N = params.state_dim;
    if (L < 1) throw ShapeError("selective_scan: empty sequence");
    if (D != params.channels) throw ShapeError("selective_scan: channel mismatch");

    const float* px = x.data().data();
    const float* pA = params.A.data().data();
    const float* pWd = params.W_delta.data().data();
    const float* pbd = params.b_delta.data().data();
    const float* pWB = params.W_B.data().data();
    const float* pWC = params.W_C.data().data();
    const float* pD = params.D_skip.data().data();

    // projections for the whole sequence
    auto spre = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * D);   // pre-softplus
    auto delta = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * D);
    auto Bmat = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * N);
    auto Cmat = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * N);
    kernels::matmul(px, pWd, spre->data(), L, D, D);
    for (int t = 0; t < L; ++t)
        for (int d = 0; d < D; ++d) {
            float& s = (*spre)[static_cast<size_t>(t) * D + d];
            s += pbd[d];
            if (!std::isfinite(s)) throw NumericsError("selective_scan: non-finite delta projection");
            (*delta)[static_cast<size_t>(t) * D + d] = softplus_f(s);
        }
    kernels::matmul(px, pWB, Bmat->data(), L, D, N);
    kernels::matmul(px, pWC, Cmat->data(), L, D, N);

    auto hist = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * D * N);  // h states
    std::vector<float> out(static_cast<size_t>(L) * D);
    std::vector<float> h(static_cast<size_t>(D) * N, 0.0f);
    for (int t = 0; t < L; ++t) {
        const float* xt = px + static_cast<size_t>(t) * D;
        const float* dt = delta->data() + static_cast<size_t>(t) * D;
        const float* Bv = Bmat->data() + static_cast<size_t>(t) * N;
        const float* Cv = Cmat->data() + static_cast<size_t>(t) * N;
        float* ht = hist->data() + static_cast<size_t>(t) * D * N;
        for (int d = 0; d < D; ++d) {
            const float dtd = dt[d];
            const float xtd = xt[d];
            double y = static_cast<double>(pD[d]) * xtd;
            float* hd = h.data() + static_cast<size_t>(d) * N;
            const float* Ad = pA + static_cast<size_t>(d) * N;
            for (int n = 0; n < N; ++n) {
                const float ab = std::exp(dtd * Ad[n]);
                hd[n] = ab * hd[n] + dtd * Bv[n] * xtd;
                ht[static_cast<size_t>(d) * N + n] = hd[n];
                y += static_cast<double>(Cv[n]) * hd[n];
            }
            out[static_cast<size_t>(t) * D + d] = static_cast<float>(y);
        }
    }

    bool rg = x.requires_grad();
    for (const Tensor* p : {&params.A, &params.W_delta, &params.b_delta, &params.W_B, &params.W_C,
                            &params.D_skip})
        rg = rg || p->requires_grad();

    Tensor result = Tensor::from_data({L, D}, std::move(out), rg);
    if (!rg) return result;

    auto node = result.node();
    auto xn = x.node();
    auto An = params.A.node();
    auto Wdn = params.W_delta.node();
    auto bdn = params.b_delta.node();
    auto WBn = params.W_B.node();
    auto WCn = params.W_C.node();
    auto Dn = params.D_skip.node();
    node->parents = {xn, An, Wdn, bdn, WBn, WCn, Dn};
    node->backward_fn = [=](TensorNode& nd) {
        const float* gy = nd.grad.data();
        const float* pxd = xn->data.data();
        const float* pAd = An->data.data();
        const float* pDd = Dn->data.data();
        std::vector<float> dDelta(static_cast<size_t>(L) * D, 0.0f);
        std::vector<float> dB(static_cast<size_t>(L) * N, 0.0f);
        std::vector<float> dC(static_cast<size_t>(L) * N, 0.0f);
        std::vector<float> dx(static_cast<size_t>(L) * D, 0.0f);
        std::vector<float> dA(static_cast<size_t>(D) * N, 0.0f);
        std::vector<float> dDs(static_cast<size_t>(D), 0.0f);
        std::vector<float> gh(static_cast<size_t>(D) * N, 0.0f);

        for (int t = L - 1; t >= 0; --t) {
            const float* xt = pxd + static_cast<size_t>(t) * D;
            const float* dt = delta->data() + static_cast<size_t>(t) * D;
            const float* Bv = Bmat->data() + static_cast<size_t>(t) * N;
            const float* Cv = Cmat->data() + static_cast<size_t>(t) * N;
            const float* ht = hist->data() + static_cast<size_t>(t) * D * N;
            const float* hprev = t > 0 ? hist->data() + static_cast<size_t>(t - 1) * D * N : nullptr;
            for (int d = 0; d < D; ++d) {
                const float g = gy[static_cast<size_t>(t) * D + d];
                const float dtd = dt[d];
                const float xtd = xt[d];
                float* ghd = gh.data() + static_cast<size_t>(d) * N;
                const float* Ad = pAd + static_cast<size_t>(d) * N;
                const float* htd = ht + static_cast<size_t>(d) * N;
                dDs[static_cast<size_t>(d)] += g * xtd;
                float gx = pDd[d] * g;
                float gdt = 0.0f;
                for (int n = 0; n < N; ++n) {
                    ghd[n] += Cv[n] * g;
                    dC[static_cast<size_t>(t) * N + n] += g * htd[n];
                    const float ab = std::exp(dtd * Ad[n]);
                    const float hp = hprev ? hprev[static_cast<size_t>(d) * N + n] : 0.0f;
                    dA[static_cast<size_t>(d) * N + n] += ghd[n] * hp * dtd * ab;
                    gdt += ghd[n] * (hp * Ad[n] * ab + Bv[n] * xtd);
                    dB[static_cast<size_t>(t) * N + n] += ghd[n] * dtd * xtd;
                    gx += ghd[n] * dtd * Bv[n];
                    ghd[n] *= ab;
                }
                dx[static_cast<size_t>(t) * D + d] += gx;
                dDelta[static_cast<size_t>(t) * D + d] = gdt;
            }
        }

        // softplus backward: ds = dDelta * sigmoid(spre)
        std::vector<float> ds(static_cast<size_t>(L) * D);
        for (size_t i = 0; i < ds.size(); ++i)
            ds[i] = dDelta[i] * sigmoid_f((*spre)[i]);

        auto add_matTmul = [&](const std::vector<float>& rhs, int cols, std::vector<float>& dst) {
            // dst[D,cols] += X^T [D,L] * rhs [L,cols]
            for (int i = 0; i < D; ++i)
                for (int j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (int t = 0; t < L; ++t)
                        acc += static_cast<double>(pxd[static_cast<size_t>(t) * D + i]) *
                               rhs[static_cast<size_t>(t) * cols + j];
                    dst[static_cast<size_t>(i) * cols + j] += static_cast<float>(acc);
                }
        };
        auto add_mulT = [&](const std::vector<float>& rhs, int cols, const float* w,
                            std::vector<float>& dst) {
            // dst[L,D] += rhs [L,cols] * W^T (W is [D,cols])
            for (int t = 0; t < L; ++t)
                for (int i = 0; i < D; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < cols; ++j)
                        acc += static_cast<double>(rhs[static_cast<size_t>(t) * cols + j]) *
                               w[static_cast<size_t>(i) * cols + j];
                    dst[static_cast<size_t>(t) * D + i] += static_cast<float>(acc);
                }
        };

        if (An->requires_grad) {
            An->ensure_grad();
            for (size_t i = 0; i < dA.size(); ++i) An->grad[i] += dA[i];
        }
        if (Dn->requires_grad) {
            Dn->ensure_grad();
            for (size_t i = 0; i < dDs.size(); ++i) Dn->grad[i] += dDs[i];
        }
        if (Wdn->requires_grad) {
            Wdn->ensure_grad();
            add_matTmul(ds, D, Wdn->grad);
        }
        if (bdn->requires_grad) {
            bdn->ensure_grad();
            for (int t = 0; t < L; ++t)
                for (int d = 0; d < D; ++d) bdn->grad[static_cast<size_t>(d)] += ds[static_cast<size_t>(t) * D + d];
        }
        if (WBn->requires_grad) {
            WBn->ensure_grad();
            add_matTmul(dB, N, WBn->grad);
        }
        if (WCn->requires_grad) {
            WCn->ensure_grad();
            add_matTmul(dC, N, WCn->grad);
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            add_mulT(ds, D, Wdn->data.data(), dx);
            add_mulT(dB, N, WBn->data.data(), dx);
            add_mulT(dC, N, WCn->data.data(), dx);
            for (size_t i = 0; i < dx.size(); ++i) xn->grad[i] += dx[i];
        }
    };
    return result;
}

std::vector<int> direction_permutation(int h, int w, ScanDirection dir) {
    if (h < 1 || w < 1) throw ShapeError("direction_permutation: H,W must be >= 1");
    std::vector<int> perm(static_cast<size_t>(h) * w);
    switch (dir) {
        case ScanDirection::LR:
            for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
            break;
        case ScanDirection::RL:
            for (size_t i = 0; i < perm.size(); ++i)
                perm[i] = static_cast<int>(perm.size() - 1 - i);
            break;
        case ScanDirection::TB: {
            size_t p = 0;
            for (int c = 0; c < w; ++c)
                for (int r = 0; r < h; ++r) perm[p++] = r * w + c;
            break;
        }
        case ScanDirection::BT: {
            size_t p = 0;
            for (int c = w - 1; c >= 0; --c)
                for (int r = h - 1; r >= 0; --r) perm[p++] = r * w + c;
            break;
        }
    }
    return perm;
}

std::vector<int> invert_permutation(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

Tensor ss2d(const std::array<SSMParams, 4>& params, const Tensor& f) {
    if (f.rank() != 3) throw ShapeError("ss2d: CHW tensor required");
    const int h = f.dim(1), w = f.dim(2);
    Tensor rows = chw_to_rows(f);
    static constexpr ScanDirection kDirs[4] = {ScanDirection::LR, ScanDirection::RL,
                                               ScanDirection::TB, ScanDirection::BT};
    Tensor acc;
    for (int d = 0; d < 4; ++d) {
        auto perm = direction_permutation(h, w, kDirs[d]);
        Tensor seq = gather_rows(rows, perm);
        Tensor y = selective_scan(params[static_cast<size_t>(d)], seq);
        Tensor back = gather_rows(y, invert_permutation(perm));
        acc = d == 0 ? back : add(acc, back);
    }
    return rows_to_chw(acc, h, w);
}

}  // namespace mathena
