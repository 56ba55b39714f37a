// Acceptance gate: one pass/fail line per criterion, nonzero exit on failure.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mathena/checkpoint.hpp"
#include "mathena/cli.hpp"
#include "mathena/evalmetrics.hpp"
#include "mathena/synth.hpp"
#include "mathena/train.hpp"

using namespace mathena;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int criterion, const std::string& what, bool pass, const std::string& detail = "") {
    std::printf("criterion %2d [%s] %s%s%s\n", criterion, pass ? "PASS" : "FAIL", what.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_tensor(const Shape& shape, Rng& rng, bool rg = false, float lo = -1.0f,
                     float hi = 1.0f) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(shape, std::move(v), rg);
}

// values bounded away from zero, for kinked ops (relu, silu near the dip)
Tensor random_offset_tensor(const Shape& shape, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (float& x : v) {
        const double m = rng.uniform(0.2, 1.0);
        x = static_cast<float>(rng.bernoulli(0.5) ? m : -m);
    }
    return Tensor::from_data(shape, std::move(v));
}

// per-position channel spread bounded below: VSS blocks layer-normalize the
// channel vector at each position, and the normalizer's curvature explodes
// when that vector's variance approaches zero
Tensor spread_tensor(int c, int h, int w, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch) {
        const float base = 0.8f * (2.0f * ch - (c - 1));
        for (int i = 0; i < h * w; ++i)
            v[static_cast<size_t>(ch) * h * w + i] =
                base + static_cast<float>(rng.uniform(-0.3, 0.3));
    }
    return Tensor::from_data({c, h, w}, std::move(v));
}

struct GradCase {
    std::string name;
    // builds (f, x) for one seed
    std::function<std::pair<std::function<Tensor(const Tensor&)>, Tensor>(Rng&)> make;
    double h = 1e-2;
    double tol = 1e-3;
};

// ---------------- criterion 1: finite-difference gradient suite ----------------

bool run_gradient_suite(std::string& detail) {
    const auto t0 = Clock::now();
    std::vector<GradCase> cases;

    cases.push_back({"elementwise-binary", [](Rng& rng) {
                         Tensor c1 = random_tensor({3, 4}, rng);
                         Tensor c2 = random_tensor({3, 4}, rng, false, 0.5f, 1.5f);
                         auto f = [c1, c2](const Tensor& x) {
                             Tensor y = div(mul(add(x, c1), sub(x, c1)), c2);
                             return sum(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({3, 4}, rng));
                     }});
    cases.push_back({"elementwise-unary", [](Rng& rng) {
                         auto f = [](const Tensor& x) {
                             Tensor a = exp(mul_scalar(x, 0.3f));
                             Tensor b = log(add_scalar(mul(x, x), 1.0f));
                             Tensor c = add(sigmoid(x), silu(x));
                             return sum(add(add(a, b), add(c, relu(x))));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_offset_tensor({4, 3}, rng));
                     }});
    cases.push_back({"min-max-neg", [](Rng& rng) {
                         // keep |x - c| large so the finite difference never
                         // crosses the min/max selection boundary
                         Tensor x = random_tensor({5}, rng);
                         std::vector<float> cv(5);
                         for (int i = 0; i < 5; ++i)
                             cv[static_cast<size_t>(i)] =
                                 x.at(i) + (rng.bernoulli(0.5) ? 0.5f : -0.5f);
                         Tensor c = Tensor::from_data({5}, std::move(cv));
                         auto f = [c](const Tensor& x2) {
                             return sum(add(vmin(x2, c), neg(vmax(x2, c))));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f), x);
                     }});
    cases.push_back({"matmul-x", [](Rng& rng) {
                         Tensor w = random_tensor({4, 3}, rng);
                         auto f = [w](const Tensor& x) { return sum(mul(matmul(x, w), matmul(x, w))); };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 4}, rng));
                     }});
    cases.push_back({"linear-w", [](Rng& rng) {
                         Tensor x = random_tensor({3, 4}, rng);
                         Tensor b = random_tensor({2}, rng);
                         auto f = [x, b](const Tensor& w) { return sum(silu(linear(x, w, b))); };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({4, 2}, rng));
                     }});
    cases.push_back({"conv2d-x", [](Rng& rng) {
                         Tensor w = random_tensor({3, 2, 3, 3}, rng, false, -0.5f, 0.5f);
                         Tensor b = random_tensor({3}, rng);
                         auto f = [w, b](const Tensor& x) {
                             return mean(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 5, 4}, rng));
                     }});
    cases.push_back({"conv2d-w", [](Rng& rng) {
                         Tensor x = random_tensor({2, 5, 4}, rng);
                         auto f = [x](const Tensor& w) { return mean(silu(conv2d(x, w, 2, 1))); };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({3, 2, 3, 3}, rng, false, -0.5f, 0.5f));
                     }});
    cases.push_back({"depthwise-conv", [](Rng& rng) {
                         Tensor w = random_tensor({3, 3, 3}, rng, false, -0.5f, 0.5f);
                         auto f = [w](const Tensor& x) {
                             return mean(mul(depthwise_conv2d(x, w, 1, 1), depthwise_conv2d(x, w, 1, 1)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({3, 4, 4}, rng));
                     }});
    cases.push_back({"dwsep-conv", [](Rng& rng) {
                         Tensor dw = random_tensor({2, 3, 3}, rng, false, -0.5f, 0.5f);
                         Tensor pw = random_tensor({3, 2, 1, 1}, rng);
                         Tensor pb = random_tensor({3}, rng);
                         auto f = [dw, pw, pb](const Tensor& x) {
                             return mean(silu(depthwise_separable_conv(x, dw, pw, pb, 2)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 6, 6}, rng));
                     }});
    cases.push_back({"transposed-conv", [](Rng& rng) {
                         Tensor w = random_tensor({2, 3, 2, 2}, rng, false, -0.5f, 0.5f);
                         auto f = [w](const Tensor& x) {
                             return mean(mul(transposed_conv2d(x, w, 2), transposed_conv2d(x, w, 2)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 3, 3}, rng));
                     }});
    cases.push_back({"layer-norm", [](Rng& rng) {
                         Tensor g = random_tensor({4}, rng, false, 0.5f, 1.5f);
                         Tensor b = random_tensor({4}, rng);
                         auto f = [g, b](const Tensor& x) {
                             return sum(mul(layer_norm(x, g, b, 1e-5f), layer_norm(x, g, b, 1e-5f)));
                         };
                         // keep row variance bounded below: the normalizer's
                         // curvature explodes as the variance approaches zero
                         std::vector<float> v(12);
                         for (int r = 0; r < 3; ++r)
                             for (int c = 0; c < 4; ++c)
                                 v[static_cast<size_t>(r * 4 + c)] = static_cast<float>(
                                     (c - 1.5) * 1.2 + rng.uniform(-0.3, 0.3));
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               Tensor::from_data({3, 4}, std::move(v)));
                     }});
    cases.push_back({"pool-upsample-gap", [](Rng& rng) {
                         auto f = [](const Tensor& x) {
                             Tensor a = maxpool2(x);
                             Tensor b = upsample_nearest2(a);
                             return add(sum(mul(b, b)), mean(global_avg_pool(x)));
                         };
                         // one clear winner per 2x2 pooling window, so the
                         // finite difference cannot flip the max selection
                         Tensor x = random_tensor({2, 4, 4}, rng, false, -0.2f, 0.2f);
                         {
                             std::span<float> d = x.mutable_data();
                             Rng pick(rng.next_u64());
                             for (int c = 0; c < 2; ++c)
                                 for (int by = 0; by < 2; ++by)
                                     for (int bx = 0; bx < 2; ++bx) {
                                         const int oy = static_cast<int>(pick.uniform_int(2));
                                         const int ox = static_cast<int>(pick.uniform_int(2));
                                         d[static_cast<size_t>(c) * 16 +
                                           static_cast<size_t>(by * 2 + oy) * 4 + bx * 2 + ox] += 1.0f;
                                     }
                         }
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f), x);
                     }});
    cases.push_back({"shape-indexing", [](Rng& rng) {
                         auto f = [](const Tensor& x) {
                             Tensor rows = chw_to_rows(x);               // [12,2]
                             Tensor g = gather_rows(rows, {0, 5, 5, 11});
                             Tensor back = rows_to_chw(rows, 3, 4);
                             Tensor cat = concat_axis0({g, slice_axis0(rows, 2, 2)});
                             return add(sum(mul(cat, cat)), sum(mul(back, reshape(x, {2, 3, 4}))));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 3, 4}, rng));
                     }});
    cases.push_back({"softmax-heads", [](Rng& rng) {
                         Tensor t = random_tensor({3, 4}, rng, false, 0.1f, 0.9f);
                         auto f = [t](const Tensor& x) {
                             static const std::vector<float> vals{0.0f, 1.0f, 2.0f, 3.0f};
                             Tensor e = softmax_expect_rows(x, vals);
                             Tensor ls = log_softmax_rows(x);
                             return add(sum(mul(e, e)), add(mean(ls), bce_with_logits_sum(x, t)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({3, 4}, rng));
                     }});
    cases.push_back({"selective-scan-x", [](Rng& rng) {
                         SSMParams p = SSMParams::init(3, 2, rng);
                         auto f = [p](const Tensor& x) {
                             Tensor y = selective_scan(p, x);
                             return mean(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({5, 3}, rng));
                     }});
    cases.push_back({"selective-scan-params", [](Rng& rng) {
                         SSMParams p = SSMParams::init(2, 2, rng);
                         Tensor x = random_tensor({4, 2}, rng);
                         auto f = [p, x](const Tensor& wd) {
                             SSMParams q = p;
                             q.W_delta = wd;
                             return mean(mul(selective_scan(q, x), selective_scan(q, x)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 2}, rng));
                     }});
    cases.push_back({"ss2d", [](Rng& rng) {
                         std::array<SSMParams, 4> p{SSMParams::init(2, 2, rng), SSMParams::init(2, 2, rng),
                                                    SSMParams::init(2, 2, rng), SSMParams::init(2, 2, rng)};
                         auto f = [p](const Tensor& x) { return mean(mul(ss2d(p, x), ss2d(p, x))); };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 3, 3}, rng));
                     }});
    cases.push_back({"vss-forward", [](Rng& rng) {
                         VSSBlock b = VSSBlock::init(2, 2, 2, rng);
                         b.w_out = random_tensor({4, 2}, rng, false, -0.3f, 0.3f);  // non-identity
                         auto f = [b](const Tensor& x) {
                             return mean(mul(vss_forward(b, x), vss_forward(b, x)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               spread_tensor(2, 3, 3, rng));
                     }});
    cases.push_back({"c2fssm", [](Rng& rng) {
                         C2fSSM b = C2fSSM::init(4, 4, 1, 2, rng);
                         b.units[0].w_out = random_tensor({4, 2}, rng, false, -0.3f, 0.3f);
                         auto f = [b](const Tensor& x) {
                             return mean(mul(c2fssm_forward(b, x), c2fssm_forward(b, x)));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               spread_tensor(4, 3, 3, rng));
                     }});
    cases.push_back({"gcst-bottleneck", [](Rng& rng) {
                         GCSTBottleneck b = GCSTBottleneck::init(2, 2, 2, rng);
                         b.vss.w_out = random_tensor({4, 2}, rng, false, -0.3f, 0.3f);
                         for (float& v : b.token.mutable_data()) v = 0.2f;
                         auto f = [b](const Tensor& x) {
                             Tensor y = gcst_bottleneck_forward(b, x);
                             return mean(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               spread_tensor(2, 3, 3, rng));
                     }});
    cases.push_back({"gcst-skip-fusion", [](Rng& rng) {
                         GCSTSkipFusion fu = GCSTSkipFusion::init(3, 2, rng);
                         for (float& v : fu.token.mutable_data()) v = 0.3f;
                         auto f = [fu](const Tensor& x) {
                             Tensor y = gcst_skip_fuse(fu, x);
                             return mean(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({3, 3, 3}, rng));
                     }});
    cases.push_back({"bifpn-fuse", [](Rng& rng) {
                         BiFPNNode node = BiFPNNode::init(3, 1e-4f);
                         std::vector<Tensor> rest{random_tensor({2, 3, 3}, rng),
                                                  random_tensor({2, 3, 3}, rng)};
                         auto f = [node, rest](const Tensor& x) {
                             Tensor y = bifpn_fuse(node, {x, rest[0], rest[1]});
                             return mean(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 3, 3}, rng));
                     }});
    cases.push_back({"bifpn-weights", [](Rng& rng) {
                         BiFPNNode node = BiFPNNode::init(2, 1e-4f);
                         std::vector<Tensor> in{random_tensor({2, 2, 2}, rng),
                                                random_tensor({2, 2, 2}, rng)};
                         auto f = [node, in](const Tensor& w) {
                             BiFPNNode n2 = node;
                             n2.weights = w;
                             Tensor y = bifpn_fuse(n2, in);
                             return mean(mul(y, y));
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2}, rng, false, 0.3f, 1.5f));
                     }});
    cases.push_back({"wiou-loss", [](Rng& rng) {
                         // the loss detaches the enclosing diagonal and the
                         // focusing factor, so the finite difference must not
                         // see them move: keep the prediction strictly inside
                         // the gt (the enclosing box is then fixed by the gt)
                         // and pick the running mean so the focusing factor is
                         // stationary at the base point (beta = 1/ln alpha)
                         BBox gt;
                         gt.cx = static_cast<float>(rng.uniform(0.45, 0.55));
                         gt.cy = static_cast<float>(rng.uniform(0.45, 0.55));
                         gt.w = static_cast<float>(rng.uniform(0.5, 0.7));
                         gt.h = static_cast<float>(rng.uniform(0.5, 0.7));
                         const float pw = gt.w * static_cast<float>(rng.uniform(0.6, 0.72));
                         const float ph = gt.h * static_cast<float>(rng.uniform(0.6, 0.72));
                         Tensor p = Tensor::from_data(
                             {4}, {gt.cx + static_cast<float>(rng.uniform(-0.03, 0.03)),
                                   gt.cy + static_cast<float>(rng.uniform(-0.03, 0.03)), pw, ph});
                         const double liou0 =
                             1.0 - static_cast<double>(pw) * ph / (static_cast<double>(gt.w) * gt.h);
                         const double rm = liou0 * std::log(1.9);
                         auto f = [gt, rm](const Tensor& pb) {
                             WIoUState st;  // fresh state: deterministic per call
                             st.running_mean = rm;
                             return wiou_loss(pb, gt, st);
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f), p);
                     }});
    cases.push_back({"l1-dfl-dice-ordinal", [](Rng& rng) {
                         BBox gt;
                         gt.cx = 0.5f;
                         gt.cy = 0.5f;
                         gt.w = static_cast<float>(rng.uniform(0.2, 0.4));
                         gt.h = 0.3f;
                         Tensor target = random_tensor({1, 4, 4}, rng, false, 0.1f, 0.9f);
                         const float dfl_t = static_cast<float>(rng.uniform(0.5, 15.5));
                         StageLabel st = StageLabel::from_index(static_cast<int>(rng.uniform_int(8)));
                         // one flat variable sliced into the four loss heads
                         auto f = [gt, dfl_t, st, target](const Tensor& x) {
                             Tensor l1 = l1_box_loss(slice_axis0(x, 0, 4), gt);
                             Tensor dfl = dfl_loss(slice_axis0(x, 4, 17), dfl_t);
                             Tensor ord = ordinal_loss(slice_axis0(x, 21, 7), st);
                             Tensor dice = dice_loss(
                                 sigmoid(reshape(slice_axis0(x, 28, 16), {1, 4, 4})), target);
                             return add(add(sum(l1), sum(dfl)), add(ord, dice));
                         };
                         Tensor x = random_offset_tensor({44}, rng);
                         {
                             // keep the box entries away from the gt so the
                             // finite difference cannot cross the |.| kink
                             std::span<float> d = x.mutable_data();
                             const float gv[4] = {gt.cx, gt.cy, gt.w, gt.h};
                             for (int i = 0; i < 4; ++i) {
                                 const float off = static_cast<float>(rng.uniform(0.15, 0.3));
                                 d[static_cast<size_t>(i)] = gv[i] + (rng.bernoulli(0.5) ? off : -off);
                             }
                         }
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f), x);
                     }});
    cases.push_back({"hena-loss", [](Rng& rng) {
                         Tensor car_gt = random_tensor({1, 4, 4}, rng, false, 0.0f, 1.0f);
                         Tensor ad_gt = random_tensor({1, 4, 4}, rng, false, 0.0f, 1.0f);
                         StageLabel st = StageLabel::from_index(static_cast<int>(rng.uniform_int(8)));
                         Tensor stage_logits = random_tensor({7}, rng);
                         HenaTerms terms;
                         terms.carseg = true;
                         terms.ad = true;
                         terms.stage = true;
                         auto f = [car_gt, ad_gt, st, stage_logits, terms](const Tensor& x) {
                             Tensor car = slice_axis0(x, 0, 1);
                             Tensor ad = slice_axis0(x, 1, 1);
                             return hena_loss(car, car_gt, ad, ad_gt, stage_logits, st, terms);
                         };
                         return std::make_pair(std::function<Tensor(const Tensor&)>(f),
                                               random_tensor({2, 4, 4}, rng));
                     }});

    for (const GradCase& c : cases) {
        for (uint64_t seed = 1; seed <= 20; ++seed) {
            Rng rng(seed * 7919 + 13);
            auto [f, x] = c.make(rng);
            GradCheckReport r = grad_check(f, x, c.h, c.tol);
            if (!r.pass) {
                std::ostringstream os;
                os << c.name << " seed " << seed << " max rel err " << r.max_rel_error;
                detail = os.str();
                return false;
            }
        }
    }
    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << cases.size() << " op families x 20 seeds in " << elapsed << " s";
    detail = os.str();
    return elapsed < 300.0;
}

// ---------------- criterion 2: scan oracle ----------------

std::vector<double> scan_oracle(const SSMParams& p, const Tensor& x) {
    const int L = x.dim(0), D = x.dim(1), N = p.state_dim;
    std::vector<double> h(static_cast<size_t>(D) * N, 0.0);
    std::vector<double> y(static_cast<size_t>(L) * D, 0.0);
    for (int t = 0; t < L; ++t) {
        std::vector<double> delta(static_cast<size_t>(D)), bv(static_cast<size_t>(N)),
            cv(static_cast<size_t>(N));
        for (int d = 0; d < D; ++d) {
            double s = p.b_delta.at(d);
            for (int j = 0; j < D; ++j)
                s += static_cast<double>(x.at(t * D + j)) * p.W_delta.at(j * D + d);
            delta[static_cast<size_t>(d)] = std::log1p(std::exp(s));
        }
        for (int n = 0; n < N; ++n) {
            double sb = 0.0, sc = 0.0;
            for (int d = 0; d < D; ++d) {
                sb += static_cast<double>(x.at(t * D + d)) * p.W_B.at(d * N + n);
                sc += static_cast<double>(x.at(t * D + d)) * p.W_C.at(d * N + n);
            }
            bv[static_cast<size_t>(n)] = sb;
            cv[static_cast<size_t>(n)] = sc;
        }
        for (int d = 0; d < D; ++d) {
            double acc = static_cast<double>(p.D_skip.at(d)) * x.at(t * D + d);
            for (int n = 0; n < N; ++n) {
                const double ab = std::exp(delta[static_cast<size_t>(d)] * p.A.at(d * N + n));
                double& hd = h[static_cast<size_t>(d) * N + n];
                hd = ab * hd +
                     delta[static_cast<size_t>(d)] * bv[static_cast<size_t>(n)] * x.at(t * D + d);
                acc += cv[static_cast<size_t>(n)] * hd;
            }
            y[static_cast<size_t>(t) * D + d] = acc;
        }
    }
    return y;
}

bool run_scan_oracle(std::string& detail) {
    Rng rng(1234);
    int checked = 0;
    for (int inst = 0; inst < 200; ++inst) {
        const bool twod = inst % 2 == 1;
        if (!twod) {
            const int L = 1 + static_cast<int>(rng.uniform_int(16));
            const int D = 1 + static_cast<int>(rng.uniform_int(4));
            const int N = 1 + static_cast<int>(rng.uniform_int(4));
            SSMParams p = SSMParams::init(D, N, rng);
            Tensor x = random_tensor({L, D}, rng);
            Tensor y = selective_scan(p, x);
            auto want = scan_oracle(p, x);
            for (int64_t i = 0; i < y.size(); ++i)
                if (std::abs(y.at(i) - want[static_cast<size_t>(i)]) > 1e-5) {
                    detail = "selective_scan mismatch at instance " + std::to_string(inst);
                    return false;
                }
        } else {
            const int H = 1 + static_cast<int>(rng.uniform_int(4));
            const int W = 1 + static_cast<int>(rng.uniform_int(4));
            const int D = 1 + static_cast<int>(rng.uniform_int(4));
            const int N = 1 + static_cast<int>(rng.uniform_int(4));
            std::array<SSMParams, 4> p{SSMParams::init(D, N, rng), SSMParams::init(D, N, rng),
                                       SSMParams::init(D, N, rng), SSMParams::init(D, N, rng)};
            Tensor f = random_tensor({D, H, W}, rng);
            Tensor y = ss2d(p, f);
            // oracle: permute, scan, inverse-permute, sum, per direction
            Tensor rows = chw_to_rows(f);
            std::vector<double> want(static_cast<size_t>(H) * W * D, 0.0);
            for (int d = 0; d < 4; ++d) {
                auto perm = direction_permutation(H, W, static_cast<ScanDirection>(d));
                Tensor seq = gather_rows(rows, perm);
                auto yd = scan_oracle(p[static_cast<size_t>(d)], seq);
                auto inv = invert_permutation(perm);
                for (int pos = 0; pos < H * W; ++pos)
                    for (int c = 0; c < D; ++c)
                        want[static_cast<size_t>(pos) * D + c] +=
                            yd[static_cast<size_t>(inv[static_cast<size_t>(pos)]) * D + c];
            }
            Tensor yrows = chw_to_rows(y);
            for (int64_t i = 0; i < yrows.size(); ++i)
                if (std::abs(yrows.at(i) - want[static_cast<size_t>(i)]) > 1e-5) {
                    detail = "ss2d mismatch at instance " + std::to_string(inst);
                    return false;
                }
        }
        ++checked;
    }
    detail = std::to_string(checked) + " instances";
    return true;
}

// ---------------- criterion 3: linear time ----------------

bool run_linear_time(std::string& detail) {
    Rng rng(9);
    // small state keeps the whole sweep cache-resident, so the measurement
    // reflects the recurrence cost rather than a cache-size transition
    SSMParams p = SSMParams::init(8, 4, rng);
    auto time_scan = [&](int L) {
        Tensor x = random_tensor({L, 8}, rng);
        selective_scan(p, x);  // warm caches and allocator before timing
        double best = 1e18;
        for (int rep = 0; rep < 7; ++rep) {
            const auto t0 = Clock::now();
            for (int inner = 0; inner < 3; ++inner)
                if (!std::isfinite(selective_scan(p, x).at(0))) return -1.0;
            best = std::min(best, seconds_since(t0) / 3.0);
        }
        return best;
    };
    std::ostringstream os;
    bool ok = true;
    double prev = time_scan(256);
    os << "T(256)=" << prev * 1e3 << "ms";
    for (int L : {512, 1024, 2048}) {
        const double t = time_scan(L);
        const double ratio = t / prev;
        os << " ratio(" << L << "/" << L / 2 << ")=" << ratio;
        if (ratio > 2.5) ok = false;
        prev = t;
    }
    detail = os.str();
    return ok;
}

// ---------------- criterion 4: GCST exactness ----------------

bool run_gcst_exactness(std::string& detail) {
    Rng rng(6);
    {
        // identity-at-init VSS + zero token: bit-exact pass-through
        GCSTBottleneck b = GCSTBottleneck::init(3, 2, 2, rng);
        Tensor f = random_tensor({3, 4, 5}, rng);
        Tensor y = gcst_bottleneck_forward(b, f);
        for (int64_t i = 0; i < f.size(); ++i)
            if (y.at(i) != f.at(i)) {
                detail = "identity stub not bit-exact";
                return false;
            }
    }
    {
        // non-trivial scan: output minus spatial branch is spatially constant
        GCSTBottleneck b = GCSTBottleneck::init(3, 2, 2, rng);
        b.vss.w_out = random_tensor({6, 3}, rng);
        for (float& v : b.token.mutable_data()) v = 0.3f;
        Tensor f = random_tensor({3, 4, 4}, rng);
        Tensor y = gcst_bottleneck_forward(b, f);
        Tensor xp = concat_axis0({b.token, chw_to_rows(f)});
        Tensor hseq = chw_to_rows(vss_forward(b.vss, rows_to_chw(xp, 1, 17)));
        Tensor hg = slice_axis0(hseq, 0, 1);
        Tensor z = rows_to_chw(slice_axis0(hseq, 1, 16), 4, 4);
        for (int c = 0; c < 3; ++c)
            for (int pix = 0; pix < 16; ++pix)
                if (y.at(c * 16 + pix) != z.at(c * 16 + pix) + hg.at(c)) {
                    detail = "broadcast-add not exact";
                    return false;
                }
    }
    return true;
}

// ---------------- criterion 5: BiFPN formula ----------------

bool run_bifpn_formula(std::string& detail) {
    // hand evaluation in double: (1*0 + 3*4) / (1 + 3 + 1e-4)
    const double hand = (1.0 * 0.0 + 3.0 * 4.0) / (1.0 + 3.0 + 1e-4);
    std::ostringstream os;
    os.precision(12);
    os << "hand=" << hand;
    detail = os.str();
    // the quoted constant 2.999925 is the hand value rounded at the 1e-9
    // digit; the exact quotient sits 1.875e-9 above it
    if (std::abs(hand - 2.999925) > 2e-9) return false;

    BiFPNNode node = BiFPNNode::init(2, 1e-4f);
    node.weights = Tensor::from_data({2}, {1.0f, 3.0f});
    Tensor a = Tensor::from_data({1, 1, 1}, {0.0f});
    Tensor b = Tensor::from_data({1, 1, 1}, {4.0f});
    Tensor fused = bifpn_fuse(node, {a, b});
    return std::abs(static_cast<double>(fused.at(0)) - hand) <= 1e-6;
}

// ---------------- criterion 6: chi-square gate ----------------

bool run_chi2_gate(std::string& detail) {
    const double crit = chi2_critical_value_dof4(0.001);
    std::ostringstream os;
    os << "critical=" << crit;
    if (crit < 18.46 || crit > 18.48) {
        detail = os.str() + " outside [18.46, 18.48]";
        return false;
    }
    ChiSquareGate gate = ChiSquareGate::make(0.001);
    Rng rng(71);
    int rejected = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double d2 = 0.0;
        for (int j = 0; j < 4; ++j) {
            const double z = rng.normal();
            d2 += z * z;
        }
        if (!chi2_gate_keep(d2, gate)) ++rejected;
    }
    const double rate = static_cast<double>(rejected) / n;
    os << " rejection=" << rate;
    detail = os.str();
    return std::abs(rate - 0.001) <= 0.002;
}

// ---------------- criterion 7: NMS / mAP oracles ----------------

std::vector<BBox> nms_brute(const std::vector<BBox>& boxes, float thr) {
    std::vector<char> alive(boxes.size(), 1), kept(boxes.size(), 0);
    for (;;) {
        int best = -1;
        for (size_t i = 0; i < boxes.size(); ++i)
            if (alive[i] && (best < 0 || boxes[i].conf > boxes[static_cast<size_t>(best)].conf))
                best = static_cast<int>(i);
        if (best < 0) break;
        kept[static_cast<size_t>(best)] = 1;
        alive[static_cast<size_t>(best)] = 0;
        for (size_t i = 0; i < boxes.size(); ++i)
            if (alive[i] && iou(boxes[i], boxes[static_cast<size_t>(best)]) > thr) alive[i] = 0;
    }
    std::vector<BBox> out;
    // report in the same confidence-descending stable order as the library
    std::vector<size_t> order(boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (boxes[a].conf != boxes[b].conf) return boxes[a].conf > boxes[b].conf;
        return a < b;
    });
    for (size_t i : order)
        if (kept[i]) out.push_back(boxes[i]);
    return out;
}

bool run_nms_map_oracles(std::string& detail) {
    Rng rng(31);
    for (int scene = 0; scene < 1000; ++scene) {
        std::vector<BBox> boxes;
        for (int i = 0; i < 8; ++i) {
            BBox b;
            b.cx = static_cast<float>(rng.uniform(0.2, 0.8));
            b.cy = static_cast<float>(rng.uniform(0.2, 0.8));
            b.w = static_cast<float>(rng.uniform(0.05, 0.4));
            b.h = static_cast<float>(rng.uniform(0.05, 0.4));
            b.conf = static_cast<float>(rng.uniform(0.0, 1.0));
            boxes.push_back(b);
        }
        const float thr = static_cast<float>(rng.uniform(0.2, 0.7));
        auto got = nms(boxes, thr);
        auto want = nms_brute(boxes, thr);
        if (got.size() != want.size()) {
            detail = "nms size mismatch at scene " + std::to_string(scene);
            return false;
        }
        for (size_t i = 0; i < got.size(); ++i)
            if (got[i].cx != want[i].cx || got[i].conf != want[i].conf) {
                detail = "nms element mismatch at scene " + std::to_string(scene);
                return false;
            }
    }

    // the hand-enumerated 3-gt / 4-pred PR staircase: AP = 56/101
    auto mk = [](float cx, float cy, float w, float h, float conf) {
        BBox b;
        b.cx = cx;
        b.cy = cy;
        b.w = w;
        b.h = h;
        b.conf = conf;
        return b;
    };
    DetScene s;
    s.gts = {mk(0.2f, 0.5f, 0.1f, 0.1f, 1), mk(0.5f, 0.5f, 0.1f, 0.1f, 1),
             mk(0.8f, 0.5f, 0.1f, 0.1f, 1)};
    s.preds = {mk(0.2f, 0.5f, 0.1f, 0.1f, 0.9f), mk(0.35f, 0.2f, 0.05f, 0.05f, 0.8f),
               mk(0.5f, 0.5f, 0.1f, 0.1f, 0.7f), mk(0.2f, 0.5f, 0.1f, 0.1f, 0.6f)};
    const double ap = eval_ap({s}, 0.5f);
    std::ostringstream os;
    os << "hand AP=" << ap << " want " << 56.0 / 101.0;
    detail = os.str();
    return std::abs(ap - 56.0 / 101.0) < 1e-9;
}

// ---------------- criterion 8: ordinal consistency ----------------

bool run_ordinal(std::string& detail) {
    std::vector<float> lo(7, -1.0f), hi(7, 1.0f);
    if (stage_decode(std::span<const float>(lo)).letter() != 'A') {
        detail = "all -1 did not decode to A";
        return false;
    }
    if (stage_decode(std::span<const float>(hi)).letter() != 'H') {
        detail = "all +1 did not decode to H";
        return false;
    }
    const float loss = ordinal_loss(Tensor::zeros({7}), StageLabel::from_index(3)).item();
    if (std::abs(loss - 7.0 * std::log(2.0)) > 1e-6) {
        detail = "zero-logit loss != 7 ln 2";
        return false;
    }
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> a(7), b(7);
        for (int i = 0; i < 7; ++i) {
            a[i] = static_cast<float>(rng.uniform(-3, 3));
            b[i] = a[i] + static_cast<float>(rng.uniform(0, 2));
        }
        if (stage_decode(std::span<const float>(b)).index <
            stage_decode(std::span<const float>(a)).index) {
            detail = "decode not monotone under logit increase";
            return false;
        }
    }
    return true;
}

// ---------------- criteria 9 & 10: desk-scale learning + freeze protocol ----

struct LearningOutcome {
    bool ran = false;
    double map50 = 0.0, dice_carseg = 0.0, dice_ad = 0.0, acc_dds = 0.0;
    double seconds = 0.0;
    HenaTrainResult hena;
    std::string hash_before_stage2;
};

LearningOutcome run_learning() {
    LearningOutcome out;
    const auto t0 = Clock::now();
    Dataset train = make_dataset(42, 256, 256, 128, 6);
    Dataset val = make_dataset(43, 64, 256, 128, 6);

    MiniMATHE det = mini_mathe_init(42);
    TrainConfig dcfg;
    dcfg.lr = 3e-3;
    dcfg.epochs = 30;
    dcfg.batch_size = 16;
    dcfg.warmup_steps = 30;
    dcfg.seed = 42;
    dcfg.target_metric = 0.90;
    DetectTrainResult dres = train_detector(det, train, val, dcfg);
    for (const EpochMetrics& m : dres.log)
        if (m.map50) out.map50 = std::max(out.map50, *m.map50);

    MiniHENA hena = mini_hena_init(42);
    HenaCrops crops = make_hena_crops(train, val, 64, 256, 64);
    TrainConfig c1;
    c1.lr = 5e-3;
    c1.epochs = 50;
    c1.batch_size = 16;
    c1.warmup_steps = 30;
    c1.seed = 42;
    c1.target_metric = 0.90;
    TrainConfig c2 = c1;
    c2.lr = 1e-2;
    c2.target_metric = 0.85;
    TrainConfig c3 = c1;
    c3.lr = 2e-2;
    c3.epochs = 100;
    c3.target_metric = 0.70;
    out.hena = train_hena_sequential(hena, crops, c1, c2, c3);
    for (const EpochMetrics& m : out.hena.log1)
        if (m.dice_carseg) out.dice_carseg = std::max(out.dice_carseg, *m.dice_carseg);
    for (const EpochMetrics& m : out.hena.log2)
        if (m.dice_ad) out.dice_ad = std::max(out.dice_ad, *m.dice_ad);
    for (const EpochMetrics& m : out.hena.log3)
        if (m.acc_dds) out.acc_dds = std::max(out.acc_dds, *m.acc_dds);
    out.seconds = seconds_since(t0);
    out.ran = true;
    return out;
}

// ---------------- criterion 11: CLI determinism ----------------

std::string slurp_dir(const fs::path& dir) {
    // concatenated (path, bytes) stream over the sorted recursive listing
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::ostringstream os;
    for (const fs::path& f : files) {
        os << fs::relative(f, dir).string() << "\n";
        std::ifstream in(f, std::ios::binary);
        os << in.rdbuf() << "\n";
    }
    return os.str();
}

int cli(const std::vector<std::string>& args) {
    std::vector<std::string> full = {"mathena"};
    full.insert(full.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (std::string& s : full) argv.push_back(s.data());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

bool run_cli_determinism(std::string& detail) {
    std::array<std::string, 2> transcripts;
    for (int runi = 0; runi < 2; ++runi) {
        const fs::path root =
            fs::temp_directory_path() / ("mathena_accept_run" + std::to_string(runi));
        fs::remove_all(root);
        fs::create_directories(root);
        std::ostringstream captured;
        std::streambuf* old_out = std::cout.rdbuf(captured.rdbuf());
        std::streambuf* old_err = std::cerr.rdbuf(captured.rdbuf());
        int rc = 0;
        rc |= cli({"synth", "--out", (root / "ds").string(), "--seed", "5", "--count", "8"});
        rc |= cli({"synth", "--out", (root / "val").string(), "--seed", "6", "--count", "4"});
        rc |= cli({"train-detect", "--data", (root / "ds").string(), "--val",
                   (root / "val").string(), "--seed", "3", "--epochs", "2", "--out",
                   (root / "det_ck").string()});
        rc |= cli({"train-hena", "--data", (root / "ds").string(), "--val",
                   (root / "val").string(), "--seed", "3", "--epochs", "2", "--epochs2", "2",
                   "--epochs3", "2", "--crops-train", "24", "--crops-val", "12", "--out",
                   (root / "hena_ck").string()});
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        if (rc != 0) {
            detail = "a CLI step failed on run " + std::to_string(runi);
            return false;
        }
        transcripts[static_cast<size_t>(runi)] = captured.str() + "\n===\n" + slurp_dir(root);
    }
    const bool same = transcripts[0] == transcripts[1];
    if (!same)
        detail = "runs differ";
    else
        detail = "datasets, checkpoints and logs byte-identical across reruns";
    for (int runi = 0; runi < 2; ++runi)
        fs::remove_all(fs::temp_directory_path() / ("mathena_accept_run" + std::to_string(runi)));
    return same;
}

}  // namespace

int main(int argc, char** argv) {
    // --fast: property criteria only, skipping the training-based ones
    const bool fast = argc > 1 && std::string(argv[1]) == "--fast";
    std::string d;

    d.clear();
    report(1, "gradient suite: finite differences over all differentiable ops", run_gradient_suite(d), d);

    d.clear();
    report(2, "scan oracle: selective_scan and ss2d vs sequential recurrence", run_scan_oracle(d), d);

    d.clear();
    report(3, "linear-time property: T(2L)/T(L) <= 2.5", run_linear_time(d), d);

    d.clear();
    report(4, "GCST exactness: broadcast-add constancy and identity stub", run_gcst_exactness(d), d);

    d.clear();
    report(5, "BiFPN formula: fused({0,4},{1,3},eps=1e-4) vs hand evaluation", run_bifpn_formula(d), d);

    d.clear();
    report(6, "chi-square gate: critical value and Monte-Carlo rejection rate", run_chi2_gate(d), d);

    d.clear();
    report(7, "NMS and mAP oracles: brute force + hand PR staircase", run_nms_map_oracles(d), d);

    d.clear();
    report(8, "ordinal consistency: decode extremes, 7 ln 2 loss, monotonicity", run_ordinal(d), d);

    if (fast) {
        std::printf("criteria 9-11 skipped (--fast)\n");
        return failures > 0 ? 1 : 0;
    }

    LearningOutcome lo = run_learning();
    {
        std::ostringstream os;
        os << "map50=" << lo.map50 << " dice_carseg=" << lo.dice_carseg << " dice_ad=" << lo.dice_ad
           << " acc_dds=" << lo.acc_dds << " time=" << lo.seconds << "s";
        const bool pass = lo.ran && lo.map50 >= 0.90 && lo.dice_carseg >= 0.90 &&
                          lo.dice_ad >= 0.85 && lo.acc_dds >= 0.70 && lo.seconds < 1800.0;
        report(9, "desk-scale learning targets within the epoch and time budget", pass, os.str());
    }
    {
        const bool hashes = lo.hena.backbone_hash_after_stage1 == lo.hena.backbone_hash_after_stage2 &&
                            lo.hena.backbone_hash_after_stage2 == lo.hena.backbone_hash_after_stage3;
        const bool count = lo.hena.stage3_trainable_count == 7 * 32 + 7;
        std::ostringstream os;
        os << "stage-3 trainables=" << lo.hena.stage3_trainable_count
           << (hashes ? ", backbone hash stable" : ", backbone hash CHANGED");
        report(10, "freeze protocol: backbone hash stable, linear probe is 7C+7", hashes && count,
               os.str());
    }

    d.clear();
    report(11, "determinism: CLI pipeline byte-identical across seeded reruns",
           run_cli_determinism(d), d);

    if (failures > 0) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
