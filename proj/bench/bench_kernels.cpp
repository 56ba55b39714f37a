// Times the OpenMP kernels against the serial reference on detector-sized
// workloads and checks that both produce bit-identical outputs.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "mathena/kernels.hpp"
#include "mathena/rng.hpp"
#include "mathena/ssm.hpp"

using namespace mathena;

namespace {

std::vector<float> random_vec(size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (float& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

template <typename F>
double best_of(int reps, F&& fn) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

void report(const char* name, double serial_ms, double omp_ms, bool identical) {
    std::printf("%-28s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   %s\n", name, serial_ms,
                omp_ms, serial_ms / omp_ms, identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main() {
    Rng rng(7);

    {
        const int m = 512, k = 256, n = 512;
        std::vector<float> a = random_vec(static_cast<size_t>(m) * k, rng);
        std::vector<float> b = random_vec(static_cast<size_t>(k) * n, rng);
        std::vector<float> ys(static_cast<size_t>(m) * n), yp(ys.size());
        const double ts = best_of(5, [&] { kernels::matmul_serial(a.data(), b.data(), ys.data(), m, k, n); });
        const double tp = best_of(5, [&] { kernels::matmul_omp(a.data(), b.data(), yp.data(), m, k, n); });
        report("matmul 512x256x512", ts, tp,
               std::memcmp(ys.data(), yp.data(), ys.size() * sizeof(float)) == 0);
    }

    {
        const int cin = 16, h = 64, w = 128, cout = 32, k = 3, stride = 1, pad = 1;
        std::vector<float> x = random_vec(static_cast<size_t>(cin) * h * w, rng);
        std::vector<float> wt = random_vec(static_cast<size_t>(cout) * cin * k * k, rng);
        std::vector<float> ys(static_cast<size_t>(cout) * h * w), yp(ys.size());
        const double ts = best_of(5, [&] {
            kernels::conv2d_forward_serial(x.data(), wt.data(), ys.data(), cin, h, w, cout, k,
                                           stride, pad, h, w);
        });
        const double tp = best_of(5, [&] {
            kernels::conv2d_forward_omp(x.data(), wt.data(), yp.data(), cin, h, w, cout, k, stride,
                                        pad, h, w);
        });
        report("conv2d fwd 16->32 64x128", ts, tp,
               std::memcmp(ys.data(), yp.data(), ys.size() * sizeof(float)) == 0);

        std::vector<float> gy = random_vec(ys.size(), rng);
        std::vector<float> gxs(x.size()), gws(wt.size()), gxp(x.size()), gwp(wt.size());
        const double tbs = best_of(3, [&] {
            std::fill(gxs.begin(), gxs.end(), 0.0f);
            std::fill(gws.begin(), gws.end(), 0.0f);
            kernels::conv2d_backward_serial(x.data(), wt.data(), gy.data(), gxs.data(), gws.data(),
                                            cin, h, w, cout, k, stride, pad, h, w);
        });
        const double tbp = best_of(3, [&] {
            std::fill(gxp.begin(), gxp.end(), 0.0f);
            std::fill(gwp.begin(), gwp.end(), 0.0f);
            kernels::conv2d_backward_omp(x.data(), wt.data(), gy.data(), gxp.data(), gwp.data(),
                                         cin, h, w, cout, k, stride, pad, h, w);
        });
        report("conv2d bwd 16->32 64x128", tbs, tbp,
               std::memcmp(gxs.data(), gxp.data(), gxs.size() * sizeof(float)) == 0 &&
                   std::memcmp(gws.data(), gwp.data(), gws.size() * sizeof(float)) == 0);
    }

    // Selective scan: inherently sequential in L, so the interesting property
    // is linear growth of wall time with sequence length.
    {
        SSMParams p = SSMParams::init(16, 4, rng);
        std::printf("\nselective_scan (D=16, N=4) length scaling:\n");
        double prev = 0.0;
        for (int len : {256, 512, 1024, 2048}) {
            Tensor x = Tensor::from_data(
                {len, 16}, random_vec(static_cast<size_t>(len) * 16, rng));
            const double t = best_of(3, [&] { selective_scan(p, x); });
            std::printf("  L=%5d  %8.3f ms%s\n", len, t,
                        prev > 0 ? (t / prev <= 2.5 ? "   (ratio ok)" : "   (ratio high)") : "");
            prev = t;
        }
    }
    return 0;
}
