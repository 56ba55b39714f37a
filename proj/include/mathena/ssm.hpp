#pragma once

#include <array>
#include <utility>
#include <vector>

#include "mathena/rng.hpp"
#include "mathena/tensor.hpp"

namespace mathena {

// Diagonal selective state-space parameters for one scan over D channels
// with N states per channel. Delta, B and C are input-dependent projections.
struct SSMParams {
    int channels = 0;   // D
    int state_dim = 0;  // N
    Tensor A;           // [D,N], negative at init so exp(delta*A) contracts
    Tensor W_delta;     // [D,D], delta = softplus(x W_delta + b_delta)
    Tensor b_delta;     // [D]
    Tensor W_B;         // [D,N]
    Tensor W_C;         // [D,N]
    Tensor D_skip;      // [D]

    static SSMParams init(int channels, int state_dim, Rng& rng);
    std::vector<Tensor*> parameters();
};

enum class ScanDirection { LR, RL, TB, BT };

// Zero-order-hold discretization at a single input: A_bar = exp(delta*A),
// B_bar_x = delta * B(x) * x (per channel, outer over state dim).
// Returns no-grad [D,N] tensors.
std::pair<Tensor, Tensor> discretize(const SSMParams& params, const Tensor& x_t);

// h_t = A_bar_t (.) h_{t-1} + B_bar_x_t ; y_t = C(x_t) . h_t + D_skip (.) x_t
// x: [L,D] -> y: [L,D]; differentiable w.r.t. x and all parameters.
Tensor selective_scan(const SSMParams& params, const Tensor& x);

// Bijective permutation of the H*W row-major grid: result[p] is the grid
// index visited at sequence position p.
std::vector<int> direction_permutation(int h, int w, ScanDirection dir);
std::vector<int> invert_permutation(const std::vector<int>& perm);

// Four-directional 2D scan: per direction permute, scan, inverse-permute;
// merge by elementwise sum in fixed order LR, RL, TB, BT.
Tensor ss2d(const std::array<SSMParams, 4>& params, const Tensor& f);

}  // namespace mathena
