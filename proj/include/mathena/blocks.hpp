#pragma once

#include <array>
#include <vector>

#include "mathena/rng.hpp"
#include "mathena/ssm.hpp"
#include "mathena/tensor.hpp"

namespace mathena {

Tensor randn_tensor(const Shape& shape, float stddev, Rng& rng, bool requires_grad = true);

// Gated unit around a four-directional 2D selective scan. Identity at init:
// the out-projection starts at zero and the residual carries the input.
struct VSSBlock {
    int channels = 0;
    int expansion = 2;
    bool residual = true;
    Tensor ln_gamma, ln_beta;          // [C]
    Tensor w_in1, b_in1, w_in2, b_in2; // [C,eC],[eC]
    Tensor dw_weight;                  // [eC,3,3]
    std::array<SSMParams, 4> scan;
    Tensor w_out, b_out;               // [eC,C],[C] zero-init

    static VSSBlock init(int channels, int expansion, int state_dim, Rng& rng);
    std::vector<Tensor*> parameters();
};

Tensor vss_forward(const VSSBlock& block, const Tensor& f);  // CHW -> CHW

// C2f topology with VSS units in place of bottleneck convs.
struct C2fSSM {
    int c_in = 0, c_out = 0;
    std::vector<VSSBlock> units;
    Tensor fuse_w, fuse_b;  // 1x1 conv [(2+n)*c_in/2 -> c_out]

    static C2fSSM init(int c_in, int c_out, int n_units, int state_dim, Rng& rng);
    std::vector<Tensor*> parameters();
};

Tensor c2fssm_forward(const C2fSSM& block, const Tensor& f);

// Learnable token prepended to the flattened bottleneck sequence; its
// post-scan state is broadcast-added to every spatial position.
struct GCSTBottleneck {
    Tensor token;  // [1,C], zero-init
    VSSBlock vss;

    static GCSTBottleneck init(int channels, int expansion, int state_dim, Rng& rng);
    std::vector<Tensor*> parameters();
};

Tensor gcst_bottleneck_forward(const GCSTBottleneck& b, const Tensor& f_bot);

// FiLM conditioning of skip features from a token run through a
// single-direction (LR) selective scan over the token-prefixed sequence.
struct GCSTSkipFusion {
    int channels = 0;
    Tensor token;          // [1,C]
    SSMParams scan;        // lightweight: one direction only
    Tensor w_psi, b_psi;   // [C,2C],[2C]; first C outputs gamma, last C beta

    static GCSTSkipFusion init(int channels, int state_dim, Rng& rng);
    std::vector<Tensor*> parameters();
};

Tensor gcst_skip_fuse(const GCSTSkipFusion& fusion, const Tensor& skip);

// Fast normalized fusion: relu-clamped scalar weights, epsilon in the
// denominator, optional post-fusion 3x3 conv.
struct BiFPNNode {
    Tensor weights;  // [num_inputs], init 1
    float epsilon = 1e-4f;
    Tensor conv_w, conv_b;  // undefined => identity (no conv)

    static BiFPNNode init(int num_inputs, float epsilon);
    static BiFPNNode init_with_conv(int num_inputs, float epsilon, int channels, Rng& rng);
    std::vector<Tensor*> parameters();
};

Tensor bifpn_fuse(const BiFPNNode& node, const std::vector<Tensor>& inputs);

// One top-down then one bottom-up pass over an ordered fine-to-coarse level
// list; nearest-neighbor upsample, stride-2 max pool downsample.
struct BiFPNPyramid {
    int levels = 0;
    int channels = 0;
    std::vector<Tensor> lateral_w, lateral_b;  // 1x1 conv per level
    std::vector<BiFPNNode> td_nodes;  // levels-1, for levels 0..levels-2
    std::vector<BiFPNNode> bu_nodes;  // levels-1, for levels 1..levels-1

    static BiFPNPyramid init(const std::vector<int>& in_channels, int out_channels,
                             bool fusion_convs, Rng& rng);
    std::vector<Tensor*> parameters();
};

std::vector<Tensor> build_pyramid(const BiFPNPyramid& pyr, const std::vector<Tensor>& features);

}  // namespace mathena
