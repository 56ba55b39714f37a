#include "mathena/blocks.hpp"

#include <cmath>

namespace mathena {

Tensor randn_tensor(const Shape& shape, float stddev, Rng& rng, bool requires_grad) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (float& x : v) x = stddev * static_cast<float>(rng.normal());
    return Tensor::from_data(shape, std::move(v), requires_grad);
}

// ---------------- VSS block ----------------

VSSBlock VSSBlock::init(int channels, int expansion, int state_dim, Rng& rng) {
    VSSBlock b;
    b.channels = channels;
    b.expansion = expansion;
    const int ec = channels * expansion;
    b.ln_gamma = Tensor::full({channels}, 1.0f, true);
    b.ln_beta = Tensor::zeros({channels}, true);
    const float sc_in = 1.0f / std::sqrt(static_cast<float>(channels));
    b.w_in1 = randn_tensor({channels, ec}, sc_in, rng);
    b.b_in1 = Tensor::zeros({ec}, true);
    b.w_in2 = randn_tensor({channels, ec}, sc_in, rng);
    b.b_in2 = Tensor::zeros({ec}, true);
    b.dw_weight = randn_tensor({ec, 3, 3}, 1.0f / 3.0f, rng);
    for (auto& s : b.scan) s = SSMParams::init(ec, state_dim, rng);
    b.w_out = Tensor::zeros({ec, channels}, true);
    b.b_out = Tensor::zeros({channels}, true);
    return b;
}

std::vector<Tensor*> VSSBlock::parameters() {
    std::vector<Tensor*> ps = {&ln_gamma, &ln_beta, &w_in1, &b_in1, &w_in2,
                               &b_in2,    &dw_weight, &w_out, &b_out};
    for (auto& s : scan)
        for (Tensor* p : s.parameters()) ps.push_back(p);
    return ps;
}

Tensor vss_forward(const VSSBlock& block, const Tensor& f) {
    if (f.rank() != 3 || f.dim(0) != block.channels)
        throw ShapeError("vss_forward: input channels mismatch");
    const int h = f.dim(1), w = f.dim(2);
    Tensor rows = chw_to_rows(f);
    Tensor nr = layer_norm(rows, block.ln_gamma, block.ln_beta, 1e-5f);
    Tensor p1 = linear(nr, block.w_in1, block.b_in1);
    Tensor p2 = linear(nr, block.w_in2, block.b_in2);
    Tensor scan_in = rows_to_chw(p1, h, w);
    Tensor scanned = ss2d(block.scan, silu(depthwise_conv2d(scan_in, block.dw_weight, 1, 1)));
    Tensor gated = mul(chw_to_rows(scanned), silu(p2));
    Tensor out = rows_to_chw(linear(gated, block.w_out, block.b_out), h, w);
    return block.residual ? add(f, out) : out;
}

// ---------------- C2fSSM ----------------

C2fSSM C2fSSM::init(int c_in, int c_out, int n_units, int state_dim, Rng& rng) {
    if (c_in % 2 != 0) throw ShapeError("C2fSSM: input channels must be divisible by 2");
    C2fSSM b;
    b.c_in = c_in;
    b.c_out = c_out;
    const int half = c_in / 2;
    for (int i = 0; i < n_units; ++i) b.units.push_back(VSSBlock::init(half, 2, state_dim, rng));
    const int cat = (2 + n_units) * half;
    b.fuse_w = randn_tensor({c_out, cat, 1, 1}, 1.0f / std::sqrt(static_cast<float>(cat)), rng);
    b.fuse_b = Tensor::zeros({c_out}, true);
    return b;
}

std::vector<Tensor*> C2fSSM::parameters() {
    std::vector<Tensor*> ps = {&fuse_w, &fuse_b};
    for (auto& u : units)
        for (Tensor* p : u.parameters()) ps.push_back(p);
    return ps;
}

Tensor c2fssm_forward(const C2fSSM& block, const Tensor& f) {
    if (f.rank() != 3) throw ShapeError("c2fssm_forward: CHW tensor required");
    if (f.dim(0) != block.c_in || f.dim(0) % 2 != 0)
        throw ShapeError("c2fssm_forward: channel count mismatch or indivisible");
    const int half = f.dim(0) / 2;
    Tensor a = slice_axis0(f, 0, half);
    Tensor b = slice_axis0(f, half, half);
    std::vector<Tensor> parts = {a, b};
    for (const auto& u : block.units) {
        b = vss_forward(u, b);
        parts.push_back(b);
    }
    return conv2d(concat_axis0(parts), block.fuse_w, block.fuse_b, 1, 0);
}

// ---------------- GCST bottleneck ----------------

GCSTBottleneck GCSTBottleneck::init(int channels, int expansion, int state_dim, Rng& rng) {
    GCSTBottleneck b;
    b.token = Tensor::zeros({1, channels}, true);
    b.vss = VSSBlock::init(channels, expansion, state_dim, rng);
    return b;
}

std::vector<Tensor*> GCSTBottleneck::parameters() {
    std::vector<Tensor*> ps = {&token};
    for (Tensor* p : vss.parameters()) ps.push_back(p);
    return ps;
}

Tensor gcst_bottleneck_forward(const GCSTBottleneck& b, const Tensor& f_bot) {
    if (f_bot.rank() != 3) throw ShapeError("gcst_bottleneck_forward: CHW tensor required");
    const int c = f_bot.dim(0), h = f_bot.dim(1), w = f_bot.dim(2);
    const int l = h * w;
    Tensor x = chw_to_rows(f_bot);                        // [L,C]
    Tensor xp = concat_axis0({b.token, x});               // [L+1,C]
    // the scan sees the token-prefixed sequence as a 1 x (L+1) grid
    Tensor hseq = chw_to_rows(vss_forward(b.vss, rows_to_chw(xp, 1, l + 1)));
    Tensor hg = slice_axis0(hseq, 0, 1);                  // [1,C]
    Tensor z = slice_axis0(hseq, 1, l);                   // [L,C]
    return rows_to_chw(add(z, hg), h, w);
}

// ---------------- GCST skip fusion ----------------

GCSTSkipFusion GCSTSkipFusion::init(int channels, int state_dim, Rng& rng) {
    GCSTSkipFusion f;
    f.channels = channels;
    f.token = Tensor::zeros({1, channels}, true);
    f.scan = SSMParams::init(channels, state_dim, rng);
    f.w_psi = randn_tensor({channels, 2 * channels},
                           0.01f / std::sqrt(static_cast<float>(channels)), rng);
    std::vector<float> bias(static_cast<size_t>(2 * channels), 0.0f);
    for (int i = 0; i < channels; ++i) bias[static_cast<size_t>(i)] = 1.0f;  // gamma starts at 1
    f.b_psi = Tensor::from_data({2 * channels}, std::move(bias), true);
    return f;
}

std::vector<Tensor*> GCSTSkipFusion::parameters() {
    std::vector<Tensor*> ps = {&token, &w_psi, &b_psi};
    for (Tensor* p : scan.parameters()) ps.push_back(p);
    return ps;
}

Tensor gcst_skip_fuse(const GCSTSkipFusion& fusion, const Tensor& skip) {
    if (skip.rank() != 3 || skip.dim(0) != fusion.channels)
        throw ShapeError("gcst_skip_fuse: channel mismatch");
    const int h = skip.dim(1), w = skip.dim(2);
    Tensor x = chw_to_rows(skip);                                // [L,C]
    Tensor seq = concat_axis0({fusion.token, x});                // [L+1,C]
    Tensor scanned = selective_scan(fusion.scan, seq);
    Tensor hs = slice_axis0(scanned, 0, 1);                      // token state, [1,C]
    Tensor gb = reshape(linear(hs, fusion.w_psi, fusion.b_psi), {2, fusion.channels});
    Tensor gamma = slice_axis0(gb, 0, 1);                        // [1,C]
    Tensor beta = slice_axis0(gb, 1, 1);
    return rows_to_chw(add(mul(x, gamma), beta), h, w);
}

// ---------------- BiFPN ----------------

BiFPNNode BiFPNNode::init(int num_inputs, float epsilon) {
    BiFPNNode n;
    n.weights = Tensor::full({num_inputs}, 1.0f, true);
    n.epsilon = epsilon;
    return n;
}

BiFPNNode BiFPNNode::init_with_conv(int num_inputs, float epsilon, int channels, Rng& rng) {
    BiFPNNode n = init(num_inputs, epsilon);
    n.conv_w = randn_tensor({channels, channels, 3, 3},
                            1.0f / std::sqrt(9.0f * static_cast<float>(channels)), rng);
    n.conv_b = Tensor::zeros({channels}, true);
    return n;
}

std::vector<Tensor*> BiFPNNode::parameters() {
    std::vector<Tensor*> ps = {&weights};
    if (conv_w.defined()) {
        ps.push_back(&conv_w);
        ps.push_back(&conv_b);
    }
    return ps;
}

Tensor bifpn_fuse(const BiFPNNode& node, const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw ShapeError("bifpn_fuse: empty input list");
    if (static_cast<int>(inputs.size()) != node.weights.size())
        throw ShapeError("bifpn_fuse: weight count does not match input count");
    Tensor wpos = relu(node.weights);
    Tensor acc;
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].shape() != inputs[0].shape())
            throw ShapeError("bifpn_fuse: all inputs must share a shape");
        Tensor term = mul(inputs[i], slice_axis0(wpos, static_cast<int>(i), 1));
        acc = i == 0 ? term : add(acc, term);
    }
    Tensor denom = add_scalar(sum(wpos), node.epsilon);
    Tensor fused = div(acc, denom);
    if (node.conv_w.defined()) fused = conv2d(fused, node.conv_w, node.conv_b, 1, 1);
    return fused;
}

BiFPNPyramid BiFPNPyramid::init(const std::vector<int>& in_channels, int out_channels,
                                bool fusion_convs, Rng& rng) {
    BiFPNPyramid p;
    p.levels = static_cast<int>(in_channels.size());
    if (p.levels < 2) throw ConfigError("BiFPNPyramid: at least two levels required");
    p.channels = out_channels;
    for (int c : in_channels) {
        p.lateral_w.push_back(randn_tensor({out_channels, c, 1, 1},
                                           1.0f / std::sqrt(static_cast<float>(c)), rng));
        p.lateral_b.push_back(Tensor::zeros({out_channels}, true));
    }
    for (int i = 0; i < p.levels - 1; ++i) {
        p.td_nodes.push_back(fusion_convs
                                 ? BiFPNNode::init_with_conv(2, 1e-4f, out_channels, rng)
                                 : BiFPNNode::init(2, 1e-4f));
        // bottom-up nodes: interior levels fuse {lateral, td, down}; the top fuses {lateral, down}
        const bool top = i == p.levels - 2;
        p.bu_nodes.push_back(fusion_convs
                                 ? BiFPNNode::init_with_conv(top ? 2 : 3, 1e-4f, out_channels, rng)
                                 : BiFPNNode::init(top ? 2 : 3, 1e-4f));
    }
    return p;
}

std::vector<Tensor*> BiFPNPyramid::parameters() {
    std::vector<Tensor*> ps;
    for (auto& w : lateral_w) ps.push_back(&w);
    for (auto& b : lateral_b) ps.push_back(&b);
    for (auto& n : td_nodes)
        for (Tensor* p : n.parameters()) ps.push_back(p);
    for (auto& n : bu_nodes)
        for (Tensor* p : n.parameters()) ps.push_back(p);
    return ps;
}

std::vector<Tensor> build_pyramid(const BiFPNPyramid& pyr, const std::vector<Tensor>& features) {
    if (static_cast<int>(features.size()) != pyr.levels)
        throw ConfigError("build_pyramid: expected " + std::to_string(pyr.levels) + " levels, got " +
                          std::to_string(features.size()));
    const int n = pyr.levels;
    std::vector<Tensor> lat(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        lat[static_cast<size_t>(i)] = conv2d(features[static_cast<size_t>(i)],
                                             pyr.lateral_w[static_cast<size_t>(i)],
                                             pyr.lateral_b[static_cast<size_t>(i)], 1, 0);
    // top-down
    std::vector<Tensor> td(static_cast<size_t>(n));
    td[static_cast<size_t>(n - 1)] = lat[static_cast<size_t>(n - 1)];
    for (int i = n - 2; i >= 0; --i)
        td[static_cast<size_t>(i)] = bifpn_fuse(
            pyr.td_nodes[static_cast<size_t>(i)],
            {lat[static_cast<size_t>(i)], upsample_nearest2(td[static_cast<size_t>(i + 1)])});
    // bottom-up
    std::vector<Tensor> out(static_cast<size_t>(n));
    out[0] = td[0];
    for (int i = 1; i < n; ++i) {
        Tensor down = maxpool2(out[static_cast<size_t>(i - 1)]);
        if (i == n - 1)
            out[static_cast<size_t>(i)] = bifpn_fuse(pyr.bu_nodes[static_cast<size_t>(i - 1)],
                                                     {lat[static_cast<size_t>(i)], down});
        else
            out[static_cast<size_t>(i)] =
                bifpn_fuse(pyr.bu_nodes[static_cast<size_t>(i - 1)],
                           {lat[static_cast<size_t>(i)], td[static_cast<size_t>(i)], down});
    }
    return out;
}

}  // namespace mathena
