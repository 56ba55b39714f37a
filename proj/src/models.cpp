#include "mathena/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mathena/checkpoint.hpp"
#include "mathena/serialize.hpp"

namespace mathena {

// ---------------- ParamStore ----------------

void ParamStore::add(const std::string& name, const Tensor& t) {
    if (!t.defined()) throw ConfigError("ParamStore::add: undefined tensor for " + name);
    for (const ParamEntry& e : entries_)
        if (e.name == name) throw ConfigError("ParamStore::add: duplicate name " + name);
    entries_.push_back(ParamEntry{name, t, false});
}

void ParamStore::add_all(const std::string& prefix, const std::vector<Tensor*>& ts) {
    for (size_t i = 0; i < ts.size(); ++i) add(prefix + "/" + std::to_string(i), *ts[i]);
}

void ParamStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (ParamEntry& e : entries_)
        if (e.name.rfind(prefix, 0) == 0) {
            e.frozen = frozen;
            e.tensor.set_requires_grad(!frozen);
        }
}

void ParamStore::set_all_frozen(bool frozen) { set_frozen_prefix("", frozen); }

int64_t ParamStore::trainable_scalar_count() const {
    int64_t n = 0;
    for (const ParamEntry& e : entries_)
        if (!e.frozen) n += e.tensor.size();
    return n;
}

std::string ParamStore::hash(const std::string& prefix) const {
    std::ostringstream ss(std::ios::binary);
    for (const ParamEntry& e : entries_)
        if (e.name.rfind(prefix, 0) == 0) {
            ss.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            ss.put('\0');
            write_mten(ss, e.tensor);
        }
    const std::string bytes = ss.str();
    return sha256_hex(bytes.data(), bytes.size());
}

// ---------------- building blocks ----------------

ConvBlock conv_block_init(int c_in, int c_out, int k, int stride, Rng& rng) {
    ConvBlock cb;
    const float std = std::sqrt(2.0f / (static_cast<float>(c_in) * k * k));
    cb.w = randn_tensor({c_out, c_in, k, k}, std, rng);
    cb.b = Tensor::zeros({c_out}, true);
    cb.stride = stride;
    cb.padding = k / 2;
    return cb;
}

Tensor conv_block_forward(const ConvBlock& cb, const Tensor& x) {
    return silu(conv2d(x, cb.w, cb.b, cb.stride, cb.padding));
}

namespace {

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
    return conv2d(x, w, b, 1, 0);
}

Tensor conv_randn(int c_out, int c_in, int k, Rng& rng) {
    const float std = std::sqrt(2.0f / (static_cast<float>(c_in) * k * k));
    return randn_tensor({c_out, c_in, k, k}, std, rng);
}

}  // namespace

// ---------------- detector ----------------

MiniMATHE mini_mathe_init(uint64_t seed) {
    Rng rng(seed);
    MiniMATHE m;
    m.stem1 = conv_block_init(1, 8, 3, 2, rng);
    m.stem2 = conv_block_init(8, 16, 3, 2, rng);
    m.down3 = conv_block_init(16, 24, 3, 2, rng);
    m.down4 = conv_block_init(24, 32, 3, 2, rng);
    m.c2f4 = C2fSSM::init(32, 32, 1, 4, rng);
    m.down5 = conv_block_init(32, 48, 3, 2, rng);
    m.c2f5 = C2fSSM::init(48, 48, 1, 4, rng);
    m.neck = BiFPNPyramid::init({16, 24, 32, 48}, 16, /*fusion_convs=*/false, rng);

    DetectHead& h = m.head;
    h.reg_w1 = conv_randn(8, 16, 3, rng);
    h.reg_b1 = Tensor::zeros({8}, true);
    h.reg_w2 = conv_randn(8, 8, 3, rng);
    h.reg_b2 = Tensor::zeros({8}, true);
    h.reg_out_w = conv_randn(4 * kDflBins, 8, 1, rng);
    h.reg_out_b = Tensor::zeros({4 * kDflBins}, true);
    h.obj_w1 = conv_randn(8, 16, 3, rng);
    h.obj_b1 = Tensor::zeros({8}, true);
    h.obj_w2 = conv_randn(8, 8, 3, rng);
    h.obj_b2 = Tensor::zeros({8}, true);
    h.obj_out_w = conv_randn(1, 8, 1, rng);
    // start pessimistic on objectness so the background sea does not dominate
    h.obj_out_b = Tensor::full({1}, -2.0f, true);

    ParamStore& p = m.params;
    p.add("stem1/w", m.stem1.w);
    p.add("stem1/b", m.stem1.b);
    p.add("stem2/w", m.stem2.w);
    p.add("stem2/b", m.stem2.b);
    p.add("down3/w", m.down3.w);
    p.add("down3/b", m.down3.b);
    p.add("down4/w", m.down4.w);
    p.add("down4/b", m.down4.b);
    p.add_all("c2f4", m.c2f4.parameters());
    p.add("down5/w", m.down5.w);
    p.add("down5/b", m.down5.b);
    p.add_all("c2f5", m.c2f5.parameters());
    p.add_all("neck", m.neck.parameters());
    p.add("head/reg_w1", h.reg_w1);
    p.add("head/reg_b1", h.reg_b1);
    p.add("head/reg_w2", h.reg_w2);
    p.add("head/reg_b2", h.reg_b2);
    p.add("head/reg_out_w", h.reg_out_w);
    p.add("head/reg_out_b", h.reg_out_b);
    p.add("head/obj_w1", h.obj_w1);
    p.add("head/obj_b1", h.obj_b1);
    p.add("head/obj_w2", h.obj_w2);
    p.add("head/obj_b2", h.obj_b2);
    p.add("head/obj_out_w", h.obj_out_w);
    p.add("head/obj_out_b", h.obj_out_b);
    return m;
}

Tensor image_to_tensor(const GrayImage& img) {
    std::vector<float> data(img.pixels.size());
    for (size_t i = 0; i < data.size(); ++i) data[i] = img.pixels[i] / 255.0f;
    return Tensor::from_data({1, img.height, img.width}, std::move(data));
}

DetectorOutput mathe_forward(const MiniMATHE& m, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != m.input_h ||
        image.dim(2) != m.input_w)
        throw ShapeError("mathe_forward: expected [1," + std::to_string(m.input_h) + "," +
                         std::to_string(m.input_w) + "] image, got " + shape_str(image.shape()));

    Tensor p2 = conv_block_forward(m.stem2, conv_block_forward(m.stem1, image));
    Tensor p3 = conv_block_forward(m.down3, p2);
    Tensor p4 = c2fssm_forward(m.c2f4, conv_block_forward(m.down4, p3));
    Tensor p5 = c2fssm_forward(m.c2f5, conv_block_forward(m.down5, p4));
    std::vector<Tensor> feats = build_pyramid(m.neck, {p2, p3, p4, p5});

    const DetectHead& h = m.head;
    DetectorOutput out;
    for (const Tensor& f : feats) {
        Tensor r = silu(conv2d(f, h.reg_w1, h.reg_b1, 1, 1));
        r = silu(conv2d(r, h.reg_w2, h.reg_b2, 1, 1));
        out.dfl.push_back(conv1x1(r, h.reg_out_w, h.reg_out_b));
        Tensor o = silu(conv2d(f, h.obj_w1, h.obj_b1, 1, 1));
        o = silu(conv2d(o, h.obj_w2, h.obj_b2, 1, 1));
        out.obj.push_back(conv1x1(o, h.obj_out_w, h.obj_out_b));
    }
    return out;
}

std::vector<BBox> mathe_decode(const MiniMATHE& m, const DetectorOutput& out, float conf_thr,
                               float nms_iou) {
    if (out.dfl.size() != m.strides.size() || out.obj.size() != m.strides.size())
        throw ShapeError("mathe_decode: level count mismatch");
    std::vector<BBox> boxes;
    for (size_t l = 0; l < m.strides.size(); ++l) {
        const int s = m.strides[l];
        const int gh = out.dfl[l].dim(1), gw = out.dfl[l].dim(2);
        std::span<const float> dfl = out.dfl[l].data();
        std::span<const float> obj = out.obj[l].data();
        const int64_t plane = static_cast<int64_t>(gh) * gw;
        for (int i = 0; i < gh; ++i) {
            for (int j = 0; j < gw; ++j) {
                const int64_t cell = static_cast<int64_t>(i) * gw + j;
                const double conf = 1.0 / (1.0 + std::exp(-static_cast<double>(obj[cell])));
                if (conf < conf_thr) continue;
                double side[4];
                for (int d = 0; d < 4; ++d) {
                    double mx = -1e30;
                    for (int b = 0; b < kDflBins; ++b)
                        mx = std::max(mx, static_cast<double>(dfl[(d * kDflBins + b) * plane + cell]));
                    double z = 0.0, e = 0.0;
                    for (int b = 0; b < kDflBins; ++b) {
                        const double p = std::exp(dfl[(d * kDflBins + b) * plane + cell] - mx);
                        z += p;
                        e += p * b;
                    }
                    side[d] = e / z;  // stride units
                }
                const double cxc = (j + 0.5) * s, cyc = (i + 0.5) * s;
                BBox b;
                b.cx = static_cast<float>((cxc + (side[2] - side[0]) * s / 2.0) / m.input_w);
                b.cy = static_cast<float>((cyc + (side[3] - side[1]) * s / 2.0) / m.input_h);
                b.w = static_cast<float>((side[0] + side[2]) * s / m.input_w);
                b.h = static_cast<float>((side[1] + side[3]) * s / m.input_h);
                b.conf = static_cast<float>(conf);
                boxes.push_back(b);
            }
        }
    }
    return nms(boxes, nms_iou);
}

std::vector<BBox> mathe_detect(const MiniMATHE& m, const GrayImage& img, float conf_thr,
                               float nms_iou) {
    return mathe_decode(m, mathe_forward(m, image_to_tensor(img)), conf_thr, nms_iou);
}

// ---------------- target assignment ----------------

std::vector<Assignment> assign_targets(const std::vector<GridSpec>& grids,
                                       const std::vector<BBox>& gts_px, int k) {
    if (k < 1) throw ConfigError("assign_targets: k must be positive");
    struct Cand {
        double score;
        int level, cell, gt;
        std::array<float, 4> ltrb;
    };
    std::vector<Assignment> out;
    std::vector<std::vector<char>> taken(grids.size());
    for (size_t l = 0; l < grids.size(); ++l)
        taken[l].assign(static_cast<size_t>(grids[l].h) * grids[l].w, 0);

    for (size_t g = 0; g < gts_px.size(); ++g) {
        const BBox& gt = gts_px[g];
        if (!gt.valid()) throw InputError("assign_targets: degenerate ground-truth box");
        std::vector<Cand> cands;
        for (size_t l = 0; l < grids.size(); ++l) {
            const GridSpec& gr = grids[l];
            for (int i = 0; i < gr.h; ++i) {
                for (int j = 0; j < gr.w; ++j) {
                    const double cx = (j + 0.5) * gr.stride, cy = (i + 0.5) * gr.stride;
                    if (cx <= gt.x1() || cx >= gt.x2() || cy <= gt.y1() || cy >= gt.y2()) continue;
                    const std::array<float, 4> ltrb{
                        static_cast<float>((cx - gt.x1()) / gr.stride),
                        static_cast<float>((cy - gt.y1()) / gr.stride),
                        static_cast<float>((gt.x2() - cx) / gr.stride),
                        static_cast<float>((gt.y2() - cy) / gr.stride)};
                    if (std::max({ltrb[0], ltrb[1], ltrb[2], ltrb[3]}) >
                        static_cast<float>(kDflBins - 1))
                        continue;
                    BBox at_cell = gt;
                    at_cell.cx = static_cast<float>(cx);
                    at_cell.cy = static_cast<float>(cy);
                    cands.push_back(Cand{static_cast<double>(iou(gt, at_cell)),
                                         static_cast<int>(l), i * gr.w + j, static_cast<int>(g),
                                         ltrb});
                }
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.level != b.level) return a.level < b.level;
            return a.cell < b.cell;
        });
        int used = 0;
        for (const Cand& c : cands) {
            if (used >= k) break;
            char& slot = taken[static_cast<size_t>(c.level)][static_cast<size_t>(c.cell)];
            if (slot) continue;
            slot = 1;
            out.push_back(Assignment{c.level, c.cell, c.gt, c.ltrb});
            ++used;
        }
    }
    return out;
}

// ---------------- HENA ----------------

namespace {

DWSepBlock dwsep_init(int c_in, int c_out, Rng& rng) {
    DWSepBlock b;
    b.dw = randn_tensor({c_in, 3, 3}, std::sqrt(2.0f / 9.0f), rng);
    b.pw = conv_randn(c_out, c_in, 1, rng);
    b.pb = Tensor::zeros({c_out}, true);
    b.stride = 2;
    return b;
}

Tensor dwsep_forward(const DWSepBlock& b, const Tensor& x) {
    return silu(depthwise_separable_conv(x, b.dw, b.pw, b.pb, b.stride));
}

Tensor tconv_randn(int c_in, int c_out, Rng& rng) {
    return randn_tensor({c_in, c_out, 2, 2}, std::sqrt(2.0f / (4.0f * c_in)), rng);
}

}  // namespace

MiniHENA mini_hena_init(uint64_t seed) {
    Rng rng(seed);
    MiniHENA m;
    m.enc1 = dwsep_init(1, 8, rng);
    m.enc2 = dwsep_init(8, 16, rng);
    m.enc3 = dwsep_init(16, 32, rng);
    m.bottleneck = GCSTBottleneck::init(32, 2, 4, rng);
    m.fuse3 = GCSTSkipFusion::init(32, 4, rng);
    m.fuse2 = GCSTSkipFusion::init(16, 4, rng);
    m.fuse1 = GCSTSkipFusion::init(8, 4, rng);
    m.mix3_w = conv_randn(32, 64, 1, rng);
    m.mix3_b = Tensor::zeros({32}, true);
    m.up3_w = tconv_randn(32, 16, rng);
    m.mix2_w = conv_randn(16, 32, 1, rng);
    m.mix2_b = Tensor::zeros({16}, true);
    m.up2_w = tconv_randn(16, 8, rng);
    m.mix1_w = conv_randn(8, 16, 1, rng);
    m.mix1_b = Tensor::zeros({8}, true);
    m.up1_w = tconv_randn(8, 8, rng);
    m.trunk_w = conv_randn(8, 8, 1, rng);
    m.trunk_b = Tensor::zeros({8}, true);
    m.carseg_w = conv_randn(1, 9, 1, rng);
    m.carseg_b = Tensor::zeros({1}, true);
    // probe heads end in a zero layer: stage 2/3 then begin from unsaturated
    // sigmoid probabilities (0.5) instead of whatever the random projection
    // of the frozen features happens to saturate at
    m.ad_hidden_w = conv_randn(8, 9, 3, rng);
    m.ad_hidden_b = Tensor::zeros({8}, true);
    m.ad_w = Tensor::zeros({1, 8, 1, 1}, true);
    m.ad_b = Tensor::zeros({1}, true);
    m.dds_w = Tensor::zeros({32, kNumThresholds}, true);
    m.dds_b = Tensor::zeros({kNumThresholds}, true);
    m.recon_trunk_w = conv_randn(1, 9, 1, rng);
    m.recon_trunk_b = Tensor::zeros({1}, true);
    m.recon_bot_w = conv_randn(1, 32, 1, rng);
    m.recon_bot_b = Tensor::zeros({1}, true);
    m.recon_les_w = conv_randn(2, 32, 1, rng);
    m.recon_les_b = Tensor::zeros({2}, true);

    ParamStore& p = m.params;
    p.add("backbone/enc1/dw", m.enc1.dw);
    p.add("backbone/enc1/pw", m.enc1.pw);
    p.add("backbone/enc1/pb", m.enc1.pb);
    p.add("backbone/enc2/dw", m.enc2.dw);
    p.add("backbone/enc2/pw", m.enc2.pw);
    p.add("backbone/enc2/pb", m.enc2.pb);
    p.add("backbone/enc3/dw", m.enc3.dw);
    p.add("backbone/enc3/pw", m.enc3.pw);
    p.add("backbone/enc3/pb", m.enc3.pb);
    p.add_all("backbone/bottleneck", m.bottleneck.parameters());
    p.add_all("backbone/fuse3", m.fuse3.parameters());
    p.add_all("backbone/fuse2", m.fuse2.parameters());
    p.add_all("backbone/fuse1", m.fuse1.parameters());
    p.add("backbone/mix3/w", m.mix3_w);
    p.add("backbone/mix3/b", m.mix3_b);
    p.add("backbone/up3/w", m.up3_w);
    p.add("backbone/mix2/w", m.mix2_w);
    p.add("backbone/mix2/b", m.mix2_b);
    p.add("backbone/up2/w", m.up2_w);
    p.add("backbone/mix1/w", m.mix1_w);
    p.add("backbone/mix1/b", m.mix1_b);
    p.add("backbone/up1/w", m.up1_w);
    p.add("backbone/trunk/w", m.trunk_w);
    p.add("backbone/trunk/b", m.trunk_b);
    p.add("backbone/recon_trunk/w", m.recon_trunk_w);
    p.add("backbone/recon_trunk/b", m.recon_trunk_b);
    p.add("backbone/recon_bot/w", m.recon_bot_w);
    p.add("backbone/recon_bot/b", m.recon_bot_b);
    p.add("backbone/recon_les/w", m.recon_les_w);
    p.add("backbone/recon_les/b", m.recon_les_b);
    p.add("carseg/w", m.carseg_w);
    p.add("carseg/b", m.carseg_b);
    p.add("ad/hidden_w", m.ad_hidden_w);
    p.add("ad/hidden_b", m.ad_hidden_b);
    p.add("ad/w", m.ad_w);
    p.add("ad/b", m.ad_b);
    p.add("dds/w", m.dds_w);
    p.add("dds/b", m.dds_b);
    return m;
}

HenaOutput hena_forward(const MiniHENA& m, const Tensor& crop) {
    if (crop.rank() != 3 || crop.dim(0) != 1 || crop.dim(1) != m.crop_size ||
        crop.dim(2) != m.crop_size)
        throw ShapeError("hena_forward: expected [1," + std::to_string(m.crop_size) + "," +
                         std::to_string(m.crop_size) + "] crop, got " + shape_str(crop.shape()));

    Tensor e1 = dwsep_forward(m.enc1, crop);   // [8,32,32]
    Tensor e2 = dwsep_forward(m.enc2, e1);     // [16,16,16]
    Tensor e3 = dwsep_forward(m.enc3, e2);     // [32,8,8]

    Tensor bot = gcst_bottleneck_forward(m.bottleneck, e3);
    HenaOutput out;
    out.bot = bot;
    out.bot_gap = global_avg_pool(bot);
    out.dds_logits = hena_dds_from_gap(m, out.bot_gap);

    Tensor d3 = silu(conv1x1(concat_axis0({bot, gcst_skip_fuse(m.fuse3, e3)}), m.mix3_w, m.mix3_b));
    Tensor u3 = transposed_conv2d(d3, m.up3_w, 2);  // [16,16,16]
    Tensor d2 = silu(conv1x1(concat_axis0({u3, gcst_skip_fuse(m.fuse2, e2)}), m.mix2_w, m.mix2_b));
    Tensor u2 = transposed_conv2d(d2, m.up2_w, 2);  // [8,32,32]
    Tensor d1 = silu(conv1x1(concat_axis0({u2, gcst_skip_fuse(m.fuse1, e1)}), m.mix1_w, m.mix1_b));
    Tensor u1 = transposed_conv2d(d1, m.up1_w, 2);  // [8,64,64]

    // input skip: the raw crop rides along as a ninth trunk channel, so the
    // pixel heads (and the frozen-backbone probes of stage 2) can read exact
    // intensities instead of a lossy reconstruction
    out.trunk = concat_axis0({silu(conv1x1(u1, m.trunk_w, m.trunk_b)), crop});
    out.carseg_logits = conv1x1(out.trunk, m.carseg_w, m.carseg_b);
    out.ad_logits = hena_ad_from_trunk(m, out.trunk);
    return out;
}

Tensor hena_ad_from_trunk(const MiniHENA& m, const Tensor& trunk) {
    return conv1x1(silu(conv2d(trunk, m.ad_hidden_w, m.ad_hidden_b, 1, 1)), m.ad_w, m.ad_b);
}

Tensor hena_recon_trunk(const MiniHENA& m, const Tensor& trunk) {
    return conv1x1(trunk, m.recon_trunk_w, m.recon_trunk_b);
}

Tensor hena_recon_bot(const MiniHENA& m, const Tensor& bot) {
    return conv1x1(bot, m.recon_bot_w, m.recon_bot_b);
}

Tensor hena_recon_les(const MiniHENA& m, const Tensor& bot) {
    return conv1x1(bot, m.recon_les_w, m.recon_les_b);
}

Tensor hena_dds_from_gap(const MiniHENA& m, const Tensor& gap) {
    if (gap.rank() != 1 || gap.dim(0) != m.bottleneck_channels)
        throw ShapeError("hena_dds_from_gap: expected [" +
                         std::to_string(m.bottleneck_channels) + "] features");
    return reshape(linear(reshape(gap, {1, m.bottleneck_channels}), m.dds_w, m.dds_b),
                   {kNumThresholds});
}

}  // namespace mathena
