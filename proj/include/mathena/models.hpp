#pragma once

#include <array>
#include <string>
#include <vector>

#include "mathena/blocks.hpp"
#include "mathena/labelpipe.hpp"
#include "mathena/synth.hpp"

namespace mathena {

// Named parameter registry. Tensors are shared handles into the owning
// blocks, so optimizer updates through the store are visible to the model.
struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

class ParamStore {
public:
    void add(const std::string& name, const Tensor& t);
    void add_all(const std::string& prefix, const std::vector<Tensor*>& ts);

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }

    void set_frozen_prefix(const std::string& prefix, bool frozen);
    void set_all_frozen(bool frozen);
    int64_t trainable_scalar_count() const;

    // SHA-256 hex over the serialized tensors whose name starts with prefix.
    std::string hash(const std::string& prefix = "") const;

private:
    std::vector<ParamEntry> entries_;
};

struct ConvBlock {
    Tensor w, b;
    int stride = 1;
    int padding = 1;
};

ConvBlock conv_block_init(int c_in, int c_out, int k, int stride, Rng& rng);
Tensor conv_block_forward(const ConvBlock& cb, const Tensor& x);  // conv + SiLU

// ---------------- detector ----------------

// Decoupled head shared across pyramid levels: a regression tower emitting
// 4 x 17 DFL bins per cell and an objectness tower emitting 1 logit.
struct DetectHead {
    Tensor reg_w1, reg_b1, reg_w2, reg_b2, reg_out_w, reg_out_b;
    Tensor obj_w1, obj_b1, obj_w2, obj_b2, obj_out_w, obj_out_b;
};

struct MiniMATHE {
    int input_w = 256, input_h = 128;
    ConvBlock stem1, stem2;  // stride 4 total -> P2
    ConvBlock down3;         // -> P3 (stride 8)
    ConvBlock down4;         // -> P4 (stride 16)
    C2fSSM c2f4;
    ConvBlock down5;         // -> P5 (stride 32)
    C2fSSM c2f5;
    BiFPNPyramid neck;
    DetectHead head;
    std::vector<int> strides = {4, 8, 16, 32};
    ParamStore params;
};

MiniMATHE mini_mathe_init(uint64_t seed);

struct DetectorOutput {
    std::vector<Tensor> dfl;  // per level [4*17, h, w]
    std::vector<Tensor> obj;  // per level [1, h, w]
};

Tensor image_to_tensor(const GrayImage& img);  // [1,H,W], /255

DetectorOutput mathe_forward(const MiniMATHE& m, const Tensor& image);

// Decode to normalized center-form boxes with objectness confidence.
std::vector<BBox> mathe_decode(const MiniMATHE& m, const DetectorOutput& out, float conf_thr,
                               float nms_iou);
std::vector<BBox> mathe_detect(const MiniMATHE& m, const GrayImage& img, float conf_thr = 0.25f,
                               float nms_iou = 0.5f);

// ---------------- target assignment ----------------

struct GridSpec {
    int stride = 0, h = 0, w = 0;
};

struct Assignment {
    int level = 0;
    int cell = 0;  // row-major within the level grid
    int gt = 0;
    std::array<float, 4> ltrb_bins{};  // DFL targets in stride units
};

// Center-inside + top-k: candidate cells have their center inside the GT;
// scored by IoU between the GT and a GT-sized box centered on the cell
// (ties toward finer level / lower cell index). Cells whose ltrb targets
// exceed the DFL range at their level are skipped.
std::vector<Assignment> assign_targets(const std::vector<GridSpec>& grids,
                                       const std::vector<BBox>& gts_px, int k = 3);

// ---------------- HENA ----------------

struct DWSepBlock {
    Tensor dw, pw, pb;
    int stride = 2;
};

struct MiniHENA {
    int crop_size = 64;
    int bottleneck_channels = 32;
    DWSepBlock enc1, enc2, enc3;  // 1->8, 8->16, 16->32, stride 2 each
    GCSTBottleneck bottleneck;    // 32ch at 8x8
    GCSTSkipFusion fuse3, fuse2, fuse1;  // on e3 (32ch), e2 (16ch), e1 (8ch)
    Tensor mix3_w, mix3_b;  // 1x1 64->32
    Tensor up3_w;           // tconv 32->16
    Tensor mix2_w, mix2_b;  // 1x1 32->16
    Tensor up2_w;           // tconv 16->8
    Tensor mix1_w, mix1_b;  // 1x1 16->8
    Tensor up1_w;           // tconv 8->8
    Tensor trunk_w, trunk_b;      // 1x1 8->8; the raw crop is appended as a
                                  // ninth trunk channel (input skip)
    Tensor carseg_w, carseg_b;    // 1x1 9->1
    // AD head on the same trunk: 3x3 hidden layer + 1x1 out (out zero-init)
    Tensor ad_hidden_w, ad_hidden_b, ad_w, ad_b;
    // auxiliary reconstruction probes trained in stage 1 only; they force the
    // shared features to retain the raw intensity content the later frozen
    // stages probe (stand-in for a richly pretrained full-scale backbone)
    Tensor recon_trunk_w, recon_trunk_b;    // 1x1 9->1, reconstructs the crop
    Tensor recon_bot_w, recon_bot_b;        // 1x1 32->1, reconstructs 8x8 mean crop
    // 1x1 32->2, reconstructs 8x8 block fractions of the two lesion masks;
    // forces the bottleneck to carry lesion-area channels next to brightness,
    // so the linear staging head can correct the mean-brightness bias that
    // lesion pixels introduce
    Tensor recon_les_w, recon_les_b;
    Tensor dds_w, dds_b;          // linear 32->7 on GAP(F_bot)
    ParamStore params;
};

MiniHENA mini_hena_init(uint64_t seed);

struct HenaOutput {
    Tensor carseg_logits;  // [1,64,64]
    Tensor ad_logits;      // [1,64,64]
    Tensor dds_logits;     // [7]
    Tensor trunk;          // [9,64,64] shared decoder features + raw crop
    Tensor bot;            // [32,8,8] bottleneck features
    Tensor bot_gap;        // [32]
};

HenaOutput hena_forward(const MiniHENA& m, const Tensor& crop);

// Head-only applications used when the shared trunk is frozen and cached.
Tensor hena_ad_from_trunk(const MiniHENA& m, const Tensor& trunk);
Tensor hena_dds_from_gap(const MiniHENA& m, const Tensor& gap);

// Stage-1 auxiliary reconstructions (trained with the backbone, frozen after).
Tensor hena_recon_trunk(const MiniHENA& m, const Tensor& trunk);   // [1,64,64]
Tensor hena_recon_bot(const MiniHENA& m, const Tensor& bot);       // [1,8,8]
Tensor hena_recon_les(const MiniHENA& m, const Tensor& bot);       // [2,8,8]

}  // namespace mathena
