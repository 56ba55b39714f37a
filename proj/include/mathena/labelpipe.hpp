#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mathena/losses.hpp"
#include "mathena/rng.hpp"

namespace mathena {

// 8-bit grayscale raster; doubles as a label mask (values {0,1,...}).
struct GrayImage {
    int width = 0, height = 0;
    std::vector<uint8_t> pixels;

    uint8_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
    uint8_t& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
    static GrayImage blank(int w, int h, uint8_t v = 0) {
        return GrayImage{w, h, std::vector<uint8_t>(static_cast<size_t>(w) * h, v)};
    }
};

void write_pgm(const std::string& path, const GrayImage& img);
GrayImage read_pgm(const std::string& path);

// Rectangle in source-image pixels recorded by crop_and_resize, enough to
// re-align a per-crop mask onto the original image.
struct CropMapping {
    int src_x = 0, src_y = 0, src_w = 0, src_h = 0;
    int opg_w = 0, opg_h = 0;
};

struct MaskPair {
    GrayImage crop;
    GrayImage carseg_mask;
    GrayImage ad_mask;
    std::optional<StageLabel> stage;
    CropMapping mapping;
};

// Gaussian fit over the normalized box features v = [cx/W, cy/H, log(w/W), log(h/H)]
struct BoxStats {
    std::array<double, 4> mean{};
    std::array<std::array<double, 4>, 4> cov{};
};

struct ChiSquareGate {
    int dof = 4;
    double p_threshold = 0.001;
    double critical_value = 0.0;

    static ChiSquareGate make(double p = 0.001);
};

// chi^2_4 inverse CDF at 1-p by incremental Simpson integration of the density.
double chi2_critical_value_dof4(double p, double step = 1e-4);

std::array<double, 4> box_features(const BBox& b, double img_w, double img_h);
BoxStats fit_box_stats(const std::vector<BBox>& boxes, double img_w, double img_h,
                       double reg = 1e-6);
double mahalanobis_sq(const std::array<double, 4>& v, const BoxStats& stats);
bool chi2_gate_keep(double d2, const ChiSquareGate& gate);

// Greedy NMS: confidence descending, ties by lower original index.
std::vector<BBox> nms(const std::vector<BBox>& boxes, float iou_threshold);

struct FilterCounts {
    int removed_conf = 0, removed_nms = 0, removed_chi2 = 0;
};

std::vector<BBox> filter_pseudo_labels(const std::vector<BBox>& candidates, float conf_threshold,
                                       float iou_threshold, const BoxStats& stats,
                                       const ChiSquareGate& gate, double img_w, double img_h,
                                       FilterCounts* counts = nullptr);

GrayImage merge_binary_mask(const GrayImage& multiclass);

// Expand the box by margin, clamp to the image, bilinear-resize the crop and
// nearest-resize the masks to out_size x out_size.
MaskPair crop_and_resize(const GrayImage& image, const GrayImage& carseg, const GrayImage& ad,
                         const BBox& box_px, int out_size = 224, float context_margin = 0.1f);

// rotation uniform in [-15, +15] degrees, horizontal flip with p = 0.5
MaskPair augment(const MaskPair& pair, uint64_t seed);
// deterministic core: same geometric transform on crop and both masks
MaskPair augment_with(const MaskPair& pair, double angle_deg, bool flip);

GrayImage spatial_realign(const GrayImage& mask, const CropMapping& mapping);

// ---- box JSONL interface: one {image_id, cx, cy, w, h, conf} object per line
struct NamedBox {
    std::string image_id;
    BBox box;
};

std::vector<NamedBox> read_boxes_jsonl(const std::string& path);
void write_boxes_jsonl(const std::string& path, const std::vector<NamedBox>& boxes);

}  // namespace mathena
