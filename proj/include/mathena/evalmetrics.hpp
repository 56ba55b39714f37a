#pragma once

#include <vector>

#include "mathena/labelpipe.hpp"
#include "mathena/models.hpp"

namespace mathena {

// Per-image prediction/ground-truth lists in a shared (normalized or pixel)
// coordinate convention.
struct DetScene {
    std::vector<BBox> preds;
    std::vector<BBox> gts;
};

// COCO-style 101-point interpolated AP at one IoU threshold.
double eval_ap(const std::vector<DetScene>& scenes, float iou_thr);

struct MapResult {
    double map50 = 0.0;
    double map5095 = 0.0;  // thresholds 0.50:0.05:0.95
};

MapResult eval_map(const std::vector<DetScene>& scenes);

struct SegResult {
    double dice_pct = 0.0;
    double iou_pct = 0.0;
};

// Binary masks after 0.5 threshold; empty-vs-empty scores 1 (100%).
SegResult eval_seg(const GrayImage& pred, const GrayImage& gt);

struct DdsResult {
    double acc_pct = 0.0;
    double f1_pct = 0.0;  // macro F1, absent classes excluded from the mean
};

DdsResult eval_dds(const std::vector<StageLabel>& preds, const std::vector<StageLabel>& gts);

// Horizontal-flip TTA: detect on the image and its mirror, unflip the
// mirrored boxes (cx' = 1 - cx in normalized coordinates), merge via NMS.
std::vector<BBox> tta_detect(const MiniMATHE& m, const GrayImage& img, float conf_thr = 0.25f,
                             float nms_thr = 0.5f);

BBox unflip_box(const BBox& b);  // involution

}  // namespace mathena
