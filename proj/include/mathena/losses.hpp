#pragma once

#include <array>
#include <optional>
#include <vector>

#include "mathena/tensor.hpp"

namespace mathena {

// Normalized center-form box.
struct BBox {
    float cx = 0, cy = 0, w = 0, h = 0;
    float conf = 1.0f;
    int cls = -1;

    float x1() const { return cx - w / 2; }
    float y1() const { return cy - h / 2; }
    float x2() const { return cx + w / 2; }
    float y2() const { return cy + h / 2; }
    float area() const { return w * h; }
    bool valid() const { return w > 0 && h > 0; }
};

// Ordinal development stage, index 0-7 <-> letters A-H.
struct StageLabel {
    int index = 0;
    char letter() const { return static_cast<char>('A' + index); }
    static StageLabel from_index(int i);
    static StageLabel from_letter(char c);
};

constexpr int kNumStages = 8;       // K_stg
constexpr int kNumThresholds = 7;   // K_stg - 1

float iou(const BBox& a, const BBox& b);

// EMA of the IoU loss, owned by a single training loop.
struct WIoUState {
    double running_mean = 1.0;
    double momentum = 0.95;
};

constexpr float kWiouAlpha = 1.9f;
constexpr float kWiouDelta = 3.0f;

// Wise-IoU v3: r * R_wiou * (1 - IoU), distance attention over the
// smallest enclosing box (denominator detached), focusing factor from the
// outlier degree beta = L_iou / running_mean (detached).
Tensor wiou_loss(const Tensor& pred_box, const BBox& gt, WIoUState& state);

Tensor l1_box_loss(const Tensor& pred_box, const BBox& gt);

constexpr int kDflBins = 17;  // R_max = 16 plus bin 0

// logits over bins 0..R_max; fractional targets supervise the two
// bracketing bins with linear weights.
Tensor dfl_loss(const Tensor& logits, float target);

// 1 - (2*sum(p*t)+s) / (sum(p)+sum(t)+s)
Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth = 1.0f);

// sum over 7 thresholds of BCE(sigma(y_j), 1[stage >= j])
Tensor ordinal_loss(const Tensor& logits, const StageLabel& stage);

StageLabel stage_decode(std::span<const float> logits);
StageLabel stage_decode(const Tensor& logits);

struct BoxPrediction {
    Tensor box;                         // [4] normalized cx,cy,w,h (differentiable)
    Tensor dfl_logits;                  // [4, kDflBins]
    std::array<float, 4> dfl_targets{}; // bin-space targets in [0, R_max]
};

struct MatheWeights {
    float wiou = 7.5f;
    float l1 = 1.0f;
    float dfl = 1.5f;
};

// Weighted sum over matched pred/gt pairs, mean over pairs. Empty match
// set returns 0 and raises *empty_warning.
Tensor mathe_loss(const std::vector<BoxPrediction>& preds, const std::vector<BBox>& gts,
                  const MatheWeights& weights, WIoUState& state,
                  bool* empty_warning = nullptr);

struct HenaTerms {
    bool carseg = false, ad = false, stage = false;
};

Tensor hena_loss(const Tensor& carseg_pred, const Tensor& carseg_gt, const Tensor& ad_pred,
                 const Tensor& ad_gt, const Tensor& stage_logits, const StageLabel& stage_gt,
                 const HenaTerms& available);

}  // namespace mathena
