#include "mathena/losses.hpp"

#include <algorithm>
#include <cmath>

namespace mathena {

StageLabel StageLabel::from_index(int i) {
    if (i < 0 || i >= kNumStages) throw InputError("StageLabel: index out of range");
    return StageLabel{i};
}

StageLabel StageLabel::from_letter(char c) {
    if (c < 'A' || c > 'H') throw InputError("StageLabel: letter out of range");
    return StageLabel{c - 'A'};
}

float iou(const BBox& a, const BBox& b) {
    const float ix = std::max(0.0f, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const float iy = std::max(0.0f, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const float inter = ix * iy;
    const float uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0f;
}

namespace {

Tensor coord(const Tensor& box, int i) { return slice_axis0(box, i, 1); }

struct TensorBoxView {
    Tensor cx, cy, w, h, x1, y1, x2, y2;
};

TensorBoxView box_view(const Tensor& box) {
    TensorBoxView v;
    v.cx = coord(box, 0);
    v.cy = coord(box, 1);
    v.w = coord(box, 2);
    v.h = coord(box, 3);
    Tensor hw = mul_scalar(v.w, 0.5f);
    Tensor hh = mul_scalar(v.h, 0.5f);
    v.x1 = sub(v.cx, hw);
    v.y1 = sub(v.cy, hh);
    v.x2 = add(v.cx, hw);
    v.y2 = add(v.cy, hh);
    return v;
}

// differentiable IoU of a [4] tensor box against a constant gt box
Tensor iou_tensor(const TensorBoxView& p, const BBox& g) {
    Tensor gx1 = Tensor::scalar(g.x1()), gy1 = Tensor::scalar(g.y1());
    Tensor gx2 = Tensor::scalar(g.x2()), gy2 = Tensor::scalar(g.y2());
    Tensor iw = relu(sub(vmin(p.x2, gx2), vmax(p.x1, gx1)));
    Tensor ih = relu(sub(vmin(p.y2, gy2), vmax(p.y1, gy1)));
    Tensor inter = mul(iw, ih);
    Tensor uni = add_scalar(sub(add(mul(p.w, p.h), Tensor::scalar(g.area())), inter), 1e-9f);
    return div(inter, uni);
}

}  // namespace

Tensor wiou_loss(const Tensor& pred_box, const BBox& gt, WIoUState& state) {
    if (pred_box.size() != 4) throw ShapeError("wiou_loss: pred box must have 4 entries");
    if (!gt.valid() || pred_box.at(2) <= 0 || pred_box.at(3) <= 0)
        throw InputError("wiou_loss: degenerate box");
    TensorBoxView p = box_view(pred_box);
    Tensor l_iou = sub(Tensor::scalar(1.0f), iou_tensor(p, gt));

    // distance attention: exp(center distance^2 / enclosing diag^2*), * = detached
    Tensor dx = sub(p.cx, Tensor::scalar(gt.cx));
    Tensor dy = sub(p.cy, Tensor::scalar(gt.cy));
    Tensor dist2 = add(mul(dx, dx), mul(dy, dy));
    const float ex1 = std::min(pred_box.at(0) - pred_box.at(2) / 2, gt.x1());
    const float ex2 = std::max(pred_box.at(0) + pred_box.at(2) / 2, gt.x2());
    const float ey1 = std::min(pred_box.at(1) - pred_box.at(3) / 2, gt.y1());
    const float ey2 = std::max(pred_box.at(1) + pred_box.at(3) / 2, gt.y2());
    const float diag2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
    Tensor r_wiou = exp(mul_scalar(dist2, 1.0f / std::max(diag2, 1e-9f)));

    // focusing factor from the detached outlier degree
    const double l_val = static_cast<double>(l_iou.item());
    const double beta = l_val / std::max(state.running_mean, 1e-9);
    const double r = beta / (kWiouDelta * std::pow(static_cast<double>(kWiouAlpha),
                                                   beta - kWiouDelta));
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * l_val;

    return mul_scalar(mul(r_wiou, l_iou), static_cast<float>(r));
}

Tensor l1_box_loss(const Tensor& pred_box, const BBox& gt) {
    if (pred_box.size() != 4) throw ShapeError("l1_box_loss: pred box must have 4 entries");
    Tensor g = Tensor::from_data({4}, {gt.cx, gt.cy, gt.w, gt.h}, false);
    Tensor diff = sub(pred_box, g);
    // |x| = relu(x) + relu(-x); mean over the 4 coordinates
    return mul_scalar(sum(relu(concat_axis0({diff, neg(diff)}))), 0.25f);
}

Tensor dfl_loss(const Tensor& logits, float target) {
    const int bins = static_cast<int>(logits.size());
    if (bins < 2) throw ShapeError("dfl_loss: need at least two bins");
    const float rmax = static_cast<float>(bins - 1);
    if (target < 0.0f || target > rmax) throw InputError("dfl_loss: target out of range");
    Tensor lsm = reshape(log_softmax_rows(reshape(logits, {1, bins})), {bins});
    const int lo = std::min(static_cast<int>(std::floor(target)), bins - 2);
    const int hi = lo + 1;
    const float w_hi = target - static_cast<float>(lo);
    const float w_lo = 1.0f - w_hi;
    Tensor loss = mul_scalar(slice_axis0(lsm, lo, 1), -w_lo);
    if (w_hi > 0.0f) loss = add(loss, mul_scalar(slice_axis0(lsm, hi, 1), -w_hi));
    return loss;
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth) {
    if (pred.shape() != target.shape()) throw ShapeError("dice_loss: shape mismatch");
    Tensor num = add_scalar(mul_scalar(sum(mul(pred, target)), 2.0f), smooth);
    Tensor den = add_scalar(add(sum(pred), sum(target)), smooth);
    return sub(Tensor::scalar(1.0f), div(num, den));
}

Tensor ordinal_loss(const Tensor& logits, const StageLabel& stage) {
    if (logits.size() != kNumThresholds)
        throw ShapeError("ordinal_loss: exactly 7 threshold logits required");
    std::vector<float> targets(kNumThresholds);
    for (int j = 1; j <= kNumThresholds; ++j)
        targets[static_cast<size_t>(j - 1)] = stage.index >= j ? 1.0f : 0.0f;
    Tensor t = Tensor::from_data({kNumThresholds}, std::move(targets), false);
    return bce_with_logits_sum(reshape(logits, {kNumThresholds}), t);
}

StageLabel stage_decode(std::span<const float> logits) {
    int count = 0;
    for (float v : logits)
        if (v > 0.0f) ++count;  // sigma(y) > 0.5 <=> y > 0
    return StageLabel{std::clamp(count, 0, kNumStages - 1)};
}

StageLabel stage_decode(const Tensor& logits) { return stage_decode(logits.data()); }

Tensor mathe_loss(const std::vector<BoxPrediction>& preds, const std::vector<BBox>& gts,
                  const MatheWeights& weights, WIoUState& state, bool* empty_warning) {
    if (preds.size() != gts.size()) throw ShapeError("mathe_loss: pred/gt count mismatch");
    if (empty_warning) *empty_warning = preds.empty();
    if (preds.empty()) return Tensor::scalar(0.0f);
    Tensor total = Tensor::scalar(0.0f);
    for (size_t i = 0; i < preds.size(); ++i) {
        const BoxPrediction& p = preds[i];
        Tensor item = mul_scalar(wiou_loss(p.box, gts[i], state), weights.wiou);
        item = add(item, mul_scalar(l1_box_loss(p.box, gts[i]), weights.l1));
        if (p.dfl_logits.defined()) {
            Tensor dfl = Tensor::scalar(0.0f);
            for (int c = 0; c < 4; ++c)
                dfl = add(dfl, dfl_loss(reshape(slice_axis0(p.dfl_logits, c, 1), {kDflBins}),
                                        p.dfl_targets[static_cast<size_t>(c)]));
            item = add(item, mul_scalar(mul_scalar(dfl, 0.25f), weights.dfl));
        }
        total = add(total, item);
    }
    return mul_scalar(total, 1.0f / static_cast<float>(preds.size()));
}

Tensor hena_loss(const Tensor& carseg_pred, const Tensor& carseg_gt, const Tensor& ad_pred,
                 const Tensor& ad_gt, const Tensor& stage_logits, const StageLabel& stage_gt,
                 const HenaTerms& available) {
    if (!available.carseg && !available.ad && !available.stage)
        throw InputError("hena_loss: no loss terms available");
    Tensor total = Tensor::scalar(0.0f);
    if (available.carseg) total = add(total, dice_loss(carseg_pred, carseg_gt));
    if (available.ad) total = add(total, dice_loss(ad_pred, ad_gt));
    if (available.stage) total = add(total, ordinal_loss(stage_logits, stage_gt));
    return total;
}

}  // namespace mathena
