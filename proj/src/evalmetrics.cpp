#include "mathena/evalmetrics.hpp"

#include <algorithm>
#include <cmath>

namespace mathena {

double eval_ap(const std::vector<DetScene>& scenes, float iou_thr) {
    struct Pred {
        float conf;
        int scene;
        const BBox* box;
    };
    std::vector<Pred> preds;
    int64_t total_gts = 0;
    for (size_t s = 0; s < scenes.size(); ++s) {
        total_gts += static_cast<int64_t>(scenes[s].gts.size());
        for (const BBox& b : scenes[s].preds) preds.push_back(Pred{b.conf, static_cast<int>(s), &b});
    }
    if (total_gts == 0) return preds.empty() ? 1.0 : 0.0;

    std::stable_sort(preds.begin(), preds.end(),
                     [](const Pred& a, const Pred& b) { return a.conf > b.conf; });

    std::vector<std::vector<char>> matched(scenes.size());
    for (size_t s = 0; s < scenes.size(); ++s) matched[s].assign(scenes[s].gts.size(), 0);

    // precision at each recall level actually attained, conf-descending
    std::vector<double> prec, rec;
    int64_t tp = 0, fp = 0;
    for (const Pred& p : preds) {
        const std::vector<BBox>& gts = scenes[static_cast<size_t>(p.scene)].gts;
        int best = -1;
        float best_iou = iou_thr;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (matched[static_cast<size_t>(p.scene)][g]) continue;
            const float v = iou(*p.box, gts[g]);
            if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            matched[static_cast<size_t>(p.scene)][static_cast<size_t>(best)] = 1;
            ++tp;
        } else {
            ++fp;
        }
        prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gts));
    }

    // 101-point interpolation: max precision over the curve at recall >= r
    double ap = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double pmax = 0.0;
        for (size_t j = 0; j < prec.size(); ++j)
            if (rec[j] >= r) pmax = std::max(pmax, prec[j]);
        ap += pmax;
    }
    return ap / 101.0;
}

MapResult eval_map(const std::vector<DetScene>& scenes) {
    MapResult r;
    for (int i = 0; i < 10; ++i) {
        const float thr = 0.50f + 0.05f * static_cast<float>(i);
        const double ap = eval_ap(scenes, thr);
        if (i == 0) r.map50 = ap;
        r.map5095 += ap / 10.0;
    }
    return r;
}

SegResult eval_seg(const GrayImage& pred, const GrayImage& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw ShapeError("eval_seg: mask size mismatch");
    int64_t inter = 0, np = 0, ng = 0;
    for (size_t i = 0; i < pred.pixels.size(); ++i) {
        const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
        inter += p && g;
        np += p;
        ng += g;
    }
    SegResult r;
    if (np + ng == 0) {
        r.dice_pct = 100.0;
        r.iou_pct = 100.0;
        return r;
    }
    r.dice_pct = 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    r.iou_pct = 100.0 * static_cast<double>(inter) / static_cast<double>(np + ng - inter);
    return r;
}

DdsResult eval_dds(const std::vector<StageLabel>& preds, const std::vector<StageLabel>& gts) {
    if (preds.size() != gts.size()) throw ShapeError("eval_dds: pred/gt count mismatch");
    if (gts.empty()) throw InputError("eval_dds: empty evaluation set");
    int64_t correct = 0;
    std::array<int64_t, kNumStages> tp{}, fp{}, fn{};
    for (size_t i = 0; i < gts.size(); ++i) {
        const int p = preds[i].index, g = gts[i].index;
        if (p == g) {
            ++correct;
            ++tp[static_cast<size_t>(g)];
        } else {
            ++fp[static_cast<size_t>(p)];
            ++fn[static_cast<size_t>(g)];
        }
    }
    DdsResult r;
    r.acc_pct = 100.0 * static_cast<double>(correct) / static_cast<double>(gts.size());
    double f1_sum = 0.0;
    int f1_n = 0;
    for (int c = 0; c < kNumStages; ++c) {
        const int64_t denom = 2 * tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] +
                              fn[static_cast<size_t>(c)];
        if (denom == 0) continue;  // class absent from both preds and gts
        f1_sum += 2.0 * static_cast<double>(tp[static_cast<size_t>(c)]) /
                  static_cast<double>(denom);
        ++f1_n;
    }
    r.f1_pct = f1_n ? 100.0 * f1_sum / f1_n : 100.0;
    return r;
}

BBox unflip_box(const BBox& b) {
    BBox r = b;
    r.cx = 1.0f - b.cx;
    return r;
}

std::vector<BBox> tta_detect(const MiniMATHE& m, const GrayImage& img, float conf_thr,
                             float nms_thr) {
    std::vector<BBox> merged = mathe_detect(m, img, conf_thr, nms_thr);
    GrayImage mirror = GrayImage::blank(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mirror.at(x, y) = img.at(img.width - 1 - x, y);
    for (const BBox& b : mathe_detect(m, mirror, conf_thr, nms_thr))
        merged.push_back(unflip_box(b));
    return nms(merged, nms_thr);
}

}  // namespace mathena
