#include "mathena/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mathena {

double lr_at(const TrainConfig& cfg, int step, int total_steps) {
    if (total_steps <= 0) throw ConfigError("lr_at: total_steps must be positive");
    if (step < 0 || step >= total_steps) throw ConfigError("lr_at: step out of range");
    const int warmup = std::min(cfg.warmup_steps, total_steps);
    if (warmup > 0 && step < warmup) return cfg.lr * (step + 1) / warmup;
    if (total_steps == warmup) return cfg.lr;
    const double progress = static_cast<double>(step - warmup) / (total_steps - warmup);
    const double pi = 3.14159265358979323846;
    return cfg.lr * 0.5 * (1.0 + std::cos(pi * progress));
}

AdamW::AdamW(ParamStore& store, double weight_decay, double beta1, double beta2, double eps)
    : store_(&store), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(store.entries().size());
    v_.resize(store.entries().size());
    for (size_t i = 0; i < store.entries().size(); ++i) {
        const size_t n = static_cast<size_t>(store.entries()[i].tensor.size());
        m_[i].assign(n, 0.0f);
        v_[i].assign(n, 0.0f);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < store_->entries().size(); ++i) {
        ParamEntry& e = store_->entries()[i];
        if (e.frozen || !e.tensor.has_grad()) continue;
        std::span<const float> g = e.tensor.grad();
        std::span<float> p = e.tensor.mutable_data();
        for (size_t j = 0; j < g.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw NumericsError("AdamW::step: non-finite gradient in " + e.name);
            m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1.0 - beta1_) * g[j]);
            v_[i][j] = static_cast<float>(beta2_ * v_[i][j] +
                                          (1.0 - beta2_) * static_cast<double>(g[j]) * g[j]);
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p[j] = static_cast<float>(p[j] - lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[j]));
        }
    }
    zero_grad();
}

void AdamW::zero_grad() {
    for (ParamEntry& e : store_->entries()) e.tensor.zero_grad();
}

namespace {

void json_field(std::ostringstream& os, const char* key, const std::optional<double>& v,
                bool first = false) {
    if (!first) os << ",";
    os << "\"" << key << "\":";
    if (v)
        os << *v;
    else
        os << "null";
}

}  // namespace

std::string metrics_json(const EpochMetrics& m) {
    std::ostringstream os;
    os.precision(9);
    os << "{\"epoch\":" << m.epoch;
    json_field(os, "loss", m.loss);
    json_field(os, "map50", m.map50);
    json_field(os, "map5095", m.map5095);
    json_field(os, "dice_carseg", m.dice_carseg);
    json_field(os, "dice_ad", m.dice_ad);
    json_field(os, "acc_dds", m.acc_dds);
    json_field(os, "f1_dds", m.f1_dds);
    json_field(os, "lr", m.lr);
    os << "}";
    return os.str();
}

namespace {

void log_epoch(std::vector<EpochMetrics>& log, std::ostream* stream, const EpochMetrics& m) {
    log.push_back(m);
    if (stream) *stream << metrics_json(m) << "\n";
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(i))]);
}

// Fixed per-scene supervision: assignment list plus flat objectness targets.
struct SceneTargets {
    Tensor image;
    std::vector<Assignment> assigns;
    std::vector<BBox> matched_gts_norm;            // one per assignment
    std::vector<std::vector<int>> pos_idx;         // per level
    std::vector<std::vector<int>> neg_idx;         // per level
};

BBox normalize_box(const BBox& px, int w, int h) {
    BBox b = px;
    b.cx = px.cx / static_cast<float>(w);
    b.cy = px.cy / static_cast<float>(h);
    b.w = px.w / static_cast<float>(w);
    b.h = px.h / static_cast<float>(h);
    return b;
}

SceneTargets build_scene_targets(const MiniMATHE& model, const std::vector<GridSpec>& grids,
                                 const SynthScene& scene) {
    SceneTargets t;
    t.image = image_to_tensor(scene.image);
    t.assigns = assign_targets(grids, scene.boxes, 3);
    std::vector<std::vector<char>> pos(grids.size());
    for (size_t l = 0; l < grids.size(); ++l)
        pos[l].assign(static_cast<size_t>(grids[l].h) * grids[l].w, 0);
    for (const Assignment& a : t.assigns) {
        t.matched_gts_norm.push_back(
            normalize_box(scene.boxes[static_cast<size_t>(a.gt)], model.input_w, model.input_h));
        pos[static_cast<size_t>(a.level)][static_cast<size_t>(a.cell)] = 1;
    }
    t.pos_idx.resize(grids.size());
    t.neg_idx.resize(grids.size());
    for (size_t l = 0; l < grids.size(); ++l)
        for (size_t c = 0; c < pos[l].size(); ++c)
            (pos[l][c] ? t.pos_idx[l] : t.neg_idx[l]).push_back(static_cast<int>(c));
    return t;
}

// Differentiable normalized box from the DFL expectation at one grid cell.
Tensor cell_box(const Tensor& expect, const GridSpec& g, int cell, int img_w, int img_h) {
    const float s = static_cast<float>(g.stride);
    const float w = static_cast<float>(img_w), h = static_cast<float>(img_h);
    const int i = cell / g.w, j = cell % g.w;
    const std::vector<float> mix = {
        -s / (2 * w), 0.0f,         s / (2 * w), 0.0f,          // cx
        0.0f,         -s / (2 * h), 0.0f,        s / (2 * h),   // cy
        s / w,        0.0f,         s / w,       0.0f,          // w
        0.0f,         s / h,        0.0f,        s / h};        // h
    const std::vector<float> base = {(j + 0.5f) * s / w, (i + 0.5f) * s / h, 0.0f, 0.0f};
    Tensor m = Tensor::from_data({4, 4}, mix);
    Tensor c = Tensor::from_data({4}, base);
    return add(reshape(matmul(m, reshape(expect, {4, 1})), {4}), c);
}

const std::vector<float>& dfl_bin_values() {
    static const std::vector<float> v = [] {
        std::vector<float> x(kDflBins);
        for (int i = 0; i < kDflBins; ++i) x[static_cast<size_t>(i)] = static_cast<float>(i);
        return x;
    }();
    return v;
}

}  // namespace

DetectTrainResult train_detector(MiniMATHE& model, const Dataset& train, const Dataset& val,
                                 const TrainConfig& cfg, std::ostream* log_stream) {
    if (train.scenes.empty()) throw InputError("train_detector: empty training set");
    std::vector<GridSpec> grids;
    for (int s : model.strides) grids.push_back(GridSpec{s, model.input_h / s, model.input_w / s});

    std::vector<SceneTargets> targets;
    for (const SynthScene& sc : train.scenes) targets.push_back(build_scene_targets(model, grids, sc));
    std::vector<Tensor> val_images;
    std::vector<DetScene> val_scenes(val.scenes.size());
    for (size_t i = 0; i < val.scenes.size(); ++i) {
        val_images.push_back(image_to_tensor(val.scenes[i].image));
        for (const BBox& b : val.scenes[i].boxes)
            val_scenes[i].gts.push_back(normalize_box(b, model.input_w, model.input_h));
    }

    AdamW opt(model.params, cfg.weight_decay);
    WIoUState wiou_state;
    MatheWeights weights;
    Rng rng(cfg.seed);
    const int n = static_cast<int>(train.scenes.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * steps_per_epoch;

    DetectTrainResult result;
    std::vector<size_t> order(targets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    int step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, rng);
        double epoch_loss = 0.0;
        double last_lr = 0.0;
        for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, n - b0);
            for (int bi = 0; bi < bn; ++bi) {
                const SceneTargets& t = targets[order[static_cast<size_t>(b0 + bi)]];
                DetectorOutput out = mathe_forward(model, t.image);

                std::vector<BoxPrediction> preds;
                std::vector<Tensor> dfl_rows(grids.size());
                for (const Assignment& a : t.assigns) {
                    const size_t l = static_cast<size_t>(a.level);
                    if (!dfl_rows[l].defined()) dfl_rows[l] = chw_to_rows(out.dfl[l]);
                    BoxPrediction p;
                    p.dfl_logits =
                        reshape(gather_rows(dfl_rows[l], {a.cell}), {4, kDflBins});
                    Tensor expect = softmax_expect_rows(p.dfl_logits, dfl_bin_values());
                    p.box = cell_box(expect, grids[l], a.cell, model.input_w, model.input_h);
                    p.dfl_targets = a.ltrb_bins;
                    preds.push_back(p);
                }
                Tensor loss = mathe_loss(preds, t.matched_gts_norm, weights, wiou_state);

                // objectness: balanced positive/negative means per level so the
                // handful of assigned cells is not drowned by the background sea
                for (size_t l = 0; l < grids.size(); ++l) {
                    Tensor rows = chw_to_rows(out.obj[l]);  // [cells, 1]
                    if (!t.pos_idx[l].empty()) {
                        const int np = static_cast<int>(t.pos_idx[l].size());
                        Tensor pos = gather_rows(rows, t.pos_idx[l]);
                        loss = add(loss,
                                   mul_scalar(bce_with_logits_sum(pos, Tensor::full({np, 1}, 1.0f)),
                                              1.0f / static_cast<float>(np)));
                    }
                    if (!t.neg_idx[l].empty()) {
                        const int nn = static_cast<int>(t.neg_idx[l].size());
                        Tensor neg = gather_rows(rows, t.neg_idx[l]);
                        loss = add(loss,
                                   mul_scalar(bce_with_logits_sum(neg, Tensor::zeros({nn, 1})),
                                              1.0f / static_cast<float>(nn)));
                    }
                }

                epoch_loss += loss.item();
                backward(mul_scalar(loss, 1.0f / static_cast<float>(bn)));
            }
            last_lr = lr_at(cfg, step, total_steps);
            opt.step(last_lr);
            ++step;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.loss = epoch_loss / n;
        em.lr = last_lr;
        if (!val_scenes.empty()) {
            for (size_t i = 0; i < val_scenes.size(); ++i)
                val_scenes[i].preds =
                    mathe_decode(model, mathe_forward(model, val_images[i]), 0.25f, 0.5f);
            MapResult mr = eval_map(val_scenes);
            em.map50 = mr.map50;
            em.map5095 = mr.map5095;
        }
        log_epoch(result.log, log_stream, em);
        if (cfg.target_metric > 0 && em.map50 && *em.map50 >= cfg.target_metric) break;
    }
    return result;
}

HenaCrops make_hena_crops(const Dataset& train, const Dataset& val, int crop_size,
                          size_t max_train, size_t max_val) {
    HenaCrops out;
    auto collect = [&](const Dataset& d, std::vector<MaskPair>& dst, size_t cap) {
        for (const SynthScene& s : d.scenes) {
            for (size_t i = 0; i < s.boxes.size(); ++i) {
                if (dst.size() >= cap) return;
                MaskPair mp = crop_and_resize(s.image, s.carseg, s.ad, s.boxes[i], crop_size, 0.1f);
                mp.stage = s.stages[i];
                dst.push_back(std::move(mp));
            }
        }
    };
    collect(train, out.train, max_train);
    collect(val, out.val, max_val);
    return out;
}

namespace {

Tensor mask_to_tensor(const GrayImage& m) {
    std::vector<float> data(m.pixels.size());
    for (size_t i = 0; i < data.size(); ++i) data[i] = m.pixels[i] ? 1.0f : 0.0f;
    return Tensor::from_data({1, m.height, m.width}, std::move(data));
}

// Pixel index lists split by ground-truth class, fixed per crop.
struct MaskIdx {
    std::vector<int> pos, neg;
};

MaskIdx mask_index(const GrayImage& m) {
    MaskIdx idx;
    for (size_t i = 0; i < m.pixels.size(); ++i)
        (m.pixels[i] ? idx.pos : idx.neg).push_back(static_cast<int>(i));
    return idx;
}

// Dice plus class-balanced BCE. The BCE term keeps gradients alive when the
// sigmoid saturates (where Dice alone stalls in an all-positive collapse) and
// balancing the two class means stops the ~97% background from drowning the
// few positive pixels.
Tensor seg_loss(const Tensor& logits, const Tensor& gt, const MaskIdx& idx) {
    Tensor loss = dice_loss(sigmoid(logits), gt);
    Tensor rows = reshape(logits, {static_cast<int>(logits.size()), 1});
    if (!idx.pos.empty()) {
        const int np = static_cast<int>(idx.pos.size());
        loss = add(loss, mul_scalar(bce_with_logits_sum(gather_rows(rows, idx.pos),
                                                        Tensor::full({np, 1}, 1.0f)),
                                    1.0f / static_cast<float>(np)));
    }
    if (!idx.neg.empty()) {
        const int nn = static_cast<int>(idx.neg.size());
        loss = add(loss, mul_scalar(bce_with_logits_sum(gather_rows(rows, idx.neg),
                                                        Tensor::zeros({nn, 1})),
                                    1.0f / static_cast<float>(nn)));
    }
    return loss;
}

// Micro-averaged Dice over logit maps at threshold 0 (probability 0.5).
struct DiceAccum {
    int64_t inter = 0, np = 0, ng = 0;
    void add(const Tensor& logits, const GrayImage& gt) {
        std::span<const float> d = logits.data();
        for (size_t i = 0; i < d.size(); ++i) {
            const bool p = d[i] > 0.0f, g = gt.pixels[i] != 0;
            inter += p && g;
            np += p;
            ng += g;
        }
    }
    double dice() const {
        if (np + ng == 0) return 1.0;
        return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    }
};

}  // namespace

HenaTrainResult train_hena_sequential(MiniHENA& model, const HenaCrops& crops,
                                      const TrainConfig& cfg1, const TrainConfig& cfg2,
                                      const TrainConfig& cfg3, std::ostream* log_stream) {
    if (crops.train.empty() || crops.val.empty())
        throw InputError("train_hena_sequential: empty crop set");
    HenaTrainResult result;
    const int n = static_cast<int>(crops.train.size());
    std::vector<Tensor> train_x, val_x;
    for (const MaskPair& mp : crops.train) train_x.push_back(image_to_tensor(mp.crop));
    for (const MaskPair& mp : crops.val) val_x.push_back(image_to_tensor(mp.crop));
    std::vector<Tensor> train_car, train_ad, train_rec8, train_les8;
    std::vector<MaskIdx> car_idx, ad_idx;
    for (const MaskPair& mp : crops.train) {
        train_car.push_back(mask_to_tensor(mp.carseg_mask));
        train_ad.push_back(mask_to_tensor(mp.ad_mask));
        car_idx.push_back(mask_index(mp.carseg_mask));
        ad_idx.push_back(mask_index(mp.ad_mask));
        // 8x8 block means of the crop, target of the bottleneck reconstruction
        const int cs = mp.crop.width, block = cs / 8;
        std::vector<float> rec(64, 0.0f);
        for (int y = 0; y < cs; ++y)
            for (int x = 0; x < cs; ++x)
                rec[static_cast<size_t>(y / block) * 8 + x / block] +=
                    mp.crop.at(x, y) / (255.0f * block * block);
        train_rec8.push_back(Tensor::from_data({1, 8, 8}, std::move(rec)));
        // 8x8 block fractions of the two lesion masks
        std::vector<float> les(128, 0.0f);
        for (int y = 0; y < cs; ++y)
            for (int x = 0; x < cs; ++x) {
                const size_t b = static_cast<size_t>(y / block) * 8 + x / block;
                const float inv = 1.0f / static_cast<float>(block * block);
                if (mp.carseg_mask.at(x, y)) les[b] += inv;
                if (mp.ad_mask.at(x, y)) les[64 + b] += inv;
            }
        train_les8.push_back(Tensor::from_data({2, 8, 8}, std::move(les)));
    }

    auto run_stage = [&](const TrainConfig& cfg, int stage,
                         const std::function<Tensor(size_t)>& loss_fn,
                         const std::function<void(EpochMetrics&)>& eval_fn,
                         const std::function<double(const EpochMetrics&)>& tracked,
                         std::vector<EpochMetrics>& log) {
        AdamW opt(model.params, cfg.weight_decay);
        Rng rng(cfg.seed + static_cast<uint64_t>(stage));
        std::vector<size_t> order(static_cast<size_t>(n));
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
        const int total_steps = cfg.epochs * steps_per_epoch;
        int step = 0;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            shuffle_indices(order, rng);
            double epoch_loss = 0.0;
            double last_lr = 0.0;
            for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
                const int bn = std::min(cfg.batch_size, n - b0);
                for (int bi = 0; bi < bn; ++bi) {
                    Tensor loss = loss_fn(order[static_cast<size_t>(b0 + bi)]);
                    epoch_loss += loss.item();
                    backward(mul_scalar(loss, 1.0f / static_cast<float>(bn)));
                }
                last_lr = lr_at(cfg, step, total_steps);
                opt.step(last_lr);
                ++step;
            }
            EpochMetrics em;
            em.epoch = epoch;
            em.loss = epoch_loss / n;
            em.lr = last_lr;
            eval_fn(em);
            log_epoch(log, log_stream, em);
            if (cfg.target_metric > 0 && tracked(em) >= cfg.target_metric) break;
        }
    };

    // ---- stage 1: full network on CarSeg ----
    model.params.set_all_frozen(false);
    run_stage(
        cfg1, 1,
        [&](size_t i) {
            HenaOutput out = hena_forward(model, train_x[i]);
            Tensor loss = seg_loss(out.carseg_logits, train_car[i], car_idx[i]);
            // auxiliary reconstructions keep the shared features generic
            // enough for the frozen-backbone probes of stages 2 and 3
            Tensor d1 = sub(hena_recon_trunk(model, out.trunk), train_x[i]);
            Tensor d2 = sub(hena_recon_bot(model, out.bot), train_rec8[i]);
            Tensor d3 = sub(hena_recon_les(model, out.bot), train_les8[i]);
            loss = add(loss, mul_scalar(mean(mul(d1, d1)), 5.0f));
            loss = add(loss, mul_scalar(mean(mul(d2, d2)), 5.0f));
            return add(loss, mul_scalar(mean(mul(d3, d3)), 5.0f));
        },
        [&](EpochMetrics& em) {
            DiceAccum acc;
            for (size_t i = 0; i < val_x.size(); ++i)
                acc.add(hena_forward(model, val_x[i]).carseg_logits, crops.val[i].carseg_mask);
            em.dice_carseg = acc.dice();
        },
        [](const EpochMetrics& em) { return em.dice_carseg.value_or(0.0); }, result.log1);
    result.backbone_hash_after_stage1 = model.params.hash("backbone");

    // ---- stage 2: freeze all but the AD head; cache the shared trunk ----
    model.params.set_all_frozen(true);
    model.params.set_frozen_prefix("ad", false);
    std::vector<Tensor> train_trunk, val_trunk;
    for (const Tensor& x : train_x) train_trunk.push_back(hena_forward(model, x).trunk);
    for (const Tensor& x : val_x) val_trunk.push_back(hena_forward(model, x).trunk);
    run_stage(
        cfg2, 2,
        [&](size_t i) {
            Tensor logits = hena_ad_from_trunk(model, train_trunk[i]);
            return seg_loss(logits, train_ad[i], ad_idx[i]);
        },
        [&](EpochMetrics& em) {
            DiceAccum acc;
            for (size_t i = 0; i < val_trunk.size(); ++i)
                acc.add(hena_ad_from_trunk(model, val_trunk[i]), crops.val[i].ad_mask);
            em.dice_ad = acc.dice();
        },
        [](const EpochMetrics& em) { return em.dice_ad.value_or(0.0); }, result.log2);
    result.backbone_hash_after_stage2 = model.params.hash("backbone");

    // ---- stage 3: freeze all but the DDS head; cache the bottleneck GAP ----
    model.params.set_all_frozen(true);
    model.params.set_frozen_prefix("dds", false);
    result.stage3_trainable_count = model.params.trainable_scalar_count();
    std::vector<Tensor> train_gap, val_gap;
    for (const Tensor& x : train_x) train_gap.push_back(hena_forward(model, x).bot_gap);
    for (const Tensor& x : val_x) val_gap.push_back(hena_forward(model, x).bot_gap);
    run_stage(
        cfg3, 3,
        [&](size_t i) {
            Tensor logits = hena_dds_from_gap(model, train_gap[i]);
            return hena_loss(Tensor(), Tensor(), Tensor(), Tensor(), logits,
                             *crops.train[i].stage, HenaTerms{false, false, true});
        },
        [&](EpochMetrics& em) {
            std::vector<StageLabel> preds, gts;
            for (size_t i = 0; i < val_gap.size(); ++i) {
                preds.push_back(stage_decode(hena_dds_from_gap(model, val_gap[i])));
                gts.push_back(*crops.val[i].stage);
            }
            DdsResult dr = eval_dds(preds, gts);
            em.acc_dds = dr.acc_pct / 100.0;
            em.f1_dds = dr.f1_pct / 100.0;
        },
        [](const EpochMetrics& em) { return em.acc_dds.value_or(0.0); }, result.log3);
    result.backbone_hash_after_stage3 = model.params.hash("backbone");

    // leave the model fully trainable for any subsequent fine-tuning
    model.params.set_all_frozen(false);
    return result;
}

}  // namespace mathena
