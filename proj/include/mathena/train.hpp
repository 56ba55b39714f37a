#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mathena/evalmetrics.hpp"
#include "mathena/models.hpp"

namespace mathena {

struct TrainConfig {
    double lr = 1e-4;            // peak rate
    double weight_decay = 5e-2;  // decoupled
    int epochs = 30;
    int batch_size = 16;
    int warmup_steps = 50;  // linear warmup, then cosine annealing to 0
    uint64_t seed = 42;
    // early stop once the tracked validation metric reaches this (<= 0: off)
    double target_metric = -1.0;
};

// Piecewise schedule: linear ramp to cfg.lr over warmup_steps, cosine decay
// to 0 at total_steps. Continuous, peaks at warmup end.
double lr_at(const TrainConfig& cfg, int step, int total_steps);

// Decoupled-weight-decay Adam over the trainable (non-frozen) store entries.
class AdamW {
public:
    AdamW(ParamStore& store, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8);
    // Applies accumulated gradients at the given rate, then zeroes them.
    // Throws NumericsError on non-finite gradients.
    void step(double lr);
    void zero_grad();

private:
    ParamStore* store_;
    double wd_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    std::optional<double> map50, map5095, dice_carseg, dice_ad, acc_dds, f1_dds;
    double lr = 0.0;
};

std::string metrics_json(const EpochMetrics& m);  // one JSON object, no newline

struct DetectTrainResult {
    std::vector<EpochMetrics> log;
};

DetectTrainResult train_detector(MiniMATHE& model, const Dataset& train, const Dataset& val,
                                 const TrainConfig& cfg, std::ostream* log_stream = nullptr);

// Per-tooth crops with their masks and stage labels.
struct HenaCrops {
    std::vector<MaskPair> train, val;
};

HenaCrops make_hena_crops(const Dataset& train, const Dataset& val, int crop_size = 64,
                          size_t max_train = 512, size_t max_val = 128);

struct HenaTrainResult {
    std::vector<EpochMetrics> log1, log2, log3;
    std::string backbone_hash_after_stage1;
    std::string backbone_hash_after_stage2;
    std::string backbone_hash_after_stage3;
    int64_t stage3_trainable_count = 0;
};

// Stage 1: full network on CarSeg. Stage 2: freeze everything but the AD
// head. Stage 3: freeze everything but the DDS linear head. The shared
// trunk / GAP features are cached while frozen.
HenaTrainResult train_hena_sequential(MiniHENA& model, const HenaCrops& crops,
                                      const TrainConfig& cfg1, const TrainConfig& cfg2,
                                      const TrainConfig& cfg3,
                                      std::ostream* log_stream = nullptr);

}  // namespace mathena
