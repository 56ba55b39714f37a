#pragma once

#include <string>
#include <vector>

#include "mathena/labelpipe.hpp"
#include "mathena/losses.hpp"

namespace mathena {

// One synthetic panoramic scene: an arch of bright rounded-rectangle "teeth"
// on textured noise. A subset of teeth carries dark elliptical blobs (caries)
// and bright wedges (anomalies). Tooth heights vary; the development stage is
// the quantile bucket of the height, and the tooth fill brightness encodes it.
struct SynthScene {
    GrayImage image;
    GrayImage carseg;               // binary caries mask
    GrayImage ad;                   // binary anomaly mask
    std::vector<BBox> boxes;        // pixel center-form, conf = 1
    std::vector<StageLabel> stages; // one per tooth, aligned with boxes
};

SynthScene synth_opg(uint64_t seed, int width, int height, int n_teeth);

// Dataset directory layout: images/*.pgm, masks_carseg/*.pgm, masks_ad/*.pgm,
// boxes.jsonl, stages.csv (image_id,tooth_id,stage_letter).
void write_dataset(const std::string& dir, uint64_t seed, int count, int width, int height,
                   int n_teeth);

struct Dataset {
    std::vector<SynthScene> scenes;
    std::vector<std::string> ids;
};

Dataset load_dataset(const std::string& dir);

// In-memory generation used by the trainers (same streams as write_dataset).
Dataset make_dataset(uint64_t seed, int count, int width, int height, int n_teeth);

}  // namespace mathena
