#include "mathena/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "mathena/rng.hpp"

namespace fs = std::filesystem;

namespace mathena {

namespace {

constexpr double kPi = 3.14159265358979323846;

uint64_t scene_seed(uint64_t base, int index) {
    return base * 1000003ull + static_cast<uint64_t>(index);
}

std::string scene_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img_%04d", index);
    return buf;
}

bool in_rounded_rect(double dx, double dy, double hw, double hh, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    if (ax > hw || ay > hh) return false;
    if (ax <= hw - r || ay <= hh - r) return true;
    const double cx = ax - (hw - r), cy = ay - (hh - r);
    return cx * cx + cy * cy <= r * r;
}

}  // namespace

SynthScene synth_opg(uint64_t seed, int width, int height, int n_teeth) {
    if (n_teeth < 1) throw ConfigError("synth_opg: need at least one tooth");
    const double spacing = static_cast<double>(width) / (n_teeth + 1);
    const int tw = std::max(4, static_cast<int>(std::floor(std::min(spacing * 0.75, width / 9.0))));
    const double h_min = height / 3.0, h_max = height * 2.0 / 3.0;
    if (tw + 2 > spacing || h_max + 4 > height || tw < 4)
        throw ConfigError("synth_opg: teeth overflow image");

    Rng rng(seed);
    SynthScene s;
    s.image = GrayImage::blank(width, height);
    s.carseg = GrayImage::blank(width, height);
    s.ad = GrayImage::blank(width, height);
    // intensity design: background <= 32; tooth base 70 + 18*stage so the
    // staging head can read the stage from brightness; lesions sit at fixed
    // absolute levels outside the tooth range (caries ~45 between background
    // and the dimmest tooth, anomaly wedge ~245 well above the brightest
    // tooth), so both are separable by intensity alone with wide margins.
    // Lesion area still biases the per-tooth mean brightness; the staging
    // head has to correct for that using lesion-area features
    for (uint8_t& p : s.image.pixels) p = static_cast<uint8_t>(rng.uniform(10.0, 32.0));

    for (int i = 0; i < n_teeth; ++i) {
        const double t = n_teeth > 1 ? static_cast<double>(i) / (n_teeth - 1) : 0.5;
        const double xc = spacing * (i + 1);
        const double th = rng.uniform(h_min, h_max);
        // gentle arch: centers dip in the middle, clamped so the tooth fits
        double yc = height * 0.5 + height * 0.08 * std::sin(kPi * t);
        yc = std::clamp(yc, th / 2 + 2.0, height - th / 2 - 2.0);

        const int stage =
            std::clamp(static_cast<int>(std::floor((th - h_min) / (h_max - h_min) * 8.0)), 0, 7);
        BBox box;
        box.cx = static_cast<float>(xc);
        box.cy = static_cast<float>(yc);
        box.w = static_cast<float>(tw);
        box.h = static_cast<float>(th);
        box.conf = 1.0f;
        s.boxes.push_back(box);
        s.stages.push_back(StageLabel::from_index(stage));

        const double hw = tw / 2.0, hh = th / 2.0, r = tw / 4.0;
        const double base = 70.0 + 18.0 * stage;  // brightness encodes the stage
        const int x0 = static_cast<int>(std::floor(xc - hw)), x1 = static_cast<int>(std::ceil(xc + hw));
        const int y0 = static_cast<int>(std::floor(yc - hh)), y1 = static_cast<int>(std::ceil(yc + hh));

        const bool has_caries = rng.bernoulli(0.5);
        const bool has_anomaly = rng.bernoulli(0.35);
        const double bx = rng.uniform(-hw * 0.3, hw * 0.3);          // caries blob center
        const double by = rng.uniform(-hh * 0.35, hh * 0.35);
        const double ba = hw * rng.uniform(0.32, 0.48);              // blob semi-axes
        const double bb = hh * rng.uniform(0.16, 0.26);
        const double wedge_h = hh * rng.uniform(0.25, 0.4);          // anomaly wedge depth

        for (int y = std::max(y0, 0); y <= std::min(y1, height - 1); ++y) {
            for (int x = std::max(x0, 0); x <= std::min(x1, width - 1); ++x) {
                const double dx = x + 0.5 - xc, dy = y + 0.5 - yc;
                if (!in_rounded_rect(dx, dy, hw, hh, r)) continue;
                double v = base + rng.uniform(-5.0, 5.0);
                if (has_caries) {
                    const double ex = dx - bx, ey = dy - by;
                    if ((ex * ex) / (ba * ba) + (ey * ey) / (bb * bb) <= 1.0) {
                        v = 45.0 + rng.uniform(-4.0, 4.0);
                        s.carseg.at(x, y) = 1;
                    }
                }
                if (has_anomaly && s.carseg.at(x, y) == 0) {
                    // bright wedge hanging from the top edge of the tooth
                    const double depth = dy + hh;  // 0 at the top edge
                    if (depth >= 0 && depth <= wedge_h &&
                        std::abs(dx) <= hw * (1.0 - depth / wedge_h)) {
                        v = 245.0 + rng.uniform(-4.0, 4.0);
                        s.ad.at(x, y) = 1;
                    }
                }
                s.image.at(x, y) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        }
    }
    return s;
}

Dataset make_dataset(uint64_t seed, int count, int width, int height, int n_teeth) {
    Dataset d;
    for (int i = 0; i < count; ++i) {
        d.scenes.push_back(synth_opg(scene_seed(seed, i), width, height, n_teeth));
        d.ids.push_back(scene_id(i));
    }
    return d;
}

void write_dataset(const std::string& dir, uint64_t seed, int count, int width, int height,
                   int n_teeth) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks_carseg");
    fs::create_directories(fs::path(dir) / "masks_ad");
    std::vector<NamedBox> all_boxes;
    std::ofstream stages((fs::path(dir) / "stages.csv").string());
    if (!stages) throw InputError("write_dataset: cannot write to " + dir);
    stages << "image_id,tooth_id,stage_letter\n";
    for (int i = 0; i < count; ++i) {
        SynthScene s = synth_opg(scene_seed(seed, i), width, height, n_teeth);
        const std::string id = scene_id(i);
        write_pgm((fs::path(dir) / "images" / (id + ".pgm")).string(), s.image);
        write_pgm((fs::path(dir) / "masks_carseg" / (id + ".pgm")).string(), s.carseg);
        write_pgm((fs::path(dir) / "masks_ad" / (id + ".pgm")).string(), s.ad);
        for (size_t t = 0; t < s.boxes.size(); ++t) {
            all_boxes.push_back(NamedBox{id, s.boxes[t]});
            stages << id << "," << t << "," << s.stages[t].letter() << "\n";
        }
    }
    write_boxes_jsonl((fs::path(dir) / "boxes.jsonl").string(), all_boxes);
}

Dataset load_dataset(const std::string& dir) {
    Dataset d;
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / "images"))
        if (e.path().extension() == ".pgm") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw InputError("load_dataset: no images in " + dir);

    std::map<std::string, std::vector<BBox>> boxes;
    for (const NamedBox& nb : read_boxes_jsonl((fs::path(dir) / "boxes.jsonl").string()))
        boxes[nb.image_id].push_back(nb.box);

    std::map<std::string, std::vector<StageLabel>> stages;
    std::ifstream sf((fs::path(dir) / "stages.csv").string());
    if (!sf) throw InputError("load_dataset: missing stages.csv in " + dir);
    std::string line;
    std::getline(sf, line);  // header
    while (std::getline(sf, line)) {
        if (line.empty()) continue;
        const size_t c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 <= c1 + 1 || c2 + 1 >= line.size())
            throw InputError("load_dataset: malformed stages.csv line: " + line);
        stages[line.substr(0, c1)].push_back(StageLabel::from_letter(line[c2 + 1]));
    }

    for (const std::string& id : ids) {
        SynthScene s;
        s.image = read_pgm((fs::path(dir) / "images" / (id + ".pgm")).string());
        s.carseg = read_pgm((fs::path(dir) / "masks_carseg" / (id + ".pgm")).string());
        s.ad = read_pgm((fs::path(dir) / "masks_ad" / (id + ".pgm")).string());
        s.boxes = boxes[id];
        s.stages = stages[id];
        d.scenes.push_back(std::move(s));
        d.ids.push_back(id);
    }
    return d;
}

}  // namespace mathena
