#include "mathena/labelpipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mathena {

// ---------------- PGM ----------------

void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("write_pgm: cannot open " + path);
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
}

GrayImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("read_pgm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw InputError("read_pgm: not a binary PGM: " + path);
    int w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw InputError("read_pgm: bad header in " + path);
    is.get();  // single whitespace after header
    GrayImage img = GrayImage::blank(w, h);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw InputError("read_pgm: truncated payload in " + path);
    return img;
}

// ---------------- chi^2 gate ----------------

double chi2_critical_value_dof4(double p, double step) {
    // chi^2_4 density: x * exp(-x/2) / 4. Composite Simpson, accumulated
    // until the CDF reaches 1-p.
    const double target = 1.0 - p;
    auto f = [](double x) { return x * std::exp(-0.5 * x) / 4.0; };
    double cdf = 0.0;
    double x = 0.0;
    while (x < 1000.0) {
        const double seg = step * (f(x) + 4.0 * f(x + step / 2) + f(x + step)) / 6.0;
        if (cdf + seg >= target) {
            // linear refinement inside the final step
            const double frac = (target - cdf) / seg;
            return x + frac * step;
        }
        cdf += seg;
        x += step;
    }
    throw NumericsError("chi2_critical_value_dof4: integration did not converge");
}

ChiSquareGate ChiSquareGate::make(double p) {
    ChiSquareGate g;
    g.p_threshold = p;
    g.critical_value = chi2_critical_value_dof4(p);
    return g;
}

bool chi2_gate_keep(double d2, const ChiSquareGate& gate) {
    if (d2 < 0) throw InputError("chi2_gate: negative squared distance");
    return !(d2 > gate.critical_value);  // reject on strict exceedance
}

// ---------------- box features / stats ----------------

std::array<double, 4> box_features(const BBox& b, double img_w, double img_h) {
    if (b.w <= 0 || b.h <= 0) throw InputError("box_features: degenerate box");
    return {b.cx / img_w, b.cy / img_h, std::log(b.w / img_w), std::log(b.h / img_h)};
}

BoxStats fit_box_stats(const std::vector<BBox>& boxes, double img_w, double img_h, double reg) {
    if (boxes.size() < 5) throw ConfigError("fit_box_stats: need at least 5 boxes");
    std::vector<std::array<double, 4>> vs;
    vs.reserve(boxes.size());
    for (const BBox& b : boxes) vs.push_back(box_features(b, img_w, img_h));
    BoxStats s;
    for (const auto& v : vs)
        for (int i = 0; i < 4; ++i) s.mean[static_cast<size_t>(i)] += v[static_cast<size_t>(i)];
    for (double& m : s.mean) m /= static_cast<double>(vs.size());
    for (const auto& v : vs)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                s.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
                    (v[static_cast<size_t>(i)] - s.mean[static_cast<size_t>(i)]) *
                    (v[static_cast<size_t>(j)] - s.mean[static_cast<size_t>(j)]);
    const double bessel = static_cast<double>(vs.size()) - 1.0;
    for (auto& row : s.cov)
        for (double& c : row) c /= bessel;
    for (int i = 0; i < 4; ++i) s.cov[static_cast<size_t>(i)][static_cast<size_t>(i)] += reg;
    return s;
}

double mahalanobis_sq(const std::array<double, 4>& v, const BoxStats& stats) {
    // Cholesky cov = L L^T, then two triangular solves
    std::array<std::array<double, 4>, 4> l{};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = stats.cov[static_cast<size_t>(i)][static_cast<size_t>(j)];
            for (int k = 0; k < j; ++k)
                sum -= l[static_cast<size_t>(i)][static_cast<size_t>(k)] *
                       l[static_cast<size_t>(j)][static_cast<size_t>(k)];
            if (i == j) {
                if (sum <= 0) throw NumericsError("mahalanobis_sq: covariance not positive definite");
                l[static_cast<size_t>(i)][static_cast<size_t>(j)] = std::sqrt(sum);
            } else {
                l[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                    sum / l[static_cast<size_t>(j)][static_cast<size_t>(j)];
            }
        }
    }
    std::array<double, 4> d{}, y{};
    for (int i = 0; i < 4; ++i)
        d[static_cast<size_t>(i)] = v[static_cast<size_t>(i)] - stats.mean[static_cast<size_t>(i)];
    for (int i = 0; i < 4; ++i) {
        double sum = d[static_cast<size_t>(i)];
        for (int k = 0; k < i; ++k)
            sum -= l[static_cast<size_t>(i)][static_cast<size_t>(k)] * y[static_cast<size_t>(k)];
        y[static_cast<size_t>(i)] = sum / l[static_cast<size_t>(i)][static_cast<size_t>(i)];
    }
    double d2 = 0.0;
    for (double yi : y) d2 += yi * yi;
    return d2;
}

// ---------------- NMS / filtering ----------------

std::vector<BBox> nms(const std::vector<BBox>& boxes, float iou_threshold) {
    if (iou_threshold <= 0.0f || iou_threshold > 1.0f)
        throw InputError("nms: threshold must be in (0,1]");
    std::vector<size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (boxes[a].conf != boxes[b].conf) return boxes[a].conf > boxes[b].conf;
        return a < b;
    });
    std::vector<BBox> kept;
    for (size_t idx : order) {
        bool suppressed = false;
        for (const BBox& k : kept) {
            if (iou(boxes[idx], k) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(boxes[idx]);
    }
    return kept;
}

std::vector<BBox> filter_pseudo_labels(const std::vector<BBox>& candidates, float conf_threshold,
                                       float iou_threshold, const BoxStats& stats,
                                       const ChiSquareGate& gate, double img_w, double img_h,
                                       FilterCounts* counts) {
    std::vector<BBox> confident;
    for (const BBox& b : candidates)
        if (b.conf >= conf_threshold) confident.push_back(b);
    const int removed_conf = static_cast<int>(candidates.size() - confident.size());

    std::vector<BBox> after_nms = confident.empty() ? confident : nms(confident, iou_threshold);
    const int removed_nms = static_cast<int>(confident.size() - after_nms.size());

    std::vector<BBox> kept;
    for (const BBox& b : after_nms) {
        const double d2 = mahalanobis_sq(box_features(b, img_w, img_h), stats);
        if (chi2_gate_keep(d2, gate)) kept.push_back(b);
    }
    if (counts) {
        counts->removed_conf = removed_conf;
        counts->removed_nms = removed_nms;
        counts->removed_chi2 = static_cast<int>(after_nms.size() - kept.size());
    }
    return kept;
}

GrayImage merge_binary_mask(const GrayImage& multiclass) {
    GrayImage out = multiclass;
    for (uint8_t& p : out.pixels) p = p != 0 ? 1 : 0;
    return out;
}

// ---------------- crop / augment / realign ----------------

namespace {

uint8_t bilinear_sample(const GrayImage& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0, fy = y - y0;
    const double v = (1 - fx) * (1 - fy) * img.at(x0, y0) + fx * (1 - fy) * img.at(x1, y0) +
                     (1 - fx) * fy * img.at(x0, y1) + fx * fy * img.at(x1, y1);
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

uint8_t nearest_sample(const GrayImage& img, double x, double y) {
    const int xi = std::clamp(static_cast<int>(std::lround(x)), 0, img.width - 1);
    const int yi = std::clamp(static_cast<int>(std::lround(y)), 0, img.height - 1);
    return img.at(xi, yi);
}

GrayImage resize(const GrayImage& src, int out_w, int out_h, bool bilinear) {
    GrayImage out = GrayImage::blank(out_w, out_h);
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            const double sx = (ox + 0.5) * src.width / out_w - 0.5;
            const double sy = (oy + 0.5) * src.height / out_h - 0.5;
            out.at(ox, oy) = bilinear ? bilinear_sample(src, sx, sy) : nearest_sample(src, sx, sy);
        }
    }
    return out;
}

GrayImage crop_rect(const GrayImage& src, int x, int y, int w, int h) {
    GrayImage out = GrayImage::blank(w, h);
    for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) out.at(ox, oy) = src.at(x + ox, y + oy);
    return out;
}

}  // namespace

MaskPair crop_and_resize(const GrayImage& image, const GrayImage& carseg, const GrayImage& ad,
                         const BBox& box_px, int out_size, float context_margin) {
    const double mw = box_px.w * context_margin;
    const double mh = box_px.h * context_margin;
    int x0 = static_cast<int>(std::floor(box_px.x1() - mw));
    int y0 = static_cast<int>(std::floor(box_px.y1() - mh));
    int x1 = static_cast<int>(std::ceil(box_px.x2() + mw));
    int y1 = static_cast<int>(std::ceil(box_px.y2() + mh));
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, image.width);
    y1 = std::min(y1, image.height);
    if (x1 - x0 <= 0 || y1 - y0 <= 0) throw InputError("crop_and_resize: box does not intersect image");

    MaskPair pair;
    pair.mapping = CropMapping{x0, y0, x1 - x0, y1 - y0, image.width, image.height};
    pair.crop = resize(crop_rect(image, x0, y0, x1 - x0, y1 - y0), out_size, out_size, true);
    pair.carseg_mask = resize(crop_rect(carseg, x0, y0, x1 - x0, y1 - y0), out_size, out_size, false);
    pair.ad_mask = resize(crop_rect(ad, x0, y0, x1 - x0, y1 - y0), out_size, out_size, false);
    return pair;
}

MaskPair augment(const MaskPair& pair, uint64_t seed) {
    Rng rng(seed);
    const double angle_deg = rng.uniform(-15.0, 15.0);
    const bool flip = rng.bernoulli(0.5);
    return augment_with(pair, angle_deg, flip);
}

MaskPair augment_with(const MaskPair& pair, double angle_deg, bool flip) {
    const double angle = angle_deg * M_PI / 180.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double cx = (pair.crop.width - 1) / 2.0;
    const double cy = (pair.crop.height - 1) / 2.0;

    auto transform = [&](const GrayImage& src, bool bilinear) {
        GrayImage out = GrayImage::blank(src.width, src.height);
        for (int oy = 0; oy < src.height; ++oy) {
            for (int ox = 0; ox < src.width; ++ox) {
                double tx = ox - cx, ty = oy - cy;
                if (flip) tx = -tx;
                // inverse rotation
                const double sx = ca * tx + sa * ty + cx;
                const double sy = -sa * tx + ca * ty + cy;
                if (sx < -0.5 || sy < -0.5 || sx > src.width - 0.5 || sy > src.height - 0.5)
                    continue;  // outside -> 0
                out.at(ox, oy) = bilinear ? bilinear_sample(src, sx, sy) : nearest_sample(src, sx, sy);
            }
        }
        return out;
    };

    MaskPair out = pair;
    out.crop = transform(pair.crop, true);
    out.carseg_mask = transform(pair.carseg_mask, false);
    out.ad_mask = transform(pair.ad_mask, false);
    return out;
}

GrayImage spatial_realign(const GrayImage& mask, const CropMapping& mapping) {
    if (mapping.src_w <= 0 || mapping.src_h <= 0 || mapping.opg_w <= 0 || mapping.opg_h <= 0)
        throw ShapeError("spatial_realign: invalid mapping");
    if (mapping.src_x + mapping.src_w > mapping.opg_w ||
        mapping.src_y + mapping.src_h > mapping.opg_h)
        throw ShapeError("spatial_realign: mapping exceeds image bounds");
    GrayImage out = GrayImage::blank(mapping.opg_w, mapping.opg_h);
    GrayImage back = resize(mask, mapping.src_w, mapping.src_h, false);
    for (int y = 0; y < mapping.src_h; ++y)
        for (int x = 0; x < mapping.src_w; ++x)
            out.at(mapping.src_x + x, mapping.src_y + y) = back.at(x, y);
    return out;
}

// ---------------- JSONL ----------------

std::vector<NamedBox> read_boxes_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("read_boxes_jsonl: cannot open " + path);
    std::vector<NamedBox> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        NamedBox nb;
        nb.image_id = j.at("image_id").get<std::string>();
        nb.box.cx = j.at("cx").get<float>();
        nb.box.cy = j.at("cy").get<float>();
        nb.box.w = j.at("w").get<float>();
        nb.box.h = j.at("h").get<float>();
        nb.box.conf = j.value("conf", 1.0f);
        out.push_back(std::move(nb));
    }
    return out;
}

void write_boxes_jsonl(const std::string& path, const std::vector<NamedBox>& boxes) {
    std::ofstream os(path);
    if (!os) throw InputError("write_boxes_jsonl: cannot open " + path);
    for (const NamedBox& nb : boxes) {
        nlohmann::json j{{"image_id", nb.image_id}, {"cx", nb.box.cx}, {"cy", nb.box.cy},
                         {"w", nb.box.w},           {"h", nb.box.h},   {"conf", nb.box.conf}};
        os << j.dump() << "\n";
    }
}

}  // namespace mathena
