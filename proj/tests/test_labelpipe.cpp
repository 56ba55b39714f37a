#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mathena/labelpipe.hpp"

using namespace mathena;

namespace {

BBox make_box(float cx, float cy, float w, float h, float conf = 1.0f) {
    BBox b;
    b.cx = cx;
    b.cy = cy;
    b.w = w;
    b.h = h;
    b.conf = conf;
    return b;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

bool same_box(const BBox& a, const BBox& b) {
    return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h && a.conf == b.conf;
}

}  // namespace

TEST_CASE("pgm round trip") {
    Rng rng(1);
    GrayImage img = GrayImage::blank(13, 7);
    for (uint8_t& p : img.pixels) p = static_cast<uint8_t>(rng.uniform(0.0, 255.999));
    const std::string path = temp_path("mathena_test.pgm");
    write_pgm(path, img);
    GrayImage back = read_pgm(path);
    CHECK(back.width == 13);
    CHECK(back.height == 7);
    CHECK(back.pixels == img.pixels);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_pgm(temp_path("does_not_exist.pgm")), InputError);
}

TEST_CASE("chi-square critical value and gate") {
    const double crit = chi2_critical_value_dof4(0.001);
    CHECK(crit >= 18.46);
    CHECK(crit <= 18.48);
    CHECK(crit == doctest::Approx(18.4668).epsilon(1e-4));

    ChiSquareGate gate = ChiSquareGate::make(0.001);
    CHECK(gate.critical_value == crit);
    CHECK(chi2_gate_keep(0.0, gate));
    CHECK(chi2_gate_keep(gate.critical_value, gate));  // strict exceedance rejects
    CHECK_FALSE(chi2_gate_keep(25.0, gate));
    CHECK_THROWS_AS(chi2_gate_keep(-1.0, gate), InputError);

    // sanity at another quantile: chi^2_4 median ~ 3.3567
    CHECK(chi2_critical_value_dof4(0.5) == doctest::Approx(3.3567).epsilon(1e-3));
}

TEST_CASE("chi-square gate monte carlo rejection rate") {
    ChiSquareGate gate = ChiSquareGate::make(0.001);
    Rng rng(42);
    const int n = 100000;
    int rejected = 0;
    for (int i = 0; i < n; ++i) {
        double d2 = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double z = rng.normal();
            d2 += z * z;
        }
        if (!chi2_gate_keep(d2, gate)) ++rejected;
    }
    const double rate = static_cast<double>(rejected) / n;
    CHECK(rate >= 0.001 - 0.002);
    CHECK(rate <= 0.001 + 0.002);
}

TEST_CASE("box features") {
    auto v = box_features(make_box(512, 256, 1024, 512), 1024, 512);
    CHECK(v[0] == doctest::Approx(0.5));
    CHECK(v[1] == doctest::Approx(0.5));
    CHECK(v[2] == doctest::Approx(0.0));
    CHECK(v[3] == doctest::Approx(0.0));

    auto w_over_e = box_features(make_box(100, 100, static_cast<float>(1024.0 / M_E), 50), 1024, 512);
    CHECK(w_over_e[2] == doctest::Approx(-1.0).epsilon(1e-5));

    auto gen = box_features(make_box(80, 120, 40, 60), 400, 300);
    CHECK(gen[0] == doctest::Approx(80.0 / 400));
    CHECK(gen[1] == doctest::Approx(120.0 / 300));
    CHECK(gen[2] == doctest::Approx(std::log(40.0 / 400)));
    CHECK(gen[3] == doctest::Approx(std::log(60.0 / 300)));

    CHECK_THROWS_AS(box_features(make_box(10, 10, 0, 5), 100, 100), InputError);
}

TEST_CASE("fit box stats") {
    SUBCASE("minimum sample size enforced") {
        std::vector<BBox> four(4, make_box(50, 50, 20, 30));
        CHECK_THROWS_AS(fit_box_stats(four, 100, 100, 1e-6), ConfigError);
    }

    SUBCASE("identical boxes give cov = reg*I exactly") {
        std::vector<BBox> boxes(6, make_box(50, 50, 20, 30));
        BoxStats s = fit_box_stats(boxes, 100, 100, 1e-6);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                CHECK(s.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] ==
                      (i == j ? 1e-6 : 0.0));
    }

    SUBCASE("two clusters concentrate variance on one axis") {
        std::vector<BBox> boxes;
        for (int i = 0; i < 3; ++i) boxes.push_back(make_box(20, 50, 10, 10));
        for (int i = 0; i < 3; ++i) boxes.push_back(make_box(80, 50, 10, 10));
        BoxStats s = fit_box_stats(boxes, 100, 100, 0.0);
        CHECK(s.cov[0][0] > 0.05);
        for (int i = 1; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (i != 0 || j != 0) CHECK(std::abs(s.cov[static_cast<size_t>(i)][static_cast<size_t>(j)]) < 1e-12);
    }

    SUBCASE("random set matches direct-summation oracle") {
        Rng rng(2);
        std::vector<BBox> boxes;
        std::vector<std::array<double, 4>> feats;
        for (int i = 0; i < 40; ++i) {
            BBox b = make_box(static_cast<float>(rng.uniform(100, 900)),
                              static_cast<float>(rng.uniform(100, 400)),
                              static_cast<float>(rng.uniform(20, 80)),
                              static_cast<float>(rng.uniform(30, 90)));
            boxes.push_back(b);
            feats.push_back(box_features(b, 1024, 512));
        }
        BoxStats s = fit_box_stats(boxes, 1024, 512, 0.0);
        std::array<double, 4> mean{};
        for (const auto& f : feats)
            for (int i = 0; i < 4; ++i) mean[static_cast<size_t>(i)] += f[static_cast<size_t>(i)] / 40.0;
        for (int i = 0; i < 4; ++i)
            CHECK(s.mean[static_cast<size_t>(i)] == doctest::Approx(mean[static_cast<size_t>(i)]).epsilon(1e-12));
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) {
                double c = 0.0;
                for (const auto& f : feats)
                    c += (f[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)]) *
                         (f[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]);
                c /= 39.0;
                CHECK(std::abs(s.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] - c) < 1e-9);
            }
        }
    }
}

TEST_CASE("mahalanobis squared distance") {
    BoxStats s;
    s.mean = {0.5, 0.5, -1.0, -1.0};
    for (int i = 0; i < 4; ++i) s.cov[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;

    CHECK(mahalanobis_sq(s.mean, s) == doctest::Approx(0.0));
    CHECK(mahalanobis_sq({1.5, 1.5, 0.0, 0.0}, s) == doctest::Approx(4.0).epsilon(1e-10));

    s.cov[0][0] = 4.0;
    CHECK(mahalanobis_sq({2.5, 0.5, -1.0, -1.0}, s) == doctest::Approx(1.0).epsilon(1e-10));

    BoxStats bad;  // zero covariance is not positive definite
    CHECK_THROWS_AS(mahalanobis_sq({0, 0, 0, 0}, bad), NumericsError);
}

TEST_CASE("nms") {
    SUBCASE("basics") {
        std::vector<BBox> one = {make_box(0.5f, 0.5f, 0.2f, 0.2f, 0.7f)};
        CHECK(nms(one, 0.5f).size() == 1);

        std::vector<BBox> dup = {make_box(0.5f, 0.5f, 0.2f, 0.2f, 0.9f),
                                 make_box(0.5f, 0.5f, 0.2f, 0.2f, 0.8f)};
        auto kept = nms(dup, 0.5f);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0].conf == 0.9f);

        CHECK_THROWS_AS(nms(one, 0.0f), InputError);
        CHECK_THROWS_AS(nms(one, 1.5f), InputError);
    }

    SUBCASE("matches brute force on 1000 random 8-box scenes") {
        Rng rng(3);
        for (int scene = 0; scene < 1000; ++scene) {
            std::vector<BBox> boxes;
            for (int i = 0; i < 8; ++i)
                boxes.push_back(make_box(static_cast<float>(rng.uniform(0.2, 0.8)),
                                         static_cast<float>(rng.uniform(0.2, 0.8)),
                                         static_cast<float>(rng.uniform(0.05, 0.5)),
                                         static_cast<float>(rng.uniform(0.05, 0.5)),
                                         static_cast<float>(rng.uniform(0.0, 1.0))));
            const float thr = 0.45f;
            auto kept = nms(boxes, thr);

            // brute force: order by (conf desc, index asc); keep a box iff no
            // earlier-kept box suppresses it
            std::vector<size_t> order(8);
            for (size_t i = 0; i < 8; ++i) order[i] = i;
            std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                if (boxes[a].conf != boxes[b].conf) return boxes[a].conf > boxes[b].conf;
                return a < b;
            });
            std::vector<BBox> expect;
            for (size_t idx : order) {
                bool ok = true;
                for (const BBox& k : expect)
                    if (iou(boxes[idx], k) > thr) ok = false;
                if (ok) expect.push_back(boxes[idx]);
            }
            REQUIRE(kept.size() == expect.size());
            for (size_t i = 0; i < kept.size(); ++i) CHECK(same_box(kept[i], expect[i]));
        }
    }

    SUBCASE("output independent of input order") {
        Rng rng(4);
        std::vector<BBox> boxes;
        for (int i = 0; i < 8; ++i)
            boxes.push_back(make_box(static_cast<float>(rng.uniform(0.2, 0.8)),
                                     static_cast<float>(rng.uniform(0.2, 0.8)),
                                     static_cast<float>(rng.uniform(0.05, 0.4)),
                                     static_cast<float>(rng.uniform(0.05, 0.4)),
                                     static_cast<float>(0.1 + 0.1 * i)));  // distinct confs
        auto baseline = nms(boxes, 0.4f);
        std::vector<BBox> shuffled = boxes;
        for (int perm = 0; perm < 20; ++perm) {
            for (size_t i = shuffled.size(); i > 1; --i)
                std::swap(shuffled[i - 1],
                          shuffled[static_cast<size_t>(rng.uniform(0.0, static_cast<double>(i)))]);
            auto kept = nms(shuffled, 0.4f);
            REQUIRE(kept.size() == baseline.size());
            for (size_t i = 0; i < kept.size(); ++i) CHECK(same_box(kept[i], baseline[i]));
        }
    }
}

TEST_CASE("filter_pseudo_labels") {
    // trusted stats from tooth-sized ground-truth boxes
    Rng rng(5);
    std::vector<BBox> gt;
    for (int i = 0; i < 30; ++i)
        gt.push_back(make_box(static_cast<float>(rng.uniform(100, 900)),
                              static_cast<float>(rng.uniform(150, 350)),
                              static_cast<float>(rng.uniform(30, 50)),
                              static_cast<float>(rng.uniform(60, 90))));
    BoxStats stats = fit_box_stats(gt, 1024, 512, 1e-6);
    ChiSquareGate gate = ChiSquareGate::make(0.001);

    SUBCASE("empty input") {
        FilterCounts counts;
        auto out = filter_pseudo_labels({}, 0.25f, 0.5f, stats, gate, 1024, 512, &counts);
        CHECK(out.empty());
        CHECK(counts.removed_conf == 0);
        CHECK(counts.removed_nms == 0);
        CHECK(counts.removed_chi2 == 0);
    }

    SUBCASE("giant box removed at the chi-square stage") {
        BBox giant = make_box(512, 256, 1024, 512, 0.95f);
        const double d2 = mahalanobis_sq(box_features(giant, 1024, 512), stats);
        CHECK(d2 > gate.critical_value);

        std::vector<BBox> cands = {make_box(500, 250, 40, 75, 0.9f), giant,
                                   make_box(300, 250, 45, 70, 0.1f)};
        FilterCounts counts;
        auto out = filter_pseudo_labels(cands, 0.25f, 0.5f, stats, gate, 1024, 512, &counts);
        CHECK(counts.removed_conf == 1);   // the 0.1 candidate
        CHECK(counts.removed_chi2 == 1);   // the giant box
        REQUIRE(out.size() == 1);
        CHECK(out[0].cx == 500);
    }

    SUBCASE("monotone in confidence threshold") {
        std::vector<BBox> cands;
        for (int i = 0; i < 20; ++i)
            cands.push_back(make_box(static_cast<float>(rng.uniform(100, 900)),
                                     static_cast<float>(rng.uniform(150, 350)),
                                     static_cast<float>(rng.uniform(30, 50)),
                                     static_cast<float>(rng.uniform(60, 90)),
                                     static_cast<float>(rng.uniform(0.0, 1.0))));
        std::vector<BBox> prev =
            filter_pseudo_labels(cands, 0.0f, 0.5f, stats, gate, 1024, 512);
        for (float conf : {0.2f, 0.4f, 0.6f, 0.8f}) {
            auto cur = filter_pseudo_labels(cands, conf, 0.5f, stats, gate, 1024, 512);
            for (const BBox& b : cur) {
                bool found = false;
                for (const BBox& p : prev)
                    if (same_box(b, p)) found = true;
                CHECK(found);  // raising the threshold never adds boxes
            }
            prev = cur;
        }
    }
}

TEST_CASE("merge_binary_mask") {
    GrayImage m = GrayImage::blank(4, 2);
    CHECK(merge_binary_mask(m).pixels == std::vector<uint8_t>(8, 0));
    m.at(0, 0) = 3;
    m.at(2, 1) = 7;
    GrayImage merged = merge_binary_mask(m);
    CHECK(merged.at(0, 0) == 1);
    CHECK(merged.at(2, 1) == 1);
    CHECK(merged.at(1, 0) == 0);
    CHECK(merge_binary_mask(merged).pixels == merged.pixels);  // idempotent
}

TEST_CASE("crop_and_resize") {
    Rng rng(6);
    GrayImage img = GrayImage::blank(64, 48);
    for (uint8_t& p : img.pixels) p = static_cast<uint8_t>(rng.uniform(0.0, 255.999));
    GrayImage carseg = GrayImage::blank(64, 48);
    GrayImage ad = GrayImage::blank(64, 48);
    for (int y = 10; y < 30; ++y)
        for (int x = 10; x < 40; ++x) carseg.at(x, y) = 1;

    SUBCASE("full-image box with zero margin and same size is identity") {
        MaskPair p = crop_and_resize(img, carseg, ad, make_box(32, 24, 64, 48), 64, 0.0f);
        // width drives out_size; heights differ so only compare via mapping
        CHECK(p.mapping.src_x == 0);
        CHECK(p.mapping.src_y == 0);
        CHECK(p.mapping.src_w == 64);
        CHECK(p.mapping.src_h == 48);
    }

    SUBCASE("masks stay binary after nearest resize") {
        MaskPair p = crop_and_resize(img, carseg, ad, make_box(25, 20, 30, 24), 224, 0.1f);
        for (uint8_t v : p.carseg_mask.pixels) CHECK((v == 0 || v == 1));
        for (uint8_t v : p.ad_mask.pixels) CHECK((v == 0 || v == 1));
        CHECK(p.crop.width == 224);
        CHECK(p.crop.height == 224);
    }

    SUBCASE("box outside the image is rejected") {
        CHECK_THROWS_AS(crop_and_resize(img, carseg, ad, make_box(-100, -100, 10, 10), 224, 0.0f),
                        InputError);
    }

    SUBCASE("checkerboard round trip stays within one pixel") {
        GrayImage board = GrayImage::blank(64, 48);
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 64; ++x) board.at(x, y) = ((x / 8 + y / 8) % 2) ? 1 : 0;
        BBox box = make_box(30, 22, 44, 36);
        MaskPair p = crop_and_resize(img, board, ad, box, 32, 0.0f);
        GrayImage back = spatial_realign(p.carseg_mask, p.mapping);
        CHECK(back.width == 64);
        CHECK(back.height == 48);
        int outside_nonzero = 0, mismatched = 0, total = 0;
        for (int y = 0; y < 48; ++y) {
            for (int x = 0; x < 64; ++x) {
                const bool inside = x >= p.mapping.src_x && x < p.mapping.src_x + p.mapping.src_w &&
                                    y >= p.mapping.src_y && y < p.mapping.src_y + p.mapping.src_h;
                if (!inside) {
                    if (back.at(x, y) != 0) ++outside_nonzero;
                    continue;
                }
                ++total;
                // value must match some source pixel within a 1 px radius
                bool ok = false;
                for (int dy = -1; dy <= 1 && !ok; ++dy)
                    for (int dx = -1; dx <= 1 && !ok; ++dx) {
                        const int sx = std::clamp(x + dx, 0, 63);
                        const int sy = std::clamp(y + dy, 0, 47);
                        if (back.at(x, y) == board.at(sx, sy)) ok = true;
                    }
                if (!ok) ++mismatched;
            }
        }
        CHECK(outside_nonzero == 0);
        CHECK(mismatched == 0);
        CHECK(total > 0);
    }
}

TEST_CASE("augment") {
    Rng rng(7);
    MaskPair pair;
    pair.crop = GrayImage::blank(64, 64);
    for (uint8_t& p : pair.crop.pixels) p = static_cast<uint8_t>(rng.uniform(0.0, 255.999));
    pair.carseg_mask = GrayImage::blank(64, 64);
    pair.ad_mask = GrayImage::blank(64, 64);
    // centered disk in the carseg mask
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if ((x - 31.5) * (x - 31.5) + (y - 31.5) * (y - 31.5) <= 22.0 * 22.0)
                pair.carseg_mask.at(x, y) = 1;

    SUBCASE("zero angle, no flip is the identity") {
        MaskPair out = augment_with(pair, 0.0, false);
        CHECK(out.crop.pixels == pair.crop.pixels);
        CHECK(out.carseg_mask.pixels == pair.carseg_mask.pixels);
    }

    SUBCASE("double horizontal flip is the identity") {
        MaskPair once = augment_with(pair, 0.0, true);
        MaskPair twice = augment_with(once, 0.0, true);
        CHECK(twice.crop.pixels == pair.crop.pixels);
        CHECK(twice.carseg_mask.pixels == pair.carseg_mask.pixels);
        CHECK(once.crop.pixels != pair.crop.pixels);
    }

    SUBCASE("rotated disk stays binary with area change < 10%") {
        MaskPair out = augment_with(pair, 15.0, false);
        int before = 0, after = 0;
        for (uint8_t v : pair.carseg_mask.pixels) before += v;
        for (uint8_t v : out.carseg_mask.pixels) {
            CHECK((v == 0 || v == 1));
            after += v;
        }
        CHECK(std::abs(after - before) < before / 10);
    }

    SUBCASE("seeded augment reproduces bit-exactly") {
        MaskPair a = augment(pair, 1234);
        MaskPair b = augment(pair, 1234);
        CHECK(a.crop.pixels == b.crop.pixels);
        CHECK(a.carseg_mask.pixels == b.carseg_mask.pixels);
        CHECK(a.ad_mask.pixels == b.ad_mask.pixels);
        MaskPair c = augment(pair, 1235);
        CHECK(a.crop.pixels != c.crop.pixels);
    }
}

TEST_CASE("spatial_realign") {
    CropMapping m{10, 5, 20, 16, 64, 48};

    SUBCASE("zero mask to zero canvas") {
        GrayImage out = spatial_realign(GrayImage::blank(32, 32), m);
        for (uint8_t v : out.pixels) CHECK(v == 0);
    }

    SUBCASE("all-one mask marks exactly the crop rectangle") {
        GrayImage out = spatial_realign(GrayImage::blank(32, 32, 1), m);
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool inside = x >= 10 && x < 30 && y >= 5 && y < 21;
                CHECK(out.at(x, y) == (inside ? 1 : 0));
            }
    }

    SUBCASE("invalid mappings rejected") {
        CHECK_THROWS_AS(spatial_realign(GrayImage::blank(8, 8), CropMapping{0, 0, 0, 4, 16, 16}),
                        ShapeError);
        CHECK_THROWS_AS(spatial_realign(GrayImage::blank(8, 8), CropMapping{10, 0, 10, 4, 16, 16}),
                        ShapeError);
    }
}

TEST_CASE("boxes jsonl round trip") {
    std::vector<NamedBox> boxes;
    for (int i = 0; i < 5; ++i) {
        NamedBox nb;
        nb.image_id = "img_" + std::to_string(i);
        nb.box = make_box(10.0f + i, 20.0f + i, 5.0f, 7.0f, 0.1f * i);
        boxes.push_back(nb);
    }
    const std::string path = temp_path("mathena_boxes.jsonl");
    write_boxes_jsonl(path, boxes);
    auto back = read_boxes_jsonl(path);
    REQUIRE(back.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(back[i].image_id == boxes[i].image_id);
        CHECK(same_box(back[i].box, boxes[i].box));
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_boxes_jsonl(temp_path("missing.jsonl")), InputError);
}
