#include "mathena/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "mathena/checkpoint.hpp"
#include "mathena/evalmetrics.hpp"
#include "mathena/train.hpp"

namespace fs = std::filesystem;

namespace mathena {

std::map<std::string, std::string> read_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("read_config: cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("read_config: expected key=value, got: " + line);
        out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

namespace {

// Config-file values fill in options the command line left at their default;
// any key the subcommand does not consume is a hard error.
class ConfigOverlay {
public:
    ConfigOverlay(const std::string& path) {
        if (!path.empty()) values_ = read_config(path);
    }

    template <typename T>
    void take(const std::string& key, T& var, const CLI::Option* opt) {
        auto it = values_.find(key);
        if (it == values_.end()) return;
        consumed_.insert(key);
        if (opt && opt->count() > 0) return;  // explicit flag wins
        std::istringstream ss(it->second);
        if (!(ss >> var)) throw ConfigError("config: bad value for " + key + ": " + it->second);
    }

    void finish() const {
        for (const auto& [k, v] : values_)
            if (!consumed_.count(k)) throw ConfigError("config: unknown key " + k);
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

void overlay_train(ConfigOverlay& cfg_file, TrainConfig& cfg, const CLI::App* cmd,
                   const std::string& suffix = "") {
    cfg_file.take("lr" + suffix, cfg.lr, cmd->get_option_no_throw("--lr"));
    cfg_file.take("weight_decay" + suffix, cfg.weight_decay,
                  cmd->get_option_no_throw("--weight-decay"));
    cfg_file.take("epochs" + suffix, cfg.epochs, cmd->get_option_no_throw("--epochs"));
    cfg_file.take("batch_size" + suffix, cfg.batch_size, cmd->get_option_no_throw("--batch"));
    cfg_file.take("warmup_steps" + suffix, cfg.warmup_steps,
                  cmd->get_option_no_throw("--warmup"));
    cfg_file.take("seed", cfg.seed, cmd->get_option_no_throw("--seed"));
    cfg_file.take("target_metric" + suffix, cfg.target_metric,
                  cmd->get_option_no_throw("--target"));
}

GrayImage bool_mask_to_pgm(const GrayImage& mask) {
    GrayImage out = GrayImage::blank(mask.width, mask.height);
    for (size_t i = 0; i < mask.pixels.size(); ++i) out.pixels[i] = mask.pixels[i] ? 255 : 0;
    return out;
}

int cmd_synth(const std::string& out, uint64_t seed, int count, int width, int height, int teeth) {
    write_dataset(out, seed, count, width, height, teeth);
    std::cout << "{\"dataset\":\"" << out << "\",\"count\":" << count << "}\n";
    return 0;
}

int cmd_filter_labels(const std::string& boxes_path, const std::string& stats_path, float conf,
                      float nms_iou, double chi2_p, const std::string& out_path, int width,
                      int height) {
    std::vector<NamedBox> cands = read_boxes_jsonl(boxes_path);
    std::vector<BBox> ref;
    for (const NamedBox& nb : read_boxes_jsonl(stats_path)) ref.push_back(nb.box);
    const BoxStats stats = fit_box_stats(ref, width, height);
    const ChiSquareGate gate = ChiSquareGate::make(chi2_p);

    std::vector<std::string> order;
    std::map<std::string, std::vector<BBox>> by_image;
    for (const NamedBox& nb : cands) {
        if (!by_image.count(nb.image_id)) order.push_back(nb.image_id);
        by_image[nb.image_id].push_back(nb.box);
    }
    FilterCounts total;
    std::vector<NamedBox> kept;
    for (const std::string& id : order) {
        FilterCounts c;
        for (const BBox& b :
             filter_pseudo_labels(by_image[id], conf, nms_iou, stats, gate, width, height, &c))
            kept.push_back(NamedBox{id, b});
        total.removed_conf += c.removed_conf;
        total.removed_nms += c.removed_nms;
        total.removed_chi2 += c.removed_chi2;
    }
    write_boxes_jsonl(out_path, kept);
    std::cerr << "confidence<" << conf << ": removed " << total.removed_conf << "\n"
              << "nms@" << nms_iou << ": removed " << total.removed_nms << "\n"
              << "chi2 gate p=" << chi2_p << ": removed " << total.removed_chi2 << "\n"
              << "kept: " << kept.size() << " of " << cands.size() << "\n";
    return 0;
}

int cmd_train_detect(const std::string& data, const std::string& val_dir, const std::string& out,
                     const TrainConfig& cfg) {
    Dataset train = load_dataset(data);
    Dataset val = load_dataset(val_dir);
    MiniMATHE model = mini_mathe_init(cfg.seed);
    train_detector(model, train, val, cfg, &std::cout);
    if (!out.empty()) save_checkpoint(out, model.params);
    return 0;
}

int cmd_train_hena(const std::string& data, const std::string& val_dir, const std::string& out,
                   const TrainConfig& cfg1, const TrainConfig& cfg2, const TrainConfig& cfg3,
                   size_t crops_train, size_t crops_val) {
    Dataset train = load_dataset(data);
    Dataset val = load_dataset(val_dir);
    MiniHENA model = mini_hena_init(cfg1.seed);
    HenaCrops crops = make_hena_crops(train, val, model.crop_size, crops_train, crops_val);
    HenaTrainResult r = train_hena_sequential(model, crops, cfg1, cfg2, cfg3, &std::cout);
    std::cerr << "backbone hash after stage 1: " << r.backbone_hash_after_stage1 << "\n"
              << "backbone hash after stage 2: " << r.backbone_hash_after_stage2 << "\n"
              << "backbone hash after stage 3: " << r.backbone_hash_after_stage3 << "\n"
              << "stage 3 trainable parameters: " << r.stage3_trainable_count << "\n";
    if (!out.empty()) save_checkpoint(out, model.params);
    return 0;
}

int cmd_eval(const std::string& preds_path, const std::string& gts_path) {
    std::map<std::string, DetScene> scenes;
    for (const NamedBox& nb : read_boxes_jsonl(gts_path)) scenes[nb.image_id].gts.push_back(nb.box);
    for (const NamedBox& nb : read_boxes_jsonl(preds_path))
        scenes[nb.image_id].preds.push_back(nb.box);
    std::vector<DetScene> list;
    for (const auto& [id, sc] : scenes) list.push_back(sc);
    const MapResult r = eval_map(list);
    std::ostringstream os;
    os.precision(9);
    os << "{\"map50\":" << r.map50 << ",\"map5095\":" << r.map5095 << "}";
    std::cout << os.str() << "\n";
    return 0;
}

int cmd_infer(const std::string& model_dir, const std::string& hena_dir,
              const std::string& image_path, const std::string& out_dir, float conf, float nms_thr,
              bool use_tta) {
    GrayImage img = read_pgm(image_path);
    MiniMATHE det = mini_mathe_init(0);
    load_checkpoint(model_dir, det.params);
    MiniHENA hena = mini_hena_init(0);
    load_checkpoint(hena_dir, hena.params);

    std::vector<BBox> boxes_norm = use_tta ? tta_detect(det, img, conf, nms_thr)
                                           : mathe_detect(det, img, conf, nms_thr);
    const std::string id = fs::path(image_path).stem().string();
    GrayImage carseg = GrayImage::blank(img.width, img.height);
    GrayImage ad = GrayImage::blank(img.width, img.height);
    GrayImage empty = GrayImage::blank(img.width, img.height);
    fs::create_directories(out_dir);
    std::ofstream stages((fs::path(out_dir) / "stages.csv").string());
    stages << "image_id,tooth_id,stage_letter\n";

    std::vector<NamedBox> named;
    for (size_t i = 0; i < boxes_norm.size(); ++i) {
        BBox px = boxes_norm[i];
        px.cx *= static_cast<float>(img.width);
        px.w *= static_cast<float>(img.width);
        px.cy *= static_cast<float>(img.height);
        px.h *= static_cast<float>(img.height);
        named.push_back(NamedBox{id, px});

        MaskPair mp = crop_and_resize(img, empty, empty, px, hena.crop_size, 0.1f);
        HenaOutput out = hena_forward(hena, image_to_tensor(mp.crop));
        GrayImage car_crop = GrayImage::blank(hena.crop_size, hena.crop_size);
        GrayImage ad_crop = GrayImage::blank(hena.crop_size, hena.crop_size);
        for (size_t p = 0; p < car_crop.pixels.size(); ++p) {
            car_crop.pixels[p] = out.carseg_logits.at(static_cast<int64_t>(p)) > 0 ? 1 : 0;
            ad_crop.pixels[p] = out.ad_logits.at(static_cast<int64_t>(p)) > 0 ? 1 : 0;
        }
        GrayImage car_full = spatial_realign(car_crop, mp.mapping);
        GrayImage ad_full = spatial_realign(ad_crop, mp.mapping);
        for (size_t p = 0; p < carseg.pixels.size(); ++p) {
            carseg.pixels[p] |= car_full.pixels[p];
            ad.pixels[p] |= ad_full.pixels[p];
        }
        stages << id << "," << i << "," << stage_decode(out.dds_logits).letter() << "\n";
    }
    write_boxes_jsonl((fs::path(out_dir) / "boxes.jsonl").string(), named);
    write_pgm((fs::path(out_dir) / "carseg.pgm").string(), bool_mask_to_pgm(carseg));
    write_pgm((fs::path(out_dir) / "ad.pgm").string(), bool_mask_to_pgm(ad));
    std::cout << "{\"image\":\"" << id << "\",\"boxes\":" << named.size() << "}\n";
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"MATHENA desk-scale harness: synthetic OPG detection, segmentation and staging"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
    std::string synth_out = "dataset";
    uint64_t synth_seed = 42;
    int synth_count = 8, synth_w = 256, synth_h = 128, synth_teeth = 6;
    std::string synth_config;
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--seed", synth_seed, "RNG seed");
    synth->add_option("--count", synth_count, "Number of scenes");
    synth->add_option("--width", synth_w, "Image width");
    synth->add_option("--height", synth_h, "Image height");
    synth->add_option("--teeth", synth_teeth, "Teeth per scene");
    synth->add_option("--config", synth_config, "key=value config file");

    // ---- filter-labels ----
    auto* filt = app.add_subcommand("filter-labels", "Curate pseudo-label boxes");
    std::string filt_boxes, filt_stats, filt_out = "curated.jsonl", filt_config;
    float filt_conf = 0.25f, filt_nms = 0.5f;
    double filt_p = 0.001;
    int filt_w = 256, filt_h = 128;
    uint64_t filt_seed = 42;
    filt->add_option("--boxes", filt_boxes, "Candidate boxes JSONL")->required();
    filt->add_option("--stats-from", filt_stats, "Trusted boxes JSONL for the Gaussian fit")
        ->required();
    filt->add_option("--conf", filt_conf, "Confidence threshold");
    filt->add_option("--nms-iou", filt_nms, "NMS IoU threshold");
    filt->add_option("--chi2-p", filt_p, "Chi-square gate p-value");
    filt->add_option("--out", filt_out, "Curated output JSONL");
    filt->add_option("--width", filt_w, "Image width for normalization");
    filt->add_option("--height", filt_h, "Image height for normalization");
    filt->add_option("--seed", filt_seed, "RNG seed (unused; accepted for uniformity)");
    filt->add_option("--config", filt_config, "key=value config file");

    // ---- train-detect ----
    auto* td = app.add_subcommand("train-detect", "Train the miniature detector");
    std::string td_data, td_val, td_out, td_config;
    TrainConfig td_cfg;
    td_cfg.lr = 2e-3;  // desk-scale peak; the full-scale default is 1e-4
    td->add_option("--data", td_data, "Training dataset directory")->required();
    td->add_option("--val", td_val, "Validation dataset directory")->required();
    td->add_option("--out", td_out, "Checkpoint output directory");
    td->add_option("--seed", td_cfg.seed, "RNG seed");
    td->add_option("--epochs", td_cfg.epochs, "Max epochs");
    td->add_option("--lr", td_cfg.lr, "Peak learning rate");
    td->add_option("--weight-decay", td_cfg.weight_decay, "Decoupled weight decay");
    td->add_option("--batch", td_cfg.batch_size, "Batch size");
    td->add_option("--warmup", td_cfg.warmup_steps, "Warmup steps");
    td->add_option("--target", td_cfg.target_metric, "Early-stop val mAP50 (<=0: off)");
    td->add_option("--config", td_config, "key=value config file");

    // ---- train-hena ----
    auto* th = app.add_subcommand("train-hena", "Train HENA in three sequential stages");
    std::string th_data, th_val, th_out, th_config;
    TrainConfig th_cfg;
    th_cfg.lr = 3e-3;
    th_cfg.epochs = 50;
    size_t th_crops_train = 512, th_crops_val = 128;
    int th_epochs2 = -1, th_epochs3 = -1;
    double th_lr2 = -1.0, th_lr3 = -1.0;
    double th_t1 = -1.0, th_t2 = -1.0, th_t3 = -1.0;
    th->add_option("--data", th_data, "Training dataset directory")->required();
    th->add_option("--val", th_val, "Validation dataset directory")->required();
    th->add_option("--out", th_out, "Checkpoint output directory");
    th->add_option("--seed", th_cfg.seed, "RNG seed");
    th->add_option("--epochs", th_cfg.epochs, "Max epochs per stage");
    th->add_option("--epochs2", th_epochs2, "Max epochs for stage 2 (default: --epochs)");
    th->add_option("--epochs3", th_epochs3, "Max epochs for stage 3 (default: --epochs)");
    th->add_option("--lr", th_cfg.lr, "Peak learning rate");
    th->add_option("--lr2", th_lr2, "Stage-2 peak learning rate (default: --lr)");
    th->add_option("--lr3", th_lr3, "Stage-3 peak learning rate (default: --lr)");
    th->add_option("--weight-decay", th_cfg.weight_decay, "Decoupled weight decay");
    th->add_option("--batch", th_cfg.batch_size, "Batch size");
    th->add_option("--warmup", th_cfg.warmup_steps, "Warmup steps");
    th->add_option("--target1", th_t1, "Early-stop stage-1 val CarSeg Dice");
    th->add_option("--target2", th_t2, "Early-stop stage-2 val AD Dice");
    th->add_option("--target3", th_t3, "Early-stop stage-3 val DDS accuracy");
    th->add_option("--crops-train", th_crops_train, "Max training crops");
    th->add_option("--crops-val", th_crops_val, "Max validation crops");
    th->add_option("--config", th_config, "key=value config file");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Score prediction boxes against ground truth");
    std::string ev_preds, ev_gts, ev_config;
    uint64_t ev_seed = 42;
    ev->add_option("--preds", ev_preds, "Prediction boxes JSONL")->required();
    ev->add_option("--gts", ev_gts, "Ground-truth boxes JSONL")->required();
    ev->add_option("--seed", ev_seed, "RNG seed (unused; accepted for uniformity)");
    ev->add_option("--config", ev_config, "key=value config file");

    // ---- infer ----
    auto* inf = app.add_subcommand("infer", "Detect, crop, run HENA, and realign masks");
    std::string inf_model, inf_hena, inf_image, inf_out = "infer_out", inf_config;
    float inf_conf = 0.25f, inf_nms = 0.5f;
    bool inf_tta = false;
    uint64_t inf_seed = 42;
    inf->add_option("--model", inf_model, "Detector checkpoint directory")->required();
    inf->add_option("--hena", inf_hena, "HENA checkpoint directory")->required();
    inf->add_option("--image", inf_image, "Input PGM image")->required();
    inf->add_option("--out", inf_out, "Output directory");
    inf->add_option("--conf", inf_conf, "Confidence threshold");
    inf->add_option("--nms", inf_nms, "NMS IoU threshold");
    inf->add_flag("--tta", inf_tta, "Horizontal-flip test-time augmentation");
    inf->add_option("--seed", inf_seed, "RNG seed (unused; accepted for uniformity)");
    inf->add_option("--config", inf_config, "key=value config file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }

    try {
        if (synth->parsed()) {
            ConfigOverlay cf(synth_config);
            cf.take("seed", synth_seed, synth->get_option_no_throw("--seed"));
            cf.take("count", synth_count, synth->get_option_no_throw("--count"));
            cf.take("width", synth_w, synth->get_option_no_throw("--width"));
            cf.take("height", synth_h, synth->get_option_no_throw("--height"));
            cf.take("teeth", synth_teeth, synth->get_option_no_throw("--teeth"));
            cf.finish();
            return cmd_synth(synth_out, synth_seed, synth_count, synth_w, synth_h, synth_teeth);
        }
        if (filt->parsed()) {
            ConfigOverlay cf(filt_config);
            cf.take("conf", filt_conf, filt->get_option_no_throw("--conf"));
            cf.take("nms_iou", filt_nms, filt->get_option_no_throw("--nms-iou"));
            cf.take("chi2_p", filt_p, filt->get_option_no_throw("--chi2-p"));
            cf.take("width", filt_w, filt->get_option_no_throw("--width"));
            cf.take("height", filt_h, filt->get_option_no_throw("--height"));
            cf.finish();
            return cmd_filter_labels(filt_boxes, filt_stats, filt_conf, filt_nms, filt_p, filt_out,
                                     filt_w, filt_h);
        }
        if (td->parsed()) {
            ConfigOverlay cf(td_config);
            overlay_train(cf, td_cfg, td);
            cf.finish();
            return cmd_train_detect(td_data, td_val, td_out, td_cfg);
        }
        if (th->parsed()) {
            ConfigOverlay cf(th_config);
            overlay_train(cf, th_cfg, th);
            cf.take("epochs2", th_epochs2, th->get_option_no_throw("--epochs2"));
            cf.take("epochs3", th_epochs3, th->get_option_no_throw("--epochs3"));
            cf.take("lr2", th_lr2, th->get_option_no_throw("--lr2"));
            cf.take("lr3", th_lr3, th->get_option_no_throw("--lr3"));
            cf.take("target1", th_t1, th->get_option_no_throw("--target1"));
            cf.take("target2", th_t2, th->get_option_no_throw("--target2"));
            cf.take("target3", th_t3, th->get_option_no_throw("--target3"));
            cf.take("crops_train", th_crops_train, th->get_option_no_throw("--crops-train"));
            cf.take("crops_val", th_crops_val, th->get_option_no_throw("--crops-val"));
            cf.finish();
            TrainConfig c1 = th_cfg, c2 = th_cfg, c3 = th_cfg;
            c1.target_metric = th_t1;
            c2.target_metric = th_t2;
            c3.target_metric = th_t3;
            if (th_epochs2 > 0) c2.epochs = th_epochs2;
            if (th_epochs3 > 0) c3.epochs = th_epochs3;
            if (th_lr2 > 0) c2.lr = th_lr2;
            if (th_lr3 > 0) c3.lr = th_lr3;
            return cmd_train_hena(th_data, th_val, th_out, c1, c2, c3, th_crops_train,
                                  th_crops_val);
        }
        if (ev->parsed()) {
            ConfigOverlay cf(ev_config);
            cf.finish();
            return cmd_eval(ev_preds, ev_gts);
        }
        if (inf->parsed()) {
            ConfigOverlay cf(inf_config);
            cf.take("conf", inf_conf, inf->get_option_no_throw("--conf"));
            cf.take("nms", inf_nms, inf->get_option_no_throw("--nms"));
            cf.finish();
            return cmd_infer(inf_model, inf_hena, inf_image, inf_out, inf_conf, inf_nms, inf_tta);
        }
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace mathena
