#include "deepfext/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include <nlohmann/json.hpp>

#include "deepfext/dataset.hpp"
#include "deepfext/image_io.hpp"
#include "deepfext/skeleton.hpp"

namespace dfx {

ConfusionCounts confusion(const BinaryMap& pred, const BinaryMap& gt, const BinaryMap* fov) {
    require_same_shape(pred, gt, "confusion");
    if (fov) require_same_shape(pred, *fov, "confusion fov");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.px.size(); ++i) {
        if (fov && !fov->px[i]) continue;
        const bool p = pred.px[i] != 0;
        const bool g = gt.px[i] != 0;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

PrfScores precision_recall_f1(const ConfusionCounts& c) {
    PrfScores s;
    s.precision = (c.tp + c.fp) == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    s.recall = (c.tp + c.fn) == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

double cohens_kappa(const ConfusionCounts& c) {
    const double n = static_cast<double>(c.total());
    if (n == 0.0) return 1.0;  // vacuous agreement, consistent with the empty-positive conventions
    const double po = static_cast<double>(c.tp + c.tn) / n;
    const double pe = (static_cast<double>(c.tp + c.fp) / n) * (static_cast<double>(c.tp + c.fn) / n) +
                      (static_cast<double>(c.fn + c.tn) / n) * (static_cast<double>(c.fp + c.tn) / n);
    if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
    return (po - pe) / (1.0 - pe);
}

BinaryMap threshold_map(const GrayMap& prob, double threshold) {
    BinaryMap m(prob.height, prob.width);
    for (std::size_t i = 0; i < prob.px.size(); ++i) {
        m.px[i] = static_cast<double>(prob.px[i]) >= threshold ? 1 : 0;
    }
    return m;
}

namespace {

double dice_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    const std::int64_t denom = 2 * tp + fp + fn;
    if (denom == 0) return 1.0;  // both sides empty
    return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

double dice_at(const GrayMap& prob, const BinaryMap& gt, const BinaryMap* fov, double threshold) {
    ConfusionCounts c = confusion(threshold_map(prob, threshold), gt, fov);
    return dice_from_counts(c.tp, c.fp, c.fn);
}

MaxDice max_dice_over_grid(const GrayMap& prob, const BinaryMap& gt, const BinaryMap* fov) {
    MaxDice best{-1.0, 0.0};
    for (int i = 1; i <= 99; ++i) {
        const double t = i / 100.0;
        const double d = dice_at(prob, gt, fov, t);
        if (d > best.dice) best = {d, t};
    }
    return best;
}

double average_max_dice(const std::vector<GrayMap>& probs, const std::vector<BinaryMap>& gts,
                        const std::vector<const BinaryMap*>& fovs, std::vector<double>* best_thresholds) {
    if (probs.empty()) throw DataError("average_max_dice needs at least one image");
    if (probs.size() != gts.size() || (!fovs.empty() && fovs.size() != probs.size())) {
        throw DataError("average_max_dice input lists differ in length");
    }
    if (best_thresholds) best_thresholds->clear();
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        MaxDice md = max_dice_over_grid(probs[i], gts[i], fovs.empty() ? nullptr : fovs[i]);
        sum += md.dice;
        if (best_thresholds) best_thresholds->push_back(md.best_threshold);
    }
    return sum / static_cast<double>(probs.size());
}

MetricsReport score_instances(const std::vector<EvalInstance>& instances, const std::string& task,
                              double threshold) {
    if (instances.empty()) throw DataError("no images to evaluate");
    MetricsReport report;
    report.task = task;
    report.threshold_used = threshold;

    const std::size_t n_classes = instances.front().class_probs.size();
    std::vector<ConfusionCounts> pooled(n_classes);
    double max_dice_sum = 0.0;

    for (const auto& inst : instances) {
        if (inst.class_probs.size() != n_classes || inst.class_gts.size() != n_classes) {
            throw DataError("instance " + inst.id + " has inconsistent class count");
        }
        const BinaryMap* fov = inst.fov ? &*inst.fov : nullptr;
        ImageScore row;
        row.id = inst.id;
        for (std::size_t k = 0; k < n_classes; ++k) {
            ConfusionCounts c = confusion(threshold_map(inst.class_probs[k], threshold), inst.class_gts[k], fov);
            pooled[k].tp += c.tp;
            pooled[k].fp += c.fp;
            pooled[k].fn += c.fn;
            pooled[k].tn += c.tn;
            PrfScores s = precision_recall_f1(c);
            MaxDice md = max_dice_over_grid(inst.class_probs[k], inst.class_gts[k], fov);
            row.precision += s.precision;
            row.recall += s.recall;
            row.f1 += s.f1;
            row.kappa += cohens_kappa(c);
            row.max_dice += md.dice;
            row.best_threshold += md.best_threshold;
        }
        const double inv = 1.0 / static_cast<double>(n_classes);
        row.precision *= inv;
        row.recall *= inv;
        row.f1 *= inv;
        row.kappa *= inv;
        row.max_dice *= inv;
        row.best_threshold *= inv;
        report.per_image.push_back(row);
        max_dice_sum += row.max_dice;
    }

    // aggregate: pooled confusion per class, macro over classes; the Dice
    // column stays the average of per-image maxima
    ImageScore agg;
    agg.id = "aggregate";
    for (std::size_t k = 0; k < n_classes; ++k) {
        PrfScores s = precision_recall_f1(pooled[k]);
        agg.precision += s.precision;
        agg.recall += s.recall;
        agg.kappa += cohens_kappa(pooled[k]);
    }
    const double inv = 1.0 / static_cast<double>(n_classes);
    agg.precision *= inv;
    agg.recall *= inv;
    agg.kappa *= inv;
    agg.f1 = (agg.precision + agg.recall) == 0.0
                 ? 0.0
                 : 2.0 * agg.precision * agg.recall / (agg.precision + agg.recall);
    agg.max_dice = max_dice_sum / static_cast<double>(report.per_image.size());
    double bt = 0.0;
    for (const auto& r : report.per_image) bt += r.best_threshold;
    agg.best_threshold = bt / static_cast<double>(report.per_image.size());
    report.aggregate = agg;
    return report;
}

namespace {

nlohmann::json score_to_json(const ImageScore& s) {
    return {{"id", s.id},           {"precision", s.precision}, {"recall", s.recall},
            {"f1", s.f1},           {"max_dice", s.max_dice},   {"best_threshold", s.best_threshold},
            {"kappa", s.kappa}};
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["task"] = task;
    j["threshold"] = threshold_used;
    j["per_image"] = nlohmann::json::array();
    for (const auto& r : per_image) j["per_image"].push_back(score_to_json(r));
    j["aggregate"] = score_to_json(aggregate);
    return j;
}

std::string MetricsReport::table() const {
    char line[256];
    std::string out;
    std::snprintf(line, sizeof(line), "%-16s %10s %10s %10s %18s %10s\n", "Image", "Precision",
                  "Recall", "F1 Score", "Average Max. Dice", "Kappa");
    out += line;
    out += std::string(78, '-') + "\n";
    auto emit = [&](const ImageScore& s) {
        std::snprintf(line, sizeof(line), "%-16s %10.4f %10.4f %10.4f %18.4f %10.4f\n", s.id.c_str(),
                      s.precision, s.recall, s.f1, s.max_dice, s.kappa);
        out += line;
    };
    for (const auto& r : per_image) emit(r);
    out += std::string(78, '-') + "\n";
    emit(aggregate);
    return out;
}

namespace {

namespace fs = std::filesystem;

std::map<std::string, std::vector<fs::path>> candidates_by_id(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("directory does not exist: " + dir.string());
    std::map<std::string, std::vector<fs::path>> out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out[id_token(f.filename().string())].push_back(f);
    return out;
}

// Picks the candidate whose name carries the wanted role marker; falls back
// to a lone candidate.
const fs::path* pick_candidate(const std::vector<fs::path>& cands, const std::string& marker) {
    for (const auto& c : cands) {
        if (c.filename().string().find(marker) != std::string::npos) return &c;
    }
    if (cands.size() == 1) return &cands.front();
    return nullptr;
}

BinaryMap and_not(const BinaryMap& a, const BinaryMap& b) {
    BinaryMap out(a.height, a.width);
    for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = (a.px[i] && !b.px[i]) ? 1 : 0;
    return out;
}

GrayMap mask_to_prob(const BinaryMap& m) {
    GrayMap g(m.height, m.width);
    for (std::size_t i = 0; i < m.px.size(); ++i) g.px[i] = m.px[i] ? 1.0f : 0.0f;
    return g;
}

}  // namespace

MetricsReport evaluate(const std::string& pred_dir, const std::string& gt_dir,
                       const std::string& fov_dir, const std::string& task, double threshold) {
    if (task != "vessel" && task != "centerline" && task != "both") {
        throw ConfigError("unknown task '" + task + "' (expected vessel, centerline or both)");
    }
    auto gt_map = candidates_by_id(gt_dir);
    auto pred_map = candidates_by_id(pred_dir);
    std::map<std::string, std::vector<fs::path>> fov_map;
    if (!fov_dir.empty()) fov_map = candidates_by_id(fov_dir);

    std::vector<std::string> missing;
    std::vector<EvalInstance> instances;
    for (const auto& [id, gt_files] : gt_map) {
        auto pit = pred_map.find(id);
        if (pit == pred_map.end()) {
            missing.push_back(id + " (no prediction)");
            continue;
        }
        EvalInstance inst;
        inst.id = id;
        BinaryMap gt = decode_mask(gt_files.front().string());
        if (!fov_dir.empty()) {
            auto fit = fov_map.find(id);
            if (fit == fov_map.end()) {
                missing.push_back(id + " (no FOV mask)");
                continue;
            }
            inst.fov = decode_mask(fit->second.front().string());
        }

        if (task == "vessel") {
            const fs::path* p = pick_candidate(pit->second, "prob_vessel");
            if (!p) p = pick_candidate(pit->second, "prob");
            if (!p) {
                missing.push_back(id + " (ambiguous prediction files)");
                continue;
            }
            inst.class_probs.push_back(decode_gray(p->string()));
            inst.class_gts.push_back(std::move(gt));
        } else if (task == "centerline") {
            const fs::path* p = pick_candidate(pit->second, "prob_centerline");
            if (!p) p = pick_candidate(pit->second, "prob");
            if (!p) {
                missing.push_back(id + " (ambiguous prediction files)");
                continue;
            }
            inst.class_probs.push_back(decode_gray(p->string()));
            inst.class_gts.push_back(skeletonize(gt));
        } else {  // both: one-vs-rest {vessel-only, centerline}
            BinaryMap skel = skeletonize(gt);
            inst.class_gts.push_back(and_not(gt, skel));
            inst.class_gts.push_back(skel);
            const fs::path* pv = pick_candidate(pit->second, "prob_vessel");
            const fs::path* pc = pick_candidate(pit->second, "prob_centerline");
            if (pv && pc && pv != pc) {
                inst.class_probs.push_back(decode_gray(pv->string()));
                inst.class_probs.push_back(decode_gray(pc->string()));
            } else if (pit->second.size() == 1) {
                // a plain mask: split it by skeletonization, mirroring the gt
                BinaryMap pm = decode_mask(pit->second.front().string());
                BinaryMap pskel = skeletonize(pm);
                inst.class_probs.push_back(mask_to_prob(and_not(pm, pskel)));
                inst.class_probs.push_back(mask_to_prob(pskel));
            } else {
                missing.push_back(id + " (need *_prob_vessel and *_prob_centerline, or one mask)");
                continue;
            }
        }
        instances.push_back(std::move(inst));
    }
    if (!missing.empty()) {
        std::string msg = "evaluation inputs incomplete for " + std::to_string(missing.size()) + " id(s):";
        for (const auto& s : missing) msg += "\n  - " + s;
        throw DataError(msg);
    }
    return score_instances(instances, task, threshold);
}

}  // namespace dfx
