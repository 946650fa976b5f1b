#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "deepfext/maps.hpp"

namespace dfx {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::int64_t total() const { return tp + fp + fn + tn; }
};

// Pixel counts over fov==1 (all pixels when fov is null).
ConfusionCounts confusion(const BinaryMap& pred, const BinaryMap& gt, const BinaryMap* fov);

// p = tp/(tp+fp), r = tp/(tp+fn), f1 = 2pr/(p+r). Empty-positive conventions:
// p (or r) is 1 when its denominator is 0; f1 is 0 when p + r == 0.
struct PrfScores {
    double precision = 0, recall = 0, f1 = 0;
};
PrfScores precision_recall_f1(const ConfusionCounts& c);

// Chance-corrected agreement. p_e == 1 (single class on both sides) maps to
// 1 when p_o == 1, else 0.
double cohens_kappa(const ConfusionCounts& c);

// A pixel counts as positive when prob >= threshold.
BinaryMap threshold_map(const GrayMap& prob, double threshold);

double dice_at(const GrayMap& prob, const BinaryMap& gt, const BinaryMap* fov, double threshold);

// Dice maximized over the 99-point grid {0.01,...,0.99}.
struct MaxDice {
    double dice = 0;
    double best_threshold = 0;
};
MaxDice max_dice_over_grid(const GrayMap& prob, const BinaryMap& gt, const BinaryMap* fov);

double average_max_dice(const std::vector<GrayMap>& probs, const std::vector<BinaryMap>& gts,
                        const std::vector<const BinaryMap*>& fovs,
                        std::vector<double>* best_thresholds = nullptr);

struct ImageScore {
    std::string id;
    double precision = 0, recall = 0, f1 = 0, max_dice = 0, best_threshold = 0, kappa = 0;
};

// Per-image rows plus an aggregate row. Aggregate precision/recall/f1/kappa
// are pooled over all in-FOV pixels; aggregate max_dice is the mean of the
// per-image maxima ("average maximum Dice").
struct MetricsReport {
    std::string task;
    double threshold_used = 0.5;
    std::vector<ImageScore> per_image;
    ImageScore aggregate;

    nlohmann::json to_json() const;
    std::string table() const;  // fixed-width five-column listing
};

// One evaluation unit: probability map(s) against ground-truth mask(s).
// Binary tasks carry one entry; the joint task carries {vessel, centerline}
// scored one-vs-rest and macro-averaged.
struct EvalInstance {
    std::string id;
    std::vector<GrayMap> class_probs;
    std::vector<BinaryMap> class_gts;
    std::optional<BinaryMap> fov;
};

MetricsReport score_instances(const std::vector<EvalInstance>& instances, const std::string& task,
                              double threshold);

// Directory-driven evaluation. Ground truth masks are read from gt_dir;
// centerline ground truth is derived by skeletonization in memory. Prediction
// files pair by id token; multi-class predictions use *_prob_vessel /
// *_prob_centerline maps, or a single mask per id that is split by
// skeletonization the same way the ground truth is.
MetricsReport evaluate(const std::string& pred_dir, const std::string& gt_dir,
                       const std::string& fov_dir, const std::string& task, double threshold);

}  // namespace dfx
