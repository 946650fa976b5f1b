#pragma once

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "deepfext/dataset.hpp"
#include "deepfext/model.hpp"

namespace dfx {

struct TrainConfig {
    std::uint64_t seed = 1;
    std::string optimizer = "adam";  // adam | sgd_momentum
    double learning_rate = 1e-3;
    double momentum = 0.9;  // sgd_momentum
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::int64_t batch_pixels = 16384;  // pixel budget per step
    int patch_size = 64;                // >= 23: covers the scale-11 stack once
    int epochs = 40;
    int patches_per_epoch = 2000;
    std::vector<double> class_weights;  // empty = inverse frequency on the split
    std::int64_t checkpoint_every = 500;
    int border_margin = 11;   // loss weight zeroed within this of patch edges
    std::int64_t max_steps = -1;

    void validate() const;
    int patches_per_step() const;
    std::int64_t total_steps() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load_file(const std::string& path);
};

struct TrainState {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double running_loss = 0.0;
    std::string rng_state;                    // serialized mt19937_64
    std::vector<std::vector<float>> moments;  // optimizer moments, payload layout

    // in-memory diagnostics, not serialized
    std::vector<double> loss_history;
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
};

// Raised on NaN loss or sustained divergence; carries the abort diagnostics.
struct TrainingAbort : std::runtime_error {
    TrainingAbort(const std::string& msg, std::int64_t step, double lr)
        : std::runtime_error(msg + " (step " + std::to_string(step) + ", lr " + std::to_string(lr) + ")"),
          step(step),
          lr(lr) {}
    std::int64_t step;
    double lr;
};

struct Patch {
    Tensor image;               // (3,ps,ps), already normalized
    std::vector<int> labels;    // ps*ps
    std::vector<float> weights;  // ps*ps
};

// Inverse-frequency weights over the split's in-FOV pixels: w_k = n/(K*n_k).
std::vector<double> compute_class_weights(const std::vector<LabeledImage>& images,
                                          const std::string& task, int num_classes);

// Class labels under the task encoding (both: background 0, vessel 1,
// centerline 2, centerline takes precedence).
int pixel_label(const LabeledImage& img, const std::string& task, int y, int x);

Patch sample_patch(const std::vector<LabeledImage>& images, const TrainConfig& cfg,
                   const std::string& task, const std::vector<double>& class_weights,
                   const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                   std::mt19937_64& rng);

// Per-channel mean/std over in-FOV pixels of the split.
void normalization_stats(const std::vector<LabeledImage>& images, std::vector<float>& mean,
                         std::vector<float>& stddev);

// One optimizer update over the model parameters; moments live in `state`.
// `state.step` must already count this step (bias correction uses it).
void apply_optimizer_step(const std::vector<TensorPtr>& params, const TrainConfig& cfg,
                          TrainState& state);

// End-to-end optimization. Writes step_NNNNNN.dfxt checkpoints every
// checkpoint_every steps plus a tagged final.dfxt, and appends
// "step loss lr elapsed_ms" lines to <out_dir>/train.log (out_dir empty =
// no files). Resumes from `resume` when given.
TrainState train(Model& model, const std::vector<LabeledImage>& images, const TrainConfig& cfg,
                 const std::string& out_dir, const TrainState* resume = nullptr);

}  // namespace dfx
