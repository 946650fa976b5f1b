#include "deepfext/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deepfext/checkpoint.hpp"
#include "deepfext/graph.hpp"

namespace dfx {

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (patch_size < 23) {
        throw ConfigError("patch_size must be >= 23 (one full pass of the scale-11 stack), got " +
                          std::to_string(patch_size));
    }
    if (batch_pixels < 1) throw ConfigError("batch_pixels must be >= 1");
    if (epochs < 1 || patches_per_epoch < 1) throw ConfigError("epochs and patches_per_epoch must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (optimizer != "adam" && optimizer != "sgd_momentum") {
        throw ConfigError("optimizer must be adam or sgd_momentum, got '" + optimizer + "'");
    }
}

int TrainConfig::patches_per_step() const {
    const std::int64_t per_patch = static_cast<std::int64_t>(patch_size) * patch_size;
    return static_cast<int>(std::max<std::int64_t>(1, batch_pixels / per_patch));
}

std::int64_t TrainConfig::total_steps() const {
    const std::int64_t steps_per_epoch =
        std::max<std::int64_t>(1, (patches_per_epoch + patches_per_step() - 1) / patches_per_step());
    std::int64_t n = steps_per_epoch * epochs;
    if (max_steps > 0) n = std::min(n, max_steps);
    return n;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["optimizer"] = optimizer;
    j["learning_rate"] = learning_rate;
    j["momentum"] = momentum;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["batch_pixels"] = batch_pixels;
    j["patch_size"] = patch_size;
    j["epochs"] = epochs;
    j["patches_per_epoch"] = patches_per_epoch;
    j["checkpoint_every"] = checkpoint_every;
    j["border_margin"] = border_margin;
    if (!class_weights.empty()) j["class_weights"] = class_weights;
    if (max_steps > 0) j["max_steps"] = max_steps;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.seed = j.value("seed", c.seed);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.batch_pixels = j.value("batch_pixels", c.batch_pixels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patches_per_epoch = j.value("patches_per_epoch", c.patches_per_epoch);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.border_margin = j.value("border_margin", c.border_margin);
    c.class_weights = j.value("class_weights", c.class_weights);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.validate();
    return c;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file: " + path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
    return from_json(j);
}

int pixel_label(const LabeledImage& img, const std::string& task, int y, int x) {
    if (task == "vessel") return img.vessel_mask.at(y, x) ? 1 : 0;
    if (task == "centerline") {
        if (!img.centerline_mask) throw StateError("centerline mask not loaded for image " + img.id);
        return img.centerline_mask->at(y, x) ? 1 : 0;
    }
    if (!img.centerline_mask) throw StateError("centerline mask not loaded for image " + img.id);
    if (img.centerline_mask->at(y, x)) return 2;  // centerline takes precedence
    if (img.vessel_mask.at(y, x)) return 1;
    return 0;
}

std::vector<double> compute_class_weights(const std::vector<LabeledImage>& images,
                                          const std::string& task, int num_classes) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    std::int64_t total = 0;
    for (const auto& img : images) {
        const int h = img.vessel_mask.height, w = img.vessel_mask.width;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (img.fov_mask && !img.fov_mask->at(y, x)) continue;
                ++counts[static_cast<std::size_t>(pixel_label(img, task, y, x))];
                ++total;
            }
        }
    }
    std::vector<double> weights(static_cast<std::size_t>(num_classes));
    for (int k = 0; k < num_classes; ++k) {
        const double nk = static_cast<double>(std::max<std::int64_t>(1, counts[static_cast<std::size_t>(k)]));
        weights[static_cast<std::size_t>(k)] = static_cast<double>(total) / (num_classes * nk);
    }
    return weights;
}

void normalization_stats(const std::vector<LabeledImage>& images, std::vector<float>& mean,
                         std::vector<float>& stddev) {
    if (images.empty()) throw DataError("cannot fit normalization on an empty split");
    const int C = static_cast<int>(images.front().image.shape[0]);
    std::vector<double> sum(static_cast<std::size_t>(C), 0.0), sum2(static_cast<std::size_t>(C), 0.0);
    std::int64_t n = 0;
    for (const auto& img : images) {
        const std::int64_t h = img.image.shape[1], w = img.image.shape[2];
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                if (img.fov_mask && !img.fov_mask->at(static_cast<int>(y), static_cast<int>(x))) continue;
                ++n;
                for (int c = 0; c < C; ++c) {
                    const double v = img.image.at3(c, y, x);
                    sum[static_cast<std::size_t>(c)] += v;
                    sum2[static_cast<std::size_t>(c)] += v * v;
                }
            }
        }
    }
    mean.resize(static_cast<std::size_t>(C));
    stddev.resize(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        const double m = sum[static_cast<std::size_t>(c)] / static_cast<double>(n);
        const double var = std::max(0.0, sum2[static_cast<std::size_t>(c)] / static_cast<double>(n) - m * m);
        mean[static_cast<std::size_t>(c)] = static_cast<float>(m);
        stddev[static_cast<std::size_t>(c)] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
    }
}

namespace {

// uniform integer in [0,n) from the raw engine; avoids distribution objects
// whose sequences differ across standard libraries
std::uint64_t rand_below(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

}  // namespace

Patch sample_patch(const std::vector<LabeledImage>& images, const TrainConfig& cfg,
                   const std::string& task, const std::vector<double>& class_weights,
                   const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                   std::mt19937_64& rng) {
    if (images.empty()) throw DataError("cannot sample patches from an empty dataset");
    const int ps = cfg.patch_size;
    const LabeledImage& img = images[rand_below(rng, images.size())];
    const int H = static_cast<int>(img.image.shape[1]);
    const int W = static_cast<int>(img.image.shape[2]);
    if (ps > H || ps > W) {
        throw ConfigError("patch_size " + std::to_string(ps) + " exceeds image " + std::to_string(H) +
                          "x" + std::to_string(W) + " (id " + img.id + ")");
    }
    const int y0 = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(H - ps + 1)));
    const int x0 = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(W - ps + 1)));

    Patch p;
    p.image = Tensor(Shape{3, ps, ps});
    p.labels.resize(static_cast<std::size_t>(ps) * ps);
    p.weights.resize(static_cast<std::size_t>(ps) * ps);
    for (int c = 0; c < 3; ++c) {
        const float mean = norm_mean.empty() ? 0.0f : norm_mean[static_cast<std::size_t>(c)];
        const float inv = norm_std.empty() ? 1.0f : 1.0f / std::max(norm_std[static_cast<std::size_t>(c)], 1e-6f);
        for (int y = 0; y < ps; ++y) {
            for (int x = 0; x < ps; ++x) {
                p.image.at3(c, y, x) = (img.image.at3(c, y0 + y, x0 + x) - mean) * inv;
            }
        }
    }
    const int margin = cfg.border_margin;
    for (int y = 0; y < ps; ++y) {
        for (int x = 0; x < ps; ++x) {
            const int label = pixel_label(img, task, y0 + y, x0 + x);
            p.labels[static_cast<std::size_t>(y) * ps + x] = label;
            float w = static_cast<float>(class_weights[static_cast<std::size_t>(label)]);
            if (img.fov_mask && !img.fov_mask->at(y0 + y, x0 + x)) w = 0.0f;
            if (y < margin || x < margin || y >= ps - margin || x >= ps - margin) w = 0.0f;
            p.weights[static_cast<std::size_t>(y) * ps + x] = w;
        }
    }
    return p;
}

void apply_optimizer_step(const std::vector<TensorPtr>& params, const TrainConfig& cfg,
                          TrainState& state) {
    std::size_t total = 0;
    for (const auto& p : params) total += p->values.size();
    const std::size_t n_arrays = cfg.optimizer == "adam" ? 2 : 1;
    if (state.moments.size() != n_arrays) {
        state.moments.assign(n_arrays, std::vector<float>(total, 0.0f));
    }

    std::size_t off = 0;
    if (cfg.optimizer == "adam") {
        const double t = static_cast<double>(std::max<std::int64_t>(1, state.step));
        const double bc1 = 1.0 - std::pow(cfg.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (const auto& p : params) {
            if (!p->has_grad()) {
                off += p->values.size();
                continue;
            }
            for (std::size_t i = 0; i < p->values.size(); ++i) {
                const double g = p->grad[i];
                double m = state.moments[0][off + i];
                double v = state.moments[1][off + i];
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
                state.moments[0][off + i] = static_cast<float>(m);
                state.moments[1][off + i] = static_cast<float>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                p->values[i] = static_cast<float>(p->values[i] -
                                                  cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
            }
            off += p->values.size();
        }
    } else {  // sgd_momentum: v <- mu*v - lr*g, p <- p + v
        for (const auto& p : params) {
            if (!p->has_grad()) {
                // momentum still decays on dead parameters
                for (std::size_t i = 0; i < p->values.size(); ++i) {
                    const double v = cfg.momentum * state.moments[0][off + i];
                    state.moments[0][off + i] = static_cast<float>(v);
                    p->values[i] = static_cast<float>(p->values[i] + v);
                }
                off += p->values.size();
                continue;
            }
            for (std::size_t i = 0; i < p->values.size(); ++i) {
                const double v = cfg.momentum * state.moments[0][off + i] - cfg.learning_rate * p->grad[i];
                state.moments[0][off + i] = static_cast<float>(v);
                p->values[i] = static_cast<float>(p->values[i] + v);
            }
            off += p->values.size();
        }
    }
}

namespace {

struct Batch {
    TensorPtr images;
    std::vector<int> labels;
    std::vector<float> weights;
};

Batch assemble_batch(const std::vector<Patch>& patches) {
    const std::int64_t B = static_cast<std::int64_t>(patches.size());
    const std::int64_t ps = patches.front().image.shape[1];
    Batch b;
    b.images = make_tensor(Shape{B, 3, ps, ps});
    b.labels.reserve(static_cast<std::size_t>(B * ps * ps));
    b.weights.reserve(static_cast<std::size_t>(B * ps * ps));
    for (std::int64_t i = 0; i < B; ++i) {
        std::copy(patches[static_cast<std::size_t>(i)].image.values.begin(),
                  patches[static_cast<std::size_t>(i)].image.values.end(),
                  b.images->values.begin() + i * 3 * ps * ps);
        const auto& p = patches[static_cast<std::size_t>(i)];
        b.labels.insert(b.labels.end(), p.labels.begin(), p.labels.end());
        b.weights.insert(b.weights.end(), p.weights.begin(), p.weights.end());
    }
    return b;
}

double forward_loss(Model& model, const Batch& batch, Graph& g, NodeId* loss_out) {
    NodeId input = g.leaf(batch.images);
    NodeId feats = model.net().forward(g, input);
    NodeId logits = model.head().forward_features(g, feats);
    NodeId loss = g.softmax_cross_entropy(logits, batch.labels, batch.weights);
    if (loss_out) *loss_out = loss;
    return g.value(loss).values[0];
}

std::string serialize_rng(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw IntegrityError("cannot restore rng state from checkpoint");
}

Checkpoint make_checkpoint(const Model& model, const TrainConfig& cfg, const TrainState& state,
                           const std::mt19937_64& rng) {
    Checkpoint ck = model.to_checkpoint();
    ck.train_step = state.step;
    TrainerBlock tb;
    tb.optimizer = cfg.optimizer;
    tb.rng_state = serialize_rng(rng);
    tb.epoch = state.epoch;
    tb.running_loss = state.running_loss;
    tb.moments = state.moments;
    ck.trainer = tb;
    return ck;
}

}  // namespace

TrainState train(Model& model, const std::vector<LabeledImage>& images, const TrainConfig& cfg,
                 const std::string& out_dir, const TrainState* resume) {
    cfg.validate();
    if (images.empty()) throw DataError("training split is empty");
    const std::string& task = model.task();
    const int K = model.num_classes();

    std::vector<double> class_weights =
        cfg.class_weights.empty() ? compute_class_weights(images, task, K) : cfg.class_weights;
    if (static_cast<int>(class_weights.size()) != K) {
        throw ConfigError("class_weights needs " + std::to_string(K) + " entries");
    }
    if (model.norm_mean.empty()) {
        normalization_stats(images, model.norm_mean, model.norm_std);
    }

    std::mt19937_64 rng(cfg.seed);
    TrainState state;
    if (resume) {
        state = *resume;
        state.loss_history.clear();
        restore_rng(rng, state.rng_state);
    }

    // fixed held-out patches, drawn from an independent stream
    std::mt19937_64 eval_rng(cfg.seed ^ 0x65766131ull);
    std::vector<Patch> eval_patches;
    for (int i = 0; i < 8; ++i) {
        eval_patches.push_back(sample_patch(images, cfg, task, class_weights, model.norm_mean,
                                            model.norm_std, eval_rng));
    }
    auto eval_loss = [&]() {
        Batch b = assemble_batch(eval_patches);
        Graph g;
        return forward_loss(model, b, g, nullptr);
    };
    state.initial_eval_loss = eval_loss();

    namespace fs = std::filesystem;
    std::ofstream log;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        log.open(fs::path(out_dir) / "train.log", std::ios::app);
    }

    const std::int64_t steps_total = cfg.total_steps();
    const int ppstep = cfg.patches_per_step();
    const std::int64_t steps_per_epoch =
        std::max<std::int64_t>(1, (cfg.patches_per_epoch + ppstep - 1) / ppstep);
    auto params = model.parameters();

    double initial_loss = 0.0;
    int divergent_steps = 0;
    const auto t0 = std::chrono::steady_clock::now();

    while (state.step < steps_total) {
        std::vector<Patch> patches;
        patches.reserve(static_cast<std::size_t>(ppstep));
        for (int i = 0; i < ppstep; ++i) {
            patches.push_back(sample_patch(images, cfg, task, class_weights, model.norm_mean,
                                           model.norm_std, rng));
        }
        Batch batch = assemble_batch(patches);

        Graph g;
        NodeId loss_node = -1;
        const double loss = forward_loss(model, batch, g, &loss_node);
        if (!std::isfinite(loss)) {
            throw TrainingAbort("training aborted: loss is not finite", state.step, cfg.learning_rate);
        }
        if (state.step == 0 && !resume) initial_loss = loss;
        if (initial_loss > 0.0 && loss > 10.0 * initial_loss) {
            if (++divergent_steps >= 100) {
                throw TrainingAbort("training aborted: loss exceeded 10x its initial value for 100 consecutive steps",
                                    state.step, cfg.learning_rate);
            }
        } else {
            divergent_steps = 0;
        }

        for (const auto& p : params) p->zero_grad();
        g.backward(loss_node);

        state.step += 1;
        state.epoch = state.step / steps_per_epoch;
        apply_optimizer_step(params, cfg, state);
        state.running_loss = state.running_loss == 0.0 ? loss : 0.99 * state.running_loss + 0.01 * loss;
        state.loss_history.push_back(loss);

        if (log.is_open()) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            char line[128];
            std::snprintf(line, sizeof(line), "%lld %.6f %.6g %lld\n",
                          static_cast<long long>(state.step), loss, cfg.learning_rate,
                          static_cast<long long>(ms));
            log << line;
            log.flush();
        }

        if (!out_dir.empty() && state.step % cfg.checkpoint_every == 0) {
            state.rng_state = serialize_rng(rng);
            char name[64];
            std::snprintf(name, sizeof(name), "step_%06lld.dfxt", static_cast<long long>(state.step));
            save_checkpoint(make_checkpoint(model, cfg, state, rng), (fs::path(out_dir) / name).string());
        }
    }

    state.rng_state = serialize_rng(rng);
    model.train_step = state.step;
    if (!out_dir.empty()) {
        save_checkpoint(make_checkpoint(model, cfg, state, rng), (fs::path(out_dir) / "final.dfxt").string());
    }
    state.final_eval_loss = eval_loss();
    return state;
}

}  // namespace dfx
