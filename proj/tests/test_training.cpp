#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "deepfext/checkpoint.hpp"
#include "deepfext/metrics.hpp"
#include "deepfext/training.hpp"
#include "fixtures.hpp"

using namespace dfx;
namespace fs = std::filesystem;

namespace {

// Small 9-feature network (mesh 3x3) so training steps stay cheap.
FextNetworkSpec tiny_net() {
    FextNetworkSpec spec;
    spec.layers = {{3, {{3, 2}, {5, 1}}}, {3, {{3, 3}}}};
    spec.include_input_passthrough = true;  // 3 + 3 + 3 = 9
    return spec;
}

MeshHeadSpec tiny_head(int k) {
    MeshHeadSpec hs;
    hs.mesh_h = 3;
    hs.mesh_w = 3;
    hs.num_classes = k;
    hs.conv_layers = {{4, 3}, {4, 3}, {k, 3}};
    return hs;
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.patch_size = 24;
    cfg.batch_pixels = 24 * 24;
    cfg.epochs = 1;
    cfg.patches_per_epoch = 40;
    cfg.checkpoint_every = 10;
    cfg.border_margin = 4;
    cfg.learning_rate = 2e-3;
    return cfg;
}

std::vector<LabeledImage> tiny_images(int n = 2) {
    std::vector<LabeledImage> out;
    for (int i = 0; i < n; ++i) {
        fixtures::SyntheticImage s = fixtures::make_vessel_image(48, 48, static_cast<std::uint64_t>(i));
        LabeledImage li;
        li.id = "img" + std::to_string(i);
        li.image = std::move(s.image);
        li.vessel_mask = std::move(s.mask);
        out.push_back(std::move(li));
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config validation and file round trip") {
    TrainConfig cfg;
    cfg.validate();
    TrainConfig bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.patch_size = 22;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.batch_pixels = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.optimizer = "lbfgs";
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.learning_rate == cfg.learning_rate);
    CHECK(back.patch_size == cfg.patch_size);
    CHECK(back.patches_per_step() == cfg.patches_per_step());

    // spec defaults: 64px patches, four per step, 2000-patch epochs
    CHECK(cfg.patch_size == 64);
    CHECK(cfg.patches_per_step() == 4);
    CHECK(cfg.total_steps() == 40 * 500);
}

TEST_CASE("sgd step: mu=0, lr=1, g=2 moves p from 0 to -2") {
    TrainConfig cfg;
    cfg.optimizer = "sgd_momentum";
    cfg.momentum = 0.0;
    cfg.learning_rate = 1.0;
    auto p = make_tensor(Shape{1}, {0.0f});
    p->ensure_grad();
    p->grad[0] = 2.0f;
    TrainState st;
    st.step = 1;
    apply_optimizer_step({p}, cfg, st);
    CHECK(p->values[0] == -2.0f);
}

TEST_CASE("zero gradient and zero learning rate are fixed points") {
    for (const char* opt : {"sgd_momentum", "adam"}) {
        TrainConfig cfg;
        cfg.optimizer = opt;
        cfg.momentum = 0.0;
        auto p = make_tensor(Shape{3}, {1.0f, -2.0f, 0.5f});
        p->ensure_grad();
        TrainState st;
        st.step = 1;
        apply_optimizer_step({p}, cfg, st);
        CHECK(p->values == std::vector<float>{1.0f, -2.0f, 0.5f});

        // zero learning rate leaves parameters bit-identical for any gradient
        TrainConfig frozen;
        frozen.optimizer = opt;
        frozen.learning_rate = 0.0;
        frozen.momentum = 0.0;
        p->grad = {3.0f, -1.0f, 7.0f};
        TrainState st2;
        for (int step = 1; step <= 5; ++step) {
            st2.step = step;
            apply_optimizer_step({p}, frozen, st2);
        }
        CHECK(p->values == std::vector<float>{1.0f, -2.0f, 0.5f});
    }
}

TEST_CASE("adam first step magnitude never exceeds the learning rate") {
    std::mt19937_64 rng(11);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    auto p = make_tensor(Shape{64});
    p->ensure_grad();
    for (std::size_t i = 0; i < 64; ++i) {
        p->values[i] = static_cast<float>((rng() >> 11) * 0x1.0p-53 - 0.5);
        p->grad[i] = static_cast<float>(((rng() >> 11) * 0x1.0p-53 - 0.5) * 10.0);
    }
    const std::vector<float> before = p->values;
    TrainState st;
    st.step = 1;
    apply_optimizer_step({p}, cfg, st);
    for (std::size_t i = 0; i < 64; ++i) {
        CHECK(std::abs(p->values[i] - before[i]) <= cfg.learning_rate * 1.001);  // f32 storage rounding
    }
}

TEST_CASE("class weights equalize expected per-class loss contribution") {
    // 90%-background dataset with vessels scattered uniformly, so patch
    // coverage treats both classes alike
    std::mt19937_64 gen(17);
    std::vector<LabeledImage> images;
    for (int i = 0; i < 2; ++i) {
        LabeledImage li;
        li.id = "scatter" + std::to_string(i);
        li.image = Tensor(Shape{3, 64, 64});
        li.vessel_mask = BinaryMap(64, 64);
        for (int dot = 0; dot < 100; ++dot) {
            const int y = static_cast<int>(gen() % 62);
            const int x = static_cast<int>(gen() % 62);
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) li.vessel_mask.at(y + dy, x + dx) = 1;
        }
        images.push_back(std::move(li));
    }
    auto weights = compute_class_weights(images, "vessel", 2);
    REQUIRE(weights.size() == 2);
    // weighted pixel mass per class is equal by construction
    std::int64_t counts[2] = {0, 0};
    for (const auto& img : images) {
        for (int y = 0; y < img.vessel_mask.height; ++y) {
            for (int x = 0; x < img.vessel_mask.width; ++x) ++counts[pixel_label(img, "vessel", y, x)];
        }
    }
    CHECK(static_cast<double>(counts[1]) / static_cast<double>(counts[0] + counts[1]) < 0.15);
    CHECK(static_cast<double>(counts[0]) * weights[0] ==
          doctest::Approx(static_cast<double>(counts[1]) * weights[1]));

    // measured over 1000 sampled patches the ratio stays close to 1
    TrainConfig cfg = tiny_config();
    cfg.border_margin = 0;
    std::mt19937_64 rng(3);
    double mass[2] = {0.0, 0.0};
    for (int i = 0; i < 1000; ++i) {
        Patch p = sample_patch(images, cfg, "vessel", weights, {}, {}, rng);
        for (std::size_t j = 0; j < p.labels.size(); ++j) {
            mass[p.labels[j]] += p.weights[j];
        }
    }
    const double ratio = mass[1] / mass[0];
    CHECK(ratio > 0.9);
    CHECK(ratio < 1.1);
}

TEST_CASE("sampling respects fov, borders and determinism") {
    auto images = tiny_images(1);
    BinaryMap fov(48, 48, 1);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 24; ++x) fov.at(y, x) = 0;  // left half masked out
    images[0].fov_mask = fov;

    TrainConfig cfg = tiny_config();
    std::vector<double> w = {1.0, 1.0};
    std::mt19937_64 rng(7);
    Patch p = sample_patch(images, cfg, "vessel", w, {}, {}, rng);
    // border margin zeroes the frame
    for (int x = 0; x < cfg.patch_size; ++x) {
        CHECK(p.weights[static_cast<std::size_t>(x)] == 0.0f);
        CHECK(p.weights[static_cast<std::size_t>((cfg.patch_size - 1) * cfg.patch_size + x)] == 0.0f);
    }

    std::mt19937_64 r1(42), r2(42);
    Patch a = sample_patch(images, cfg, "vessel", w, {}, {}, r1);
    Patch b = sample_patch(images, cfg, "vessel", w, {}, {}, r2);
    CHECK(a.image.values == b.image.values);
    CHECK(a.labels == b.labels);
    CHECK(a.weights == b.weights);

    TrainConfig too_big = cfg;
    too_big.patch_size = 100;
    CHECK_THROWS_AS(sample_patch(images, too_big, "vessel", w, {}, {}, rng), ConfigError);
}

TEST_CASE("fov-masked pixels contribute zero loss weight") {
    auto images = tiny_images(1);
    BinaryMap fov(48, 48, 0);  // everything outside the fov
    images[0].fov_mask = fov;
    TrainConfig cfg = tiny_config();
    cfg.border_margin = 0;
    std::mt19937_64 rng(9);
    Patch p = sample_patch(images, cfg, "vessel", {1.0, 1.0}, {}, {}, rng);
    for (float wv : p.weights) CHECK(wv == 0.0f);
}

TEST_CASE("normalization stats match a direct computation") {
    auto images = tiny_images(1);
    std::vector<float> mean, stddev;
    normalization_stats(images, mean, stddev);
    REQUIRE(mean.size() == 3);
    double sum = 0.0, sum2 = 0.0;
    for (int y = 0; y < 48; ++y) {
        for (int x = 0; x < 48; ++x) {
            const double v = images[0].image.at3(0, y, x);
            sum += v;
            sum2 += v * v;
        }
    }
    const double m = sum / (48 * 48);
    CHECK(mean[0] == doctest::Approx(m).epsilon(1e-6));
    CHECK(stddev[0] == doctest::Approx(std::sqrt(sum2 / (48 * 48) - m * m)).epsilon(1e-5));
}

TEST_CASE("training runs, logs, checkpoints, and its loss comes down") {
    fs::path out = fs::temp_directory_path() / "dfx_train_run";
    fs::remove_all(out);

    Model model(tiny_net(), tiny_head(2), "vessel", 5);
    TrainConfig cfg = tiny_config();
    TrainState st = train(model, tiny_images(), cfg, out.string());

    CHECK(st.step == cfg.total_steps());
    CHECK(st.loss_history.size() == static_cast<std::size_t>(st.step));
    CHECK(st.final_eval_loss < st.initial_eval_loss);
    CHECK(fs::exists(out / "final.dfxt"));
    CHECK(fs::exists(out / "step_000010.dfxt"));

    // log lines: "step loss lr elapsed_ms"
    std::ifstream log(out / "train.log");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        ++lines;
        long long step, ms;
        double loss, lr;
        CHECK(std::sscanf(line.c_str(), "%lld %lf %lf %lld", &step, &loss, &lr, &ms) == 4);
    }
    CHECK(lines == st.step);
    fs::remove_all(out);
}

TEST_CASE("same seed, same dataset: byte-identical checkpoints") {
    fs::path out1 = fs::temp_directory_path() / "dfx_det_a";
    fs::path out2 = fs::temp_directory_path() / "dfx_det_b";
    fs::remove_all(out1);
    fs::remove_all(out2);
    TrainConfig cfg = tiny_config();
    cfg.max_steps = 15;

    Model m1(tiny_net(), tiny_head(2), "vessel", cfg.seed);
    Model m2(tiny_net(), tiny_head(2), "vessel", cfg.seed);
    train(m1, tiny_images(), cfg, out1.string());
    train(m2, tiny_images(), cfg, out2.string());
    CHECK(slurp(out1 / "final.dfxt") == slurp(out2 / "final.dfxt"));
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("checkpoint resume reproduces the straight run bit-exactly") {
    fs::path out = fs::temp_directory_path() / "dfx_resume";
    fs::remove_all(out);
    TrainConfig cfg = tiny_config();
    cfg.checkpoint_every = 6;
    cfg.max_steps = 12;

    Model straight(tiny_net(), tiny_head(2), "vessel", cfg.seed);
    TrainState full = train(straight, tiny_images(), cfg, out.string());
    REQUIRE(full.loss_history.size() == 12);

    Checkpoint mid = load_checkpoint((out / "step_000006.dfxt").string());
    REQUIRE(mid.trainer.has_value());
    Model resumed = Model::from_checkpoint(mid);
    TrainState seed_state;
    seed_state.step = mid.train_step;
    seed_state.epoch = mid.trainer->epoch;
    seed_state.running_loss = mid.trainer->running_loss;
    seed_state.rng_state = mid.trainer->rng_state;
    seed_state.moments = mid.trainer->moments;
    TrainState rest = train(resumed, tiny_images(), cfg, "", &seed_state);

    REQUIRE(rest.loss_history.size() == 6);
    for (int i = 0; i < 6; ++i) {
        CHECK(rest.loss_history[static_cast<std::size_t>(i)] == full.loss_history[static_cast<std::size_t>(6 + i)]);
    }
    CHECK(resumed.flat_parameters() == straight.flat_parameters());
    fs::remove_all(out);
}

TEST_CASE("median loss over late steps is below the early median on the smoke problem") {
    Model model(tiny_net(), tiny_head(2), "vessel", 3);
    TrainConfig cfg = tiny_config();
    cfg.max_steps = 60;
    cfg.patches_per_epoch = 60;
    TrainState st = train(model, tiny_images(), cfg, "");
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    std::vector<double> early(st.loss_history.begin(), st.loss_history.begin() + 30);
    std::vector<double> late(st.loss_history.begin() + 30, st.loss_history.end());
    CHECK(median(late) < median(early));
}

TEST_CASE("runaway learning rates abort with a diagnostic") {
    Model model(tiny_net(), tiny_head(2), "vessel", 5);
    TrainConfig cfg = tiny_config();
    cfg.learning_rate = 1e6;
    cfg.max_steps = 400;
    cfg.patches_per_epoch = 400;
    CHECK_THROWS_AS(train(model, tiny_images(), cfg, ""), TrainingAbort);
}

}  // TEST_SUITE
