#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "deepfext/checkpoint.hpp"
#include "deepfext/dataset.hpp"
#include "deepfext/image_io.hpp"
#include "deepfext/metrics.hpp"
#include "deepfext/model.hpp"
#include "deepfext/skeleton.hpp"
#include "deepfext/training.hpp"

namespace fs = std::filesystem;
using namespace dfx;

namespace {

Tensor to_rgb(Tensor img) {
    if (img.shape[0] == 3) return img;
    if (img.shape[0] != 1) {
        throw DataError("expected a grayscale or RGB image, got " + img.shape.str());
    }
    Tensor rgb(Shape{3, img.shape[1], img.shape[2]});
    const std::int64_t plane = img.shape[1] * img.shape[2];
    for (int c = 0; c < 3; ++c) {
        std::copy_n(img.values.begin(), plane, rgb.values.begin() + c * plane);
    }
    return rgb;
}

std::vector<fs::path> gather_inputs(const std::string& input) {
    if (fs::is_regular_file(input)) return {fs::path(input)};
    if (!fs::is_directory(input)) throw DataError("input path does not exist: " + input);
    static const std::set<std::string> exts = {".png", ".ppm", ".pgm", ".pnm"};
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(input)) {
        if (e.is_regular_file() && exts.count(e.path().extension().string())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no decodable images (.png/.ppm/.pgm) under: " + input);
    return out;
}

std::vector<std::string> class_names(const std::string& task) {
    if (task == "vessel") return {"background", "vessel"};
    if (task == "centerline") return {"background", "centerline"};
    return {"background", "vessel", "centerline"};
}

struct TrainArgs {
    std::string config, dataset, layout = "custom", task = "vessel", out;
    std::int64_t seed = -1;
};

int run_train(const TrainArgs& a) {
    nlohmann::json jcfg = nlohmann::json::object();
    if (!a.config.empty()) {
        std::ifstream f(a.config);
        if (!f) throw DataError("cannot open config file: " + a.config);
        jcfg = nlohmann::json::parse(f, nullptr, false);
        if (jcfg.is_discarded()) throw ConfigError("config file is not valid JSON: " + a.config);
    }
    TrainConfig cfg = TrainConfig::from_json(jcfg);
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);

    FextNetworkSpec net_spec;
    if (jcfg.contains("network") && jcfg["network"].is_object()) {
        net_spec = FextNetworkSpec::from_json(jcfg["network"]);
    } else {
        net_spec = spec_from_name_or_json(jcfg.value("network", std::string("fext5-100")));
    }
    const int K = num_classes_for_task(a.task);
    MeshHeadSpec head_spec =
        jcfg.contains("head") ? MeshHeadSpec::from_json(jcfg["head"]) : MeshHeadSpec::defaults(K);

    auto [train_split, test_split] = load_dataset(a.dataset, layout_from_string(a.layout));
    const bool want_centerline = a.task != "vessel";
    std::vector<LabeledImage> images;
    for (const auto& item : train_split.items) images.push_back(load_item(item, want_centerline));
    if (images.empty()) throw DataError("training split '" + train_split.name + "' has no items");

    Model model(net_spec, head_spec, a.task, cfg.seed);
    TrainState st = train(model, images, cfg, a.out);
    std::printf("trained %lld steps; held-out loss %.4f -> %.4f; checkpoints in %s\n",
                static_cast<long long>(st.step), st.initial_eval_loss, st.final_eval_loss,
                a.out.c_str());
    return 0;
}

struct PredictArgs {
    std::string model, input, out;
    double threshold = 0.5;
    int bits = 8;
};

int run_predict(const PredictArgs& a) {
    Model model = Model::from_checkpoint(load_checkpoint(a.model));
    fs::create_directories(a.out);
    const auto names = class_names(model.task());
    for (const auto& path : gather_inputs(a.input)) {
        const std::string stem = path.stem().string();
        Tensor img = to_rgb(decode_image(path.string()));
        Tensor probs = model.predict(img);
        for (int k = 0; k < model.num_classes(); ++k) {
            write_png_gray((fs::path(a.out) / (stem + "_prob_" + names[static_cast<std::size_t>(k)] + ".png")).string(),
                           Model::class_prob(probs, k), a.bits);
        }
        GrayMap fg = Model::foreground_prob(probs, model.task());
        write_mask_png((fs::path(a.out) / (stem + "_mask.png")).string(), threshold_map(fg, a.threshold));
        if (model.num_classes() > 2) {
            write_labels_png((fs::path(a.out) / (stem + "_argmax.png")).string(), Model::argmax_map(probs));
        }
        std::printf("predicted %s\n", stem.c_str());
    }
    return 0;
}

struct EvalArgs {
    std::string pred, gt, fov, task = "vessel", report;
    double threshold = 0.5;
};

int run_eval(const EvalArgs& a) {
    MetricsReport report = evaluate(a.pred, a.gt, a.fov, a.task, a.threshold);
    std::fputs(report.table().c_str(), stdout);
    if (!a.report.empty()) {
        write_file_atomic(a.report, report.to_json().dump(2) + "\n");
        std::printf("report written to %s\n", a.report.c_str());
    }
    return 0;
}

struct FuseArgs {
    std::vector<std::string> models;
    std::string input, out;
    double threshold = 0.5;
    int bits = 8;
};

int run_fuse(const FuseArgs& a) {
    std::vector<Model> members;
    for (const auto& m : a.models) members.push_back(Model::from_checkpoint(load_checkpoint(m)));
    bool all_centerline = true, all_vessel_like = true;
    for (const auto& m : members) {
        all_centerline = all_centerline && m.task() == "centerline";
        all_vessel_like = all_vessel_like && (m.task() == "vessel" || m.task() == "both");
    }
    if (!all_centerline && !all_vessel_like) {
        throw ConfigError("fuse members have incompatible class semantics: mixing centerline-only "
                          "models with vessel models is not meaningful");
    }
    const std::string fused_class = all_centerline ? "centerline" : "vessel";
    fs::create_directories(a.out);
    for (const auto& path : gather_inputs(a.input)) {
        const std::string stem = path.stem().string();
        Tensor img = to_rgb(decode_image(path.string()));
        GrayMap fused;
        for (std::size_t i = 0; i < members.size(); ++i) {
            Tensor probs = members[i].predict(img);
            GrayMap fg = Model::foreground_prob(probs, members[i].task());
            if (i == 0) {
                fused = std::move(fg);
            } else {
                for (std::size_t j = 0; j < fused.px.size(); ++j) fused.px[j] += fg.px[j];
            }
        }
        const float inv = 1.0f / static_cast<float>(members.size());
        for (float& v : fused.px) v *= inv;
        write_png_gray((fs::path(a.out) / (stem + "_prob_" + fused_class + ".png")).string(), fused, a.bits);
        write_mask_png((fs::path(a.out) / (stem + "_mask.png")).string(), threshold_map(fused, a.threshold));
        std::printf("fused %s (%zu models)\n", stem.c_str(), members.size());
    }
    return 0;
}

struct InspectArgs {
    std::string model, input, out;
    std::uint64_t seed = 1;
};

int run_inspect(const InspectArgs& a) {
    Tensor img = to_rgb(decode_image(a.input));
    fs::create_directories(a.out);
    std::vector<GrayMap> maps;
    if (!a.model.empty()) {
        Model m = Model::from_checkpoint(load_checkpoint(a.model));
        maps = export_feature_maps(m.net(), m.normalize(img));
    } else {
        FextNetwork net(fext5_100_preset(), a.seed);
        maps = export_feature_maps(net, img);
    }
    for (std::size_t i = 0; i < maps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "feat_%03zu.png", i);
        write_png_gray((fs::path(a.out) / name).string(), maps[i], 8);
    }
    std::printf("wrote %zu feature maps to %s\n", maps.size(), a.out.c_str());
    return 0;
}

struct SkelArgs {
    std::string input, out;
};

int run_skeletonize(const SkelArgs& a) {
    BinaryMap mask = decode_mask(a.input);
    write_mask_png(a.out, skeletonize(mask));
    std::printf("skeleton written to %s\n", a.out.c_str());
    return 0;
}

struct PrepareArgs {
    std::string dataset, layout = "custom";
};

int run_prepare(const PrepareArgs& a) {
    auto [train_split, test_split] = load_dataset(a.dataset, layout_from_string(a.layout));
    const int n_train = prepare_centerline_cache(train_split);
    const int n_test = prepare_centerline_cache(test_split);
    std::printf("cached %d centerline masks (%d train, %d test)\n", n_train + n_test, n_train, n_test);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deepfext: multi-scale feature-extraction toolkit for vessel and centerline segmentation"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* cmd_train = app.add_subcommand("train", "train a model end-to-end on a dataset split");
    cmd_train->add_option("--config", train_args.config, "JSON training config (see README)");
    cmd_train->add_option("--dataset", train_args.dataset, "dataset root directory")->required();
    cmd_train->add_option("--layout", train_args.layout, "drive|stare|custom")->check(CLI::IsMember({"drive", "stare", "custom"}));
    cmd_train->add_option("--task", train_args.task, "vessel|centerline|both")->check(CLI::IsMember({"vessel", "centerline", "both"}));
    cmd_train->add_option("--out", train_args.out, "output directory for checkpoints and log")->required();
    cmd_train->add_option("--seed", train_args.seed, "override the config seed");

    PredictArgs predict_args;
    auto* cmd_predict = app.add_subcommand("predict", "write probability maps and masks for images");
    cmd_predict->add_option("--model", predict_args.model, "checkpoint file")->required();
    cmd_predict->add_option("--input", predict_args.input, "image file or directory")->required();
    cmd_predict->add_option("--out", predict_args.out, "output directory")->required();
    cmd_predict->add_option("--threshold", predict_args.threshold, "mask threshold (default 0.5)");
    cmd_predict->add_option("--bits", predict_args.bits, "probability map depth, 8 or 16")->check(CLI::IsMember({8, 16}));

    EvalArgs eval_args;
    auto* cmd_eval = app.add_subcommand("eval", "score predictions against ground truth");
    cmd_eval->add_option("--pred", eval_args.pred, "prediction directory")->required();
    cmd_eval->add_option("--gt", eval_args.gt, "ground-truth mask directory")->required();
    cmd_eval->add_option("--fov", eval_args.fov, "optional field-of-view mask directory");
    cmd_eval->add_option("--task", eval_args.task, "vessel|centerline|both")->check(CLI::IsMember({"vessel", "centerline", "both"}));
    cmd_eval->add_option("--report", eval_args.report, "write the JSON report here");
    cmd_eval->add_option("--threshold", eval_args.threshold, "operating threshold (default 0.5)");

    FuseArgs fuse_args;
    auto* cmd_fuse = app.add_subcommand("fuse", "average probability maps from several models");
    cmd_fuse->add_option("--models", fuse_args.models, "checkpoint files")->required()->expected(2, -1);
    cmd_fuse->add_option("--input", fuse_args.input, "image file or directory")->required();
    cmd_fuse->add_option("--out", fuse_args.out, "output directory")->required();
    cmd_fuse->add_option("--threshold", fuse_args.threshold, "mask threshold (default 0.5)");
    cmd_fuse->add_option("--bits", fuse_args.bits, "probability map depth, 8 or 16")->check(CLI::IsMember({8, 16}));

    InspectArgs inspect_args;
    auto* cmd_inspect = app.add_subcommand("inspect-features", "export per-channel feature images");
    cmd_inspect->add_option("--model", inspect_args.model, "checkpoint file (omit for a fresh seeded network)");
    cmd_inspect->add_option("--seed", inspect_args.seed, "init seed when no checkpoint is given");
    cmd_inspect->add_option("--input", inspect_args.input, "image file")->required();
    cmd_inspect->add_option("--out", inspect_args.out, "output directory")->required();

    SkelArgs skel_args;
    auto* cmd_skel = app.add_subcommand("skeletonize", "thin a binary mask to its centerline");
    cmd_skel->add_option("--input", skel_args.input, "mask image file")->required();
    cmd_skel->add_option("--out", skel_args.out, "output mask file (png)")->required();

    PrepareArgs prepare_args;
    auto* cmd_prepare = app.add_subcommand("prepare", "generate the centerline ground-truth cache");
    cmd_prepare->add_option("--dataset", prepare_args.dataset, "dataset root directory")->required();
    cmd_prepare->add_option("--layout", prepare_args.layout, "drive|stare|custom")->check(CLI::IsMember({"drive", "stare", "custom"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (cmd_train->parsed()) return run_train(train_args);
        if (cmd_predict->parsed()) return run_predict(predict_args);
        if (cmd_eval->parsed()) return run_eval(eval_args);
        if (cmd_fuse->parsed()) return run_fuse(fuse_args);
        if (cmd_inspect->parsed()) return run_inspect(inspect_args);
        if (cmd_skel->parsed()) return run_skeletonize(skel_args);
        if (cmd_prepare->parsed()) return run_prepare(prepare_args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const TrainingAbort& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 0;
}
