#include "deepfext/mesh_head.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "deepfext/parallel.hpp"

namespace dfx {

void MeshHeadSpec::validate() const {
    if (mesh_h < 1 || mesh_w < 1) throw ConfigError("mesh dims must be positive");
    if (conv_layers.size() != 3) {
        throw ConfigError("mesh head requires exactly 3 conv layers, got " +
                          std::to_string(conv_layers.size()));
    }
    if (num_classes != 2 && num_classes != 3) {
        throw ConfigError("num_classes must be 2 or 3, got " + std::to_string(num_classes));
    }
    for (const auto& c : conv_layers) {
        if (c.out_channels < 1) throw ConfigError("head conv out_channels must be positive");
        if (c.kernel < 1 || c.kernel % 2 == 0) throw ConfigError("head conv kernels must be odd");
    }
    if (conv_layers.back().out_channels != num_classes) {
        throw ConfigError("final head conv must emit num_classes channels");
    }
}

void MeshHeadSpec::validate_against(int feature_count) const {
    validate();
    if (mesh_h * mesh_w != feature_count) {
        throw ConfigError("mesh " + std::to_string(mesh_h) + "x" + std::to_string(mesh_w) +
                          " cannot hold " + std::to_string(feature_count) + " features per pixel");
    }
}

nlohmann::json MeshHeadSpec::to_json() const {
    nlohmann::json j;
    j["mesh_h"] = mesh_h;
    j["mesh_w"] = mesh_w;
    j["num_classes"] = num_classes;
    j["conv_layers"] = nlohmann::json::array();
    for (const auto& c : conv_layers) {
        j["conv_layers"].push_back({{"out", c.out_channels}, {"kernel", c.kernel}});
    }
    return j;
}

MeshHeadSpec MeshHeadSpec::from_json(const nlohmann::json& j) {
    MeshHeadSpec s;
    s.mesh_h = j.value("mesh_h", 10);
    s.mesh_w = j.value("mesh_w", 10);
    s.num_classes = j.value("num_classes", 2);
    if (j.contains("conv_layers")) {
        s.conv_layers.clear();
        for (const auto& jc : j.at("conv_layers")) {
            s.conv_layers.push_back({jc.at("out").get<int>(), jc.at("kernel").get<int>()});
        }
    } else {
        s.conv_layers.back().out_channels = s.num_classes;
    }
    s.validate();
    return s;
}

MeshHeadSpec MeshHeadSpec::defaults(int num_classes) {
    MeshHeadSpec s;
    s.num_classes = num_classes;
    s.conv_layers = {{8, 3}, {8, 3}, {num_classes, 3}};
    s.validate();
    return s;
}

MeshHead::MeshHead(MeshHeadSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    WeightRng rng(seed);
    int in_ch = 1;
    for (const auto& c : spec_.conv_layers) {
        ConvKernel k(c.out_channels, in_ch, c.kernel, c.kernel);
        init_he_uniform(k, rng);
        convs_.push_back(std::move(k));
        in_ch = c.out_channels;
    }
}

NodeId MeshHead::forward_meshes(Graph& g, NodeId meshes) const {
    NodeId cur = meshes;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        cur = g.conv2d_same(cur, convs_[i]);
        if (i + 1 < convs_.size()) cur = g.relu(cur);
    }
    return g.global_avg_pool(cur);
}

NodeId MeshHead::forward_features(Graph& g, NodeId features) const {
    const Tensor& f = g.value(features);
    spec_.validate_against(static_cast<int>(f.shape[1]));
    const std::int64_t N = f.shape[0], H = f.shape[2], W = f.shape[3];
    NodeId meshes = g.to_mesh(features, spec_.mesh_h, spec_.mesh_w);
    NodeId scores = forward_meshes(g, meshes);
    return g.from_pixels(scores, N, H, W);
}

std::vector<TensorPtr> MeshHead::parameters() const {
    std::vector<TensorPtr> out;
    for (const auto& k : convs_) {
        out.push_back(k.weights);
        out.push_back(k.bias);
    }
    return out;
}

std::int64_t MeshHead::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
}

int network_halo(const FextNetworkSpec& spec) {
    int halo = 0;
    for (const auto& l : spec.layers) {
        int mx = 0;
        for (const auto& b : l.branches) mx = std::max(mx, b.scale);
        halo += (mx - 1) / 2;
    }
    return halo;
}

namespace {

int max_branch_scale(const FextNetworkSpec& spec) {
    int mx = 0;
    for (const auto& l : spec.layers) {
        for (const auto& b : l.branches) mx = std::max(mx, b.scale);
    }
    return mx;
}

// Softmax over the class axis of (1,K,rows,W) logits into out rows
// [row0, row0+rows).
void softmax_into(const Tensor& logits, Tensor& out, std::int64_t row0) {
    const std::int64_t K = logits.shape[1], H = logits.shape[2], W = logits.shape[3];
    const std::int64_t out_h = out.shape[1], out_w = out.shape[2];
    const float* lv = logits.values.data();
    float* ov = out.values.data();
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            double mx = lv[y * W + x];
            for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(lv[(k * H + y) * W + x]));
            double denom = 0.0;
            for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(lv[(k * H + y) * W + x]) - mx);
            for (std::int64_t k = 0; k < K; ++k) {
                const double p = std::exp(static_cast<double>(lv[(k * H + y) * W + x]) - mx) / denom;
                ov[(k * out_h + row0 + y) * out_w + x] = static_cast<float>(p);
            }
        }
    }
}

}  // namespace

Tensor predict_probabilities(const Tensor& image, const FextNetwork& net, const MeshHead& head,
                             std::int64_t band_pixel_budget) {
    if (image.shape.rank() != 3) {
        throw ShapeError("predict expects a (C,H,W) image, got " + image.shape.str());
    }
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    const int min_side = max_branch_scale(net.spec());
    if (H < min_side || W < min_side) {
        throw DataError("image " + std::to_string(H) + "x" + std::to_string(W) +
                        " is smaller than the largest convolution scale " + std::to_string(min_side) +
                        "x" + std::to_string(min_side) + "; pad the input before predicting");
    }
    const int K = head.spec().num_classes;
    Tensor probs(Shape{K, H, W});

    const int halo = network_halo(net.spec());
    // The extraction graph retains every intermediate tensor until its band
    // is done, so cap the extended band extent.
    std::int64_t core_rows =
        std::max<std::int64_t>(1, band_pixel_budget / std::max<std::int64_t>(1, W) - 2 * halo);
    core_rows = std::min<std::int64_t>(core_rows, H);
    const std::int64_t head_chunk = std::max<std::int64_t>(512, 8 * W);

    for (std::int64_t y0 = 0; y0 < H; y0 += core_rows) {
        const std::int64_t y1 = std::min(H, y0 + core_rows);
        const std::int64_t ey0 = std::max<std::int64_t>(0, y0 - halo);
        const std::int64_t ey1 = std::min<std::int64_t>(H, y1 + halo);
        const std::int64_t eh = ey1 - ey0;

        // features for the extended band, then crop back to the core rows
        Tensor feat_core;
        {
            auto band = make_tensor(Shape{1, C, eh, W});
            for (std::int64_t c = 0; c < C; ++c) {
                std::copy_n(image.values.data() + (c * H + ey0) * W, eh * W,
                            band->values.data() + c * eh * W);
            }
            Graph g;
            NodeId feats = net.forward(g, g.leaf(band));
            const Tensor& f = g.value(feats);
            const std::int64_t F = f.shape[1];
            feat_core = Tensor(Shape{1, F, y1 - y0, W});
            for (std::int64_t c = 0; c < F; ++c) {
                std::copy_n(f.values.data() + (c * eh + (y0 - ey0)) * W, (y1 - y0) * W,
                            feat_core.values.data() + c * (y1 - y0) * W);
            }
        }

        // per-pixel head over the core band, in row chunks
        const std::int64_t ch = feat_core.shape[2];
        const std::int64_t rows_per_chunk = std::max<std::int64_t>(1, head_chunk / W);
        for (std::int64_t r0 = 0; r0 < ch; r0 += rows_per_chunk) {
            const std::int64_t r1 = std::min(ch, r0 + rows_per_chunk);
            auto sub = make_tensor(Shape{1, feat_core.shape[1], r1 - r0, W});
            for (std::int64_t c = 0; c < feat_core.shape[1]; ++c) {
                std::copy_n(feat_core.values.data() + (c * ch + r0) * W, (r1 - r0) * W,
                            sub->values.data() + c * (r1 - r0) * W);
            }
            Graph g;
            NodeId logits = head.forward_features(g, g.leaf(sub));
            softmax_into(g.value(logits), probs, y0 + r0);
        }
    }
    return probs;
}

}  // namespace dfx
