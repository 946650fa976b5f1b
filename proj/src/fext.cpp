#include "deepfext/fext.hpp"

#include <nlohmann/json.hpp>

namespace dfx {

std::int64_t MiniNetworkPlan::weight_param_count() const {
    std::int64_t n = 0;
    for (const auto& s : stages) {
        n += static_cast<std::int64_t>(s.out_channels) * s.in_channels * s.kernel_h * s.kernel_w;
    }
    return n;
}

std::int64_t MiniNetworkPlan::param_count() const {
    std::int64_t n = weight_param_count();
    for (const auto& s : stages) n += s.out_channels;
    return n;
}

MiniNetworkPlan factorize(int target_scale, int in_channels, int out_channels, bool refactor_3x3) {
    if (target_scale < 3 || target_scale % 2 == 0) {
        throw ConfigError("factorize target scale must be an odd integer >= 3, got " +
                          std::to_string(target_scale));
    }
    if (in_channels < 1 || out_channels < 1) {
        throw ConfigError("factorize channel counts must be positive");
    }
    MiniNetworkPlan plan;
    plan.target_scale = target_scale;
    const int n_3x3 = (target_scale - 1) / 2;  // one 3x3 per 2 pixels of receptive growth
    int in_ch = in_channels;
    for (int i = 0; i < std::max(1, n_3x3); ++i) {
        if (refactor_3x3) {
            plan.stages.push_back({1, 3, in_ch, out_channels});
            plan.stages.push_back({3, 1, out_channels, out_channels});
        } else {
            plan.stages.push_back({3, 3, in_ch, out_channels});
        }
        in_ch = out_channels;
    }
    return plan;
}

std::pair<int, int> receptive_field(const MiniNetworkPlan& plan) {
    int h = 1, w = 1;
    for (const auto& s : plan.stages) {
        h += s.kernel_h - 1;
        w += s.kernel_w - 1;
    }
    return {h, w};
}

int FextLayerSpec::out_channels() const {
    int n = 0;
    for (const auto& b : branches) n += b.out_features;
    return n;
}

void FextNetworkSpec::validate() const {
    if (layers.empty()) throw ConfigError("feature network needs at least one layer");
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& layer = layers[li];
        if (layer.in_channels < 1) throw ConfigError("layer in_channels must be positive");
        if (layer.branches.empty()) throw ConfigError("layer needs at least one scale branch");
        for (const auto& b : layer.branches) {
            if (b.scale < 3 || b.scale % 2 == 0) {
                throw ConfigError("branch scale must be odd >= 3, got " + std::to_string(b.scale));
            }
            if (b.out_features < 1) throw ConfigError("branch out_features must be positive");
        }
        if (li > 0 && layer.in_channels != layers[li - 1].out_channels()) {
            throw ConfigError("layer " + std::to_string(li + 1) + " expects " +
                              std::to_string(layer.in_channels) + " channels but layer " +
                              std::to_string(li) + " emits " +
                              std::to_string(layers[li - 1].out_channels()));
        }
    }
}

int FextNetworkSpec::feature_count() const {
    int n = include_input_passthrough ? input_channels() : 0;
    for (const auto& l : layers) n += l.out_channels();
    return n;
}

std::vector<int> FextNetworkSpec::channel_blocks() const {
    std::vector<int> blocks;
    if (include_input_passthrough) blocks.push_back(input_channels());
    for (const auto& l : layers) blocks.push_back(l.out_channels());
    return blocks;
}

nlohmann::json FextNetworkSpec::to_json() const {
    nlohmann::json j;
    j["passthrough"] = include_input_passthrough;
    j["refactor_3x3"] = refactor_3x3;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json jl;
        jl["in_channels"] = l.in_channels;
        jl["branches"] = nlohmann::json::array();
        for (const auto& b : l.branches) {
            jl["branches"].push_back({{"scale", b.scale}, {"features", b.out_features}});
        }
        j["layers"].push_back(jl);
    }
    return j;
}

FextNetworkSpec FextNetworkSpec::from_json(const nlohmann::json& j) {
    FextNetworkSpec spec;
    spec.include_input_passthrough = j.value("passthrough", true);
    spec.refactor_3x3 = j.value("refactor_3x3", false);
    for (const auto& jl : j.at("layers")) {
        FextLayerSpec l;
        l.in_channels = jl.at("in_channels").get<int>();
        for (const auto& jb : jl.at("branches")) {
            l.branches.push_back({jb.at("scale").get<int>(), jb.at("features").get<int>()});
        }
        spec.layers.push_back(std::move(l));
    }
    spec.validate();
    return spec;
}

FextNetworkSpec fext5_100_preset() {
    FextNetworkSpec spec;
    auto wide = std::vector<ScaleSpec>{{3, 5}, {5, 5}, {7, 5}, {9, 3}, {11, 3}};    // 21
    auto mid = std::vector<ScaleSpec>{{3, 5}, {5, 4}, {7, 4}, {9, 3}, {11, 3}};     // 19
    auto narrow = std::vector<ScaleSpec>{{3, 4}, {5, 4}, {7, 4}, {9, 3}, {11, 3}};  // 18
    spec.layers = {
        {3, wide}, {21, wide}, {21, mid}, {19, narrow}, {18, narrow},
    };
    spec.include_input_passthrough = true;
    spec.refactor_3x3 = false;
    spec.validate();
    return spec;
}

FextNetworkSpec spec_from_name_or_json(const std::string& name_or_json) {
    if (name_or_json == "fext5-100") return fext5_100_preset();
    nlohmann::json j = nlohmann::json::parse(name_or_json, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("unknown network spec '" + name_or_json +
                          "' (expected preset name fext5-100 or a JSON spec)");
    }
    return FextNetworkSpec::from_json(j);
}

NodeId run_conv_chain(Graph& g, NodeId input, const std::vector<ConvKernel>& stages,
                      bool activations) {
    NodeId cur = input;
    for (const auto& k : stages) {
        cur = g.conv2d_same(cur, k);
        if (activations) cur = g.relu(cur);
    }
    return cur;
}

std::vector<ConvKernel> build_kernels(const MiniNetworkPlan& plan, WeightRng& rng) {
    std::vector<ConvKernel> out;
    out.reserve(plan.stages.size());
    for (const auto& s : plan.stages) {
        ConvKernel k(s.out_channels, s.in_channels, s.kernel_h, s.kernel_w);
        init_he_uniform(k, rng);
        out.push_back(std::move(k));
    }
    return out;
}

FextNetwork::FextNetwork(FextNetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    WeightRng rng(seed);
    for (const auto& lspec : spec_.layers) {
        std::vector<Branch> layer;
        for (const auto& bspec : lspec.branches) {
            Branch br;
            br.plan = factorize(bspec.scale, lspec.in_channels, bspec.out_features, spec_.refactor_3x3);
            br.stages = build_kernels(br.plan, rng);
            layer.push_back(std::move(br));
        }
        layers_.push_back(std::move(layer));
    }
}

NodeId FextNetwork::forward(Graph& g, NodeId input, std::vector<NodeId>* blocks) const {
    const Tensor& in = g.value(input);
    if (in.shape.rank() != 4) throw ShapeError("fext forward expects (N,C,H,W), got " + in.shape.str());
    if (in.shape[1] != spec_.input_channels()) {
        throw ConfigError("fext network expects " + std::to_string(spec_.input_channels()) +
                          " input channels, got " + std::to_string(in.shape[1]));
    }
    std::vector<NodeId> final_blocks;
    if (spec_.include_input_passthrough) final_blocks.push_back(input);

    NodeId cur = input;
    for (const auto& layer : layers_) {
        std::vector<NodeId> branch_outs;
        branch_outs.reserve(layer.size());
        for (const auto& br : layer) {
            branch_outs.push_back(run_conv_chain(g, cur, br.stages, /*activations=*/true));
        }
        NodeId cat = g.concat_channels(branch_outs);
        cur = g.relu(cat);
        final_blocks.push_back(cur);
    }
    if (blocks) *blocks = final_blocks;
    return g.concat_channels(final_blocks);
}

std::vector<TensorPtr> FextNetwork::parameters() const {
    std::vector<TensorPtr> out;
    for (const auto& layer : layers_) {
        for (const auto& br : layer) {
            for (const auto& k : br.stages) {
                out.push_back(k.weights);
                out.push_back(k.bias);
            }
        }
    }
    return out;
}

std::int64_t FextNetwork::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
}

std::vector<GrayMap> export_feature_maps(const FextNetwork& net, const Tensor& image) {
    if (image.shape.rank() != 3) {
        throw ShapeError("export_feature_maps expects a (C,H,W) image, got " + image.shape.str());
    }
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    Graph g;
    NodeId in = g.leaf(make_tensor(Shape{1, C, H, W}, image.values));
    NodeId feats = net.forward(g, in);
    const Tensor& f = g.value(feats);

    std::vector<GrayMap> maps;
    maps.reserve(static_cast<std::size_t>(f.shape[1]));
    const std::int64_t plane = H * W;
    for (std::int64_t c = 0; c < f.shape[1]; ++c) {
        const float* base = f.values.data() + c * plane;
        float lo = base[0], hi = base[0];
        for (std::int64_t i = 1; i < plane; ++i) {
            lo = std::min(lo, base[i]);
            hi = std::max(hi, base[i]);
        }
        GrayMap m(static_cast<int>(H), static_cast<int>(W));
        if (hi > lo) {
            const float scale = 1.0f / (hi - lo);
            for (std::int64_t i = 0; i < plane; ++i) m.px[static_cast<std::size_t>(i)] = (base[i] - lo) * scale;
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

}  // namespace dfx
