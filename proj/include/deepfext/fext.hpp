#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "deepfext/graph.hpp"
#include "deepfext/maps.hpp"
#include "deepfext/tensor.hpp"

namespace dfx {

// One multi-scale branch: emulated square filter size and how many features
// it extracts.
struct ScaleSpec {
    int scale = 3;         // odd, >= 3
    int out_features = 1;  // > 0
};

// Planned convolution stage inside a mini-network (no weights yet).
struct StagePlan {
    int kernel_h = 0;
    int kernel_w = 0;
    int in_channels = 0;
    int out_channels = 0;
};

// Chain of small convolutions whose composed receptive field equals
// target_scale x target_scale. Intermediate stages carry the branch's final
// width throughout.
struct MiniNetworkPlan {
    int target_scale = 0;
    std::vector<StagePlan> stages;

    std::int64_t weight_param_count() const;
    std::int64_t param_count() const;  // weights + biases
};

// Chain of (s-1)/2 3x3 stages for target s (single 3x3 for s == 3); with
// refactor_3x3, every 3x3 becomes a 1x3 followed by a 3x1.
MiniNetworkPlan factorize(int target_scale, int in_channels, int out_channels, bool refactor_3x3);

// Composed receptive field (sum of (k-1) per axis, plus 1).
std::pair<int, int> receptive_field(const MiniNetworkPlan& plan);

struct FextLayerSpec {
    int in_channels = 0;
    std::vector<ScaleSpec> branches;

    int out_channels() const;
};

struct FextNetworkSpec {
    std::vector<FextLayerSpec> layers;
    bool include_input_passthrough = true;
    bool refactor_3x3 = false;

    void validate() const;  // inter-layer channel consistency
    int input_channels() const { return layers.empty() ? 0 : layers.front().in_channels; }
    int feature_count() const;
    // Channel widths of the final concatenation: input block first (when
    // passthrough is on), then one block per layer.
    std::vector<int> channel_blocks() const;

    nlohmann::json to_json() const;
    static FextNetworkSpec from_json(const nlohmann::json& j);
};

// Built-in five-layer instance over scales {3,5,7,9,11}: 100 features per
// pixel including the RGB passthrough.
FextNetworkSpec fext5_100_preset();
FextNetworkSpec spec_from_name_or_json(const std::string& name_or_json);

// Runs kernels[0..] on input with optional ReLU after every stage. Shared by
// the network forward and the linear-equivalence tests (which switch the
// activation off and zero the biases).
NodeId run_conv_chain(Graph& g, NodeId input, const std::vector<ConvKernel>& stages, bool activations);

std::vector<ConvKernel> build_kernels(const MiniNetworkPlan& plan, WeightRng& rng);

class FextNetwork {
  public:
    FextNetwork(FextNetworkSpec spec, std::uint64_t seed);

    // (N,in,H,W) -> (N,feature_count,H,W); ReLU after every stage and after
    // each layer's concatenation. When `blocks` is given it receives the node
    // ids of the concatenated channel blocks (input passthrough first, then
    // one per layer).
    NodeId forward(Graph& g, NodeId input, std::vector<NodeId>* blocks = nullptr) const;

    const FextNetworkSpec& spec() const { return spec_; }
    int feature_count() const { return spec_.feature_count(); }
    std::vector<TensorPtr> parameters() const;  // declaration order
    std::int64_t parameter_count() const;

    struct Branch {
        MiniNetworkPlan plan;
        std::vector<ConvKernel> stages;
    };
    const std::vector<std::vector<Branch>>& layers() const { return layers_; }

  private:
    FextNetworkSpec spec_;
    std::vector<std::vector<Branch>> layers_;
};

// Runs the network on one image (C,H,W) and min-max normalizes each of the
// output channels to [0,1]. A constant channel comes back all zero.
std::vector<GrayMap> export_feature_maps(const FextNetwork& net, const Tensor& image);

}  // namespace dfx
