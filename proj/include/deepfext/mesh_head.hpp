#pragma once

#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "deepfext/fext.hpp"
#include "deepfext/graph.hpp"
#include "deepfext/tensor.hpp"

namespace dfx {

struct HeadConvSpec {
    int out_channels = 0;
    int kernel = 3;
};

// Classifier over the per-pixel feature mesh: three same-size convolutions
// (ReLU after the first two), then a global average per channel. The final
// conv emits num_classes channels.
struct MeshHeadSpec {
    int mesh_h = 10;
    int mesh_w = 10;
    std::vector<HeadConvSpec> conv_layers = {{8, 3}, {8, 3}, {2, 3}};
    int num_classes = 2;

    void validate() const;
    // mesh_h*mesh_w must equal the upstream network's feature count.
    void validate_against(int feature_count) const;

    nlohmann::json to_json() const;
    static MeshHeadSpec from_json(const nlohmann::json& j);
    static MeshHeadSpec defaults(int num_classes);
};

class MeshHead {
  public:
    MeshHead(MeshHeadSpec spec, std::uint64_t seed);

    // (M,1,mesh_h,mesh_w) meshes -> (M,num_classes) logits.
    NodeId forward_meshes(Graph& g, NodeId meshes) const;

    // (N,F,H,W) features -> (N,num_classes,H,W) logits. The mesh convolution
    // never mixes features across image pixels.
    NodeId forward_features(Graph& g, NodeId features) const;

    const MeshHeadSpec& spec() const { return spec_; }
    std::vector<TensorPtr> parameters() const;
    std::int64_t parameter_count() const;

  private:
    MeshHeadSpec spec_;
    std::vector<ConvKernel> convs_;
};

// Softmax class probabilities for one image, shape (num_classes,H,W).
// Large images are processed in row bands with a receptive-field halo, so
// results are identical to a whole-image pass at any band budget (pixels of
// extended band held in memory at once).
Tensor predict_probabilities(const Tensor& image, const FextNetwork& net, const MeshHead& head,
                             std::int64_t band_pixel_budget = 60000);

// Receptive-field half-width of the stacked extraction network (sum of the
// per-layer max-scale halos).
int network_halo(const FextNetworkSpec& spec);

}  // namespace dfx
