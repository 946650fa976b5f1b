#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "deepfext/tensor.hpp"

namespace dfx {

class Graph;

using NodeId = int;

// One operation record. Nodes are appended in execution order, so the vector
// itself is the topological order and backward() is a reverse scan.
struct Node {
    const char* op = "leaf";
    std::vector<NodeId> inputs;
    TensorPtr out;
    bool requires_grad = false;
    std::function<void(Graph&)> backprop;  // empty for leaves
};

// Define-by-run compute graph: built fresh per forward pass, confined to one
// thread. Convolution internals parallelize over output rows; every element
// is produced by exactly one worker, so results do not depend on the cap.
class Graph {
  public:
    NodeId leaf(TensorPtr t);   // constant input, no gradient
    NodeId param(TensorPtr t);  // gradient accumulated into t->grad

    // Zero-padded "same" convolution: output spatial dims equal the input's.
    // weights node must be (O,I,kh,kw) with odd kh,kw; bias node (O) or -1.
    NodeId conv2d_same(NodeId input, NodeId weights, NodeId bias);
    // Convenience: registers the kernel's weights and bias as params.
    NodeId conv2d_same(NodeId input, const ConvKernel& k);

    NodeId relu(NodeId input);

    // Stacks inputs along the channel axis; all must share (N,H,W).
    NodeId concat_channels(const std::vector<NodeId>& inputs);

    // (N,C,H,W) with C == mesh_h*mesh_w -> (N*H*W, 1, mesh_h, mesh_w).
    // Pure permutation; gradient is the inverse permutation.
    NodeId to_mesh(NodeId input, int mesh_h, int mesh_w);

    // Inverse of to_mesh: (N*H*W, 1, mh, mw) -> (N, mh*mw, H, W).
    NodeId from_mesh(NodeId input, std::int64_t n, std::int64_t h, std::int64_t w);

    // (M,K) per-pixel scores back to image layout (N,K,H,W), M == N*H*W.
    NodeId from_pixels(NodeId input, std::int64_t n, std::int64_t h, std::int64_t w);

    // (M,K,h,w) -> (M,K): mean over the spatial extent of each channel.
    NodeId global_avg_pool(NodeId input);

    // Weighted-mean softmax cross entropy over pixels. logits (N,K,H,W),
    // labels (N*H*W) ints in [0,K), weights same length (empty = all ones).
    // Returns a scalar node; per-pixel math runs in double.
    NodeId softmax_cross_entropy(NodeId logits, const std::vector<int>& labels,
                                 const std::vector<float>& pixel_weights);

    // Scalar projection sum(t * coeffs); test harness hook for gradient checks.
    NodeId dot(NodeId input, std::vector<float> coeffs);

    // Reverse sweep from a scalar loss node. Parameter tensors end up with
    // d(loss)/d(param) in their grad buffers.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return *nodes_[static_cast<std::size_t>(id)].out; }
    TensorPtr tensor(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].out; }
    Tensor& mutable_grad_target(NodeId id) { return *nodes_[static_cast<std::size_t>(id)].out; }
    std::size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_ran_; }

  private:
    NodeId add_node(Node n);
    void check_id(NodeId id) const;

    std::vector<Node> nodes_;
    bool backward_ran_ = false;
};

// Raw kernels behind the graph ops. All reductions accumulate in double.
// The grad_* kernels read the upstream gradient from grad_out.grad and add
// their contribution into the target tensor's grad buffer.
namespace kernels {
void conv2d_same_forward(const Tensor& in, const Tensor& w, const Tensor* bias, Tensor& out);
void conv2d_same_grad_input(const Tensor& grad_out, const Tensor& w, Tensor& grad_in);
void conv2d_same_grad_weights(const Tensor& grad_out, const Tensor& in, Tensor& grad_w);
void conv2d_same_grad_bias(const Tensor& grad_out, Tensor& grad_b);
}  // namespace kernels

}  // namespace dfx
