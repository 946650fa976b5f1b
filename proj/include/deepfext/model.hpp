#pragma once

#include <memory>
#include <string>
#include <vector>

#include "deepfext/checkpoint.hpp"
#include "deepfext/fext.hpp"
#include "deepfext/maps.hpp"
#include "deepfext/mesh_head.hpp"

namespace dfx {

// Extraction network + mesh head + the input normalization fitted at training
// time. The parameter declaration order (network, then head) is the
// checkpoint payload order.
class Model {
  public:
    Model(FextNetworkSpec net_spec, MeshHeadSpec head_spec, std::string task, std::uint64_t seed);
    static Model from_checkpoint(const Checkpoint& ck);

    Checkpoint to_checkpoint() const;  // no trainer block

    std::vector<TensorPtr> parameters() const;
    std::int64_t parameter_count() const;
    std::vector<float> flat_parameters() const;
    void set_flat_parameters(const std::vector<float>& flat);

    Tensor normalize(const Tensor& image) const;  // (C,H,W)

    // Softmax probabilities (num_classes,H,W) for a raw [0,1] image.
    Tensor predict(const Tensor& image) const;

    // Foreground probability under this model's task semantics: P(class 1)
    // for binary tasks, P(vessel)+P(centerline) for the joint task.
    static GrayMap foreground_prob(const Tensor& probs, const std::string& task);
    static GrayMap class_prob(const Tensor& probs, int k);
    static LabelMap argmax_map(const Tensor& probs);

    const FextNetwork& net() const { return *net_; }
    const MeshHead& head() const { return *head_; }
    const std::string& task() const { return task_; }
    int num_classes() const { return head_->spec().num_classes; }
    std::uint64_t seed() const { return seed_; }

    std::vector<float> norm_mean, norm_std;  // per channel; empty = identity
    std::int64_t train_step = 0;

  private:
    std::unique_ptr<FextNetwork> net_;
    std::unique_ptr<MeshHead> head_;
    std::string task_;
    std::uint64_t seed_ = 0;
};

int num_classes_for_task(const std::string& task);

}  // namespace dfx
