#include "deepfext/model.hpp"

#include <algorithm>
#include <cmath>

namespace dfx {

int num_classes_for_task(const std::string& task) {
    if (task == "vessel" || task == "centerline") return 2;
    if (task == "both") return 3;
    throw ConfigError("unknown task '" + task + "' (expected vessel, centerline or both)");
}

Model::Model(FextNetworkSpec net_spec, MeshHeadSpec head_spec, std::string task, std::uint64_t seed)
    : task_(std::move(task)), seed_(seed) {
    if (head_spec.num_classes != num_classes_for_task(task_)) {
        throw ConfigError("task '" + task_ + "' needs " + std::to_string(num_classes_for_task(task_)) +
                          " classes, head has " + std::to_string(head_spec.num_classes));
    }
    head_spec.validate_against(net_spec.feature_count());
    net_ = std::make_unique<FextNetwork>(std::move(net_spec), seed);
    head_ = std::make_unique<MeshHead>(std::move(head_spec), seed ^ 0x6865616411ull);
}

Model Model::from_checkpoint(const Checkpoint& ck) {
    Model m(ck.net_spec, ck.head_spec, ck.task, ck.seed);
    m.norm_mean = ck.norm_mean;
    m.norm_std = ck.norm_std;
    m.train_step = ck.train_step;
    m.set_flat_parameters(ck.params);
    return m;
}

Checkpoint Model::to_checkpoint() const {
    Checkpoint ck;
    ck.net_spec = net_->spec();
    ck.head_spec = head_->spec();
    ck.task = task_;
    ck.seed = seed_;
    ck.norm_mean = norm_mean;
    ck.norm_std = norm_std;
    ck.train_step = train_step;
    ck.params = flat_parameters();
    return ck;
}

std::vector<TensorPtr> Model::parameters() const {
    std::vector<TensorPtr> out = net_->parameters();
    auto hp = head_->parameters();
    out.insert(out.end(), hp.begin(), hp.end());
    return out;
}

std::int64_t Model::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
}

std::vector<float> Model::flat_parameters() const {
    std::vector<float> flat;
    flat.reserve(static_cast<std::size_t>(parameter_count()));
    for (const auto& p : parameters()) flat.insert(flat.end(), p->values.begin(), p->values.end());
    return flat;
}

void Model::set_flat_parameters(const std::vector<float>& flat) {
    if (static_cast<std::int64_t>(flat.size()) != parameter_count()) {
        throw IntegrityError("parameter payload has " + std::to_string(flat.size()) +
                             " values, model declares " + std::to_string(parameter_count()));
    }
    std::size_t off = 0;
    for (const auto& p : parameters()) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p->values.size(), p->values.begin());
        off += p->values.size();
    }
}

Tensor Model::normalize(const Tensor& image) const {
    if (norm_mean.empty()) return image;
    if (image.shape.rank() != 3 || image.shape[0] != static_cast<std::int64_t>(norm_mean.size())) {
        throw ShapeError("normalize expects (" + std::to_string(norm_mean.size()) + ",H,W), got " +
                         image.shape.str());
    }
    Tensor out = image;
    const std::int64_t plane = image.shape[1] * image.shape[2];
    for (std::size_t c = 0; c < norm_mean.size(); ++c) {
        const float mean = norm_mean[c];
        const float inv = 1.0f / std::max(norm_std[c], 1e-6f);
        float* base = out.values.data() + static_cast<std::int64_t>(c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) base[i] = (base[i] - mean) * inv;
    }
    return out;
}

Tensor Model::predict(const Tensor& image) const {
    return predict_probabilities(normalize(image), *net_, *head_);
}

GrayMap Model::class_prob(const Tensor& probs, int k) {
    const std::int64_t H = probs.shape[1], W = probs.shape[2];
    GrayMap m(static_cast<int>(H), static_cast<int>(W));
    std::copy_n(probs.values.data() + k * H * W, H * W, m.px.begin());
    return m;
}

GrayMap Model::foreground_prob(const Tensor& probs, const std::string& task) {
    if (task == "both") {
        const std::int64_t H = probs.shape[1], W = probs.shape[2];
        GrayMap m(static_cast<int>(H), static_cast<int>(W));
        const float* p1 = probs.values.data() + 1 * H * W;
        const float* p2 = probs.values.data() + 2 * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) m.px[static_cast<std::size_t>(i)] = p1[i] + p2[i];
        return m;
    }
    return class_prob(probs, 1);
}

LabelMap Model::argmax_map(const Tensor& probs) {
    const std::int64_t K = probs.shape[0], H = probs.shape[1], W = probs.shape[2];
    LabelMap m(static_cast<int>(H), static_cast<int>(W));
    for (std::int64_t i = 0; i < H * W; ++i) {
        int best = 0;
        float bv = probs.values[static_cast<std::size_t>(i)];
        for (int k = 1; k < K; ++k) {
            const float v = probs.values[static_cast<std::size_t>(k * H * W + i)];
            if (v > bv) {
                bv = v;
                best = k;
            }
        }
        m.px[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return m;
}

}  // namespace dfx
