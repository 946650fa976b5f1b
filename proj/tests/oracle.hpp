#pragma once

// Independent 64-bit reference implementations used as test oracles. These
// deliberately do not share code with the library's kernels: everything here
// is plain nested loops over double-precision copies.

#include <cstdint>
#include <vector>

#include "deepfext/fext.hpp"
#include "deepfext/maps.hpp"
#include "deepfext/mesh_head.hpp"
#include "deepfext/metrics.hpp"
#include "deepfext/tensor.hpp"

namespace oracle {

struct T64 {
    std::vector<std::int64_t> shape;  // (N,C,H,W) unless stated otherwise
    std::vector<double> v;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    double& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
        return v[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    double at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return v[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
};

T64 from_f32(const dfx::Tensor& t);

// Zero-padded same-size correlation, all arithmetic in double.
T64 conv2d_same_ref(const T64& in, const T64& w, const std::vector<double>& bias);
T64 relu_ref(const T64& in);
T64 concat_ref(const std::vector<T64>& ins);
T64 to_mesh_ref(const T64& in, int mesh_h, int mesh_w);
T64 global_avg_pool_ref(const T64& in);  // (M,K,h,w) -> shape {M,K,1,1}

// Weighted-mean cross entropy over per-pixel scores (M,K,1,1); labels/weights
// indexed by m.
double softmax_ce_ref(const T64& scores, const std::vector<int>& labels,
                      const std::vector<float>& weights);

// Full image->features->mesh->head->loss forward in double, reading the
// current f32 parameters of `net` and `head`.
double model_loss_ref(const dfx::FextNetwork& net, const dfx::MeshHead& head,
                      const dfx::Tensor& input, const std::vector<int>& labels,
                      const std::vector<float>& weights);

// Central difference of model_loss_ref w.r.t. one parameter element. The
// perturbation is applied in f32 storage; the divisor uses the achieved f32
// step so quantization does not bias the estimate.
double fd_model_param(const dfx::FextNetwork& net, const dfx::MeshHead& head,
                      const dfx::Tensor& input, const std::vector<int>& labels,
                      const std::vector<float>& weights, dfx::Tensor& param, std::size_t idx,
                      double h);

// Compares an analytic gradient element against central differences.
// Returns 1 on agreement (< tol relative), 0 on disagreement, -1 when the
// probe straddles a ReLU kink (FD at h and h/8 disagree with each other, so
// the central difference itself is invalid there).
int fd_agreement(const dfx::FextNetwork& net, const dfx::MeshHead& head, const dfx::Tensor& input,
                 const std::vector<int>& labels, const std::vector<float>& weights,
                 dfx::Tensor& param, std::size_t idx, double analytic, double h, double tol);

// Single kernel equivalent to applying the chain in order: full 2-D
// convolution of the stage kernels with channel contraction.
// Result shape (O_last, I_first, sum(kh-1)+1, sum(kw-1)+1).
T64 compose_chain(const std::vector<dfx::ConvKernel>& stages);

// Brute-force metric oracles.
dfx::ConfusionCounts confusion_brute(const dfx::BinaryMap& pred, const dfx::BinaryMap& gt,
                                     const dfx::BinaryMap* fov);
double dice_brute(const dfx::GrayMap& prob, const dfx::BinaryMap& gt, const dfx::BinaryMap* fov,
                  double threshold);
double max_dice_brute(const dfx::GrayMap& prob, const dfx::BinaryMap& gt, const dfx::BinaryMap* fov,
                      double* best_threshold);
double kappa_brute(const dfx::ConfusionCounts& c);

}  // namespace oracle
