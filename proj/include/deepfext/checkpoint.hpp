#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deepfext/fext.hpp"
#include "deepfext/mesh_head.hpp"

namespace dfx {

// Optimizer state carried inside a mid-training checkpoint. Moment arrays are
// laid out exactly like the parameter payload.
struct TrainerBlock {
    std::string optimizer;  // "adam" | "sgd_momentum"
    std::string rng_state;  // serialized mt19937_64
    std::int64_t epoch = 0;
    double running_loss = 0.0;
    std::vector<std::vector<float>> moments;
};

// On-disk model state. Layout: magic "DFXT", u32 version, u32 header length,
// JSON header, then little-endian f32 parameters in declaration order
// (extraction network first, then the head), then optional moment arrays.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    FextNetworkSpec net_spec;
    MeshHeadSpec head_spec;
    std::string task = "vessel";  // vessel | centerline | both
    std::uint64_t seed = 0;
    std::vector<float> norm_mean, norm_std;  // per input channel
    std::int64_t train_step = 0;
    std::vector<float> params;
    std::optional<TrainerBlock> trainer;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dfx
