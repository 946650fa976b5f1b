#include "deepfext/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "deepfext/image_io.hpp"

namespace dfx {

namespace {

void append_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void append_f32le(std::string& out, const std::vector<float>& v) {
    for (float f : v) append_u32le(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> read_f32le(const unsigned char* p, std::size_t count) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(read_u32le(p + 4 * i));
    return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    nlohmann::json h;
    h["network"] = ck.net_spec.to_json();
    h["head"] = ck.head_spec.to_json();
    h["task"] = ck.task;
    h["seed"] = ck.seed;
    h["feature_count"] = ck.net_spec.feature_count();
    h["param_count"] = ck.params.size();
    h["normalization"] = {{"mean", ck.norm_mean}, {"std", ck.norm_std}};
    h["train_step"] = ck.train_step;
    if (ck.trainer) {
        h["trainer"] = {{"optimizer", ck.trainer->optimizer},
                        {"rng", ck.trainer->rng_state},
                        {"epoch", ck.trainer->epoch},
                        {"running_loss", ck.trainer->running_loss},
                        {"moment_arrays", ck.trainer->moments.size()}};
    }
    const std::string header = h.dump();

    std::string out;
    out.reserve(16 + header.size() + 4 * ck.params.size());
    out.append("DFXT", 4);
    append_u32le(out, Checkpoint::kVersion);
    append_u32le(out, static_cast<std::uint32_t>(header.size()));
    out.append(header);
    append_f32le(out, ck.params);
    if (ck.trainer) {
        for (const auto& m : ck.trainer->moments) {
            if (m.size() != ck.params.size()) {
                throw StateError("optimizer moment array size does not match parameter count");
            }
            append_f32le(out, m);
        }
    }
    write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < 12) throw IntegrityError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes): " + path);
    if (std::memcmp(p, "DFXT", 4) != 0) throw IntegrityError("bad magic, not a DFXT checkpoint: " + path);
    const std::uint32_t version = read_u32le(p + 4);
    if (version != Checkpoint::kVersion) {
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version) +
                             " (this build reads version " + std::to_string(Checkpoint::kVersion) + ")");
    }
    const std::uint32_t header_len = read_u32le(p + 8);
    if (12 + static_cast<std::size_t>(header_len) > bytes.size()) {
        throw IntegrityError("checkpoint header truncated: declared " + std::to_string(header_len) +
                             " bytes at offset 12, file has " + std::to_string(bytes.size() - 12));
    }
    nlohmann::json h = nlohmann::json::parse(bytes.substr(12, header_len), nullptr, false);
    if (h.is_discarded()) throw IntegrityError("checkpoint header is not valid JSON: " + path);

    Checkpoint ck;
    ck.net_spec = FextNetworkSpec::from_json(h.at("network"));
    ck.head_spec = MeshHeadSpec::from_json(h.at("head"));
    ck.task = h.value("task", "vessel");
    ck.seed = h.value("seed", 0ull);
    ck.train_step = h.value("train_step", 0ll);
    if (h.contains("normalization")) {
        ck.norm_mean = h["normalization"].value("mean", std::vector<float>{});
        ck.norm_std = h["normalization"].value("std", std::vector<float>{});
    }

    const std::size_t param_count = h.at("param_count").get<std::size_t>();
    std::size_t off = 12 + header_len;
    if (off + 4 * param_count > bytes.size()) {
        throw IntegrityError("checkpoint payload truncated: need " + std::to_string(4 * param_count) +
                             " bytes at offset " + std::to_string(off) + ", file has " +
                             std::to_string(bytes.size() - off));
    }
    ck.params = read_f32le(p + off, param_count);
    off += 4 * param_count;

    if (h.contains("trainer")) {
        TrainerBlock tb;
        const auto& jt = h["trainer"];
        tb.optimizer = jt.at("optimizer").get<std::string>();
        tb.rng_state = jt.at("rng").get<std::string>();
        tb.epoch = jt.value("epoch", 0ll);
        tb.running_loss = jt.value("running_loss", 0.0);
        const std::size_t n_arrays = jt.at("moment_arrays").get<std::size_t>();
        for (std::size_t a = 0; a < n_arrays; ++a) {
            if (off + 4 * param_count > bytes.size()) {
                throw IntegrityError("checkpoint moment array " + std::to_string(a) +
                                     " truncated at offset " + std::to_string(off));
            }
            tb.moments.push_back(read_f32le(p + off, param_count));
            off += 4 * param_count;
        }
        ck.trainer = std::move(tb);
    }
    if (off != bytes.size()) {
        throw IntegrityError("checkpoint has " + std::to_string(bytes.size() - off) +
                             " trailing bytes at offset " + std::to_string(off));
    }
    return ck;
}

}  // namespace dfx
