#include "oracle.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

T64 from_f32(const dfx::Tensor& t) {
    T64 out;
    out.shape = t.shape.dims();
    out.v.assign(t.values.begin(), t.values.end());
    return out;
}

T64 conv2d_same_ref(const T64& in, const T64& w, const std::vector<double>& bias) {
    const std::int64_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    const std::int64_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    T64 out;
    out.shape = {N, O, H, W};
    out.v.assign(static_cast<std::size_t>(N * O * H * W), 0.0);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t o = 0; o < O; ++o) {
            for (std::int64_t y = 0; y < H; ++y) {
                for (std::int64_t x = 0; x < W; ++x) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
                    for (std::int64_t c = 0; c < C; ++c) {
                        for (std::int64_t dy = 0; dy < kh; ++dy) {
                            for (std::int64_t dx = 0; dx < kw; ++dx) {
                                const std::int64_t iy = y + dy - ph;
                                const std::int64_t ix = x + dx - pw;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += in.at(n, c, iy, ix) * w.at(o, c, dy, dx);
                            }
                        }
                    }
                    out.at(n, o, y, x) = acc;
                }
            }
        }
    }
    return out;
}

T64 relu_ref(const T64& in) {
    T64 out = in;
    for (double& x : out.v) x = x > 0.0 ? x : 0.0;
    return out;
}

T64 concat_ref(const std::vector<T64>& ins) {
    const std::int64_t N = ins[0].shape[0], H = ins[0].shape[2], W = ins[0].shape[3];
    std::int64_t ctotal = 0;
    for (const auto& t : ins) ctotal += t.shape[1];
    T64 out;
    out.shape = {N, ctotal, H, W};
    out.v.assign(static_cast<std::size_t>(N * ctotal * H * W), 0.0);
    std::int64_t coff = 0;
    for (const auto& t : ins) {
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t c = 0; c < t.shape[1]; ++c) {
                for (std::int64_t y = 0; y < H; ++y) {
                    for (std::int64_t x = 0; x < W; ++x) out.at(n, coff + c, y, x) = t.at(n, c, y, x);
                }
            }
        }
        coff += t.shape[1];
    }
    return out;
}

T64 to_mesh_ref(const T64& in, int mesh_h, int mesh_w) {
    const std::int64_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    T64 out;
    out.shape = {N * H * W, 1, mesh_h, mesh_w};
    out.v.assign(static_cast<std::size_t>(N * H * W * C), 0.0);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t m = (n * H + y) * W + x;
                for (std::int64_t c = 0; c < C; ++c) {
                    out.v[static_cast<std::size_t>(m * C + c)] = in.at(n, c, y, x);
                }
            }
        }
    }
    return out;
}

T64 global_avg_pool_ref(const T64& in) {
    const std::int64_t M = in.shape[0], K = in.shape[1], HW = in.shape[2] * in.shape[3];
    T64 out;
    out.shape = {M, K, 1, 1};
    out.v.assign(static_cast<std::size_t>(M * K), 0.0);
    for (std::int64_t i = 0; i < M * K; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < HW; ++j) acc += in.v[static_cast<std::size_t>(i * HW + j)];
        out.v[static_cast<std::size_t>(i)] = acc / static_cast<double>(HW);
    }
    return out;
}

double softmax_ce_ref(const T64& scores, const std::vector<int>& labels,
                      const std::vector<float>& weights) {
    const std::int64_t M = scores.shape[0], K = scores.shape[1];
    double wsum = 0.0, lsum = 0.0;
    for (std::int64_t m = 0; m < M; ++m) {
        const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(m)];
        wsum += w;
        if (w == 0.0) continue;
        double mx = scores.v[static_cast<std::size_t>(m * K)];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, scores.v[static_cast<std::size_t>(m * K + k)]);
        double denom = 0.0;
        for (std::int64_t k = 0; k < K; ++k) denom += std::exp(scores.v[static_cast<std::size_t>(m * K + k)] - mx);
        const double lse = mx + std::log(denom);
        lsum += w * (lse - scores.v[static_cast<std::size_t>(m * K + labels[static_cast<std::size_t>(m)])]);
    }
    return wsum > 0.0 ? lsum / wsum : 0.0;
}

namespace {

std::vector<double> bias_of(const dfx::ConvKernel& k) {
    return std::vector<double>(k.bias->values.begin(), k.bias->values.end());
}

T64 run_chain_ref(const T64& in, const std::vector<dfx::ConvKernel>& stages) {
    T64 cur = in;
    for (const auto& k : stages) {
        cur = relu_ref(conv2d_same_ref(cur, from_f32(*k.weights), bias_of(k)));
    }
    return cur;
}

}  // namespace

double model_loss_ref(const dfx::FextNetwork& net, const dfx::MeshHead& head,
                      const dfx::Tensor& input, const std::vector<int>& labels,
                      const std::vector<float>& weights) {
    T64 x = from_f32(input);
    std::vector<T64> final_blocks;
    if (net.spec().include_input_passthrough) final_blocks.push_back(x);
    T64 cur = x;
    for (const auto& layer : net.layers()) {
        std::vector<T64> branch_outs;
        for (const auto& br : layer) branch_outs.push_back(run_chain_ref(cur, br.stages));
        cur = relu_ref(concat_ref(branch_outs));
        final_blocks.push_back(cur);
    }
    T64 feats = concat_ref(final_blocks);

    const auto& hs = head.spec();
    T64 meshes = to_mesh_ref(feats, hs.mesh_h, hs.mesh_w);
    const auto head_params = head.parameters();  // weights,bias per conv
    T64 h = meshes;
    for (std::size_t i = 0; i < hs.conv_layers.size(); ++i) {
        const dfx::Tensor& w = *head_params[2 * i];
        const dfx::Tensor& b = *head_params[2 * i + 1];
        h = conv2d_same_ref(h, from_f32(w), std::vector<double>(b.values.begin(), b.values.end()));
        if (i + 1 < hs.conv_layers.size()) h = relu_ref(h);
    }
    T64 scores = global_avg_pool_ref(h);
    return softmax_ce_ref(scores, labels, weights);
}

double fd_model_param(const dfx::FextNetwork& net, const dfx::MeshHead& head,
                      const dfx::Tensor& input, const std::vector<int>& labels,
                      const std::vector<float>& weights, dfx::Tensor& param, std::size_t idx,
                      double h) {
    const float orig = param.values[idx];
    const float hi = static_cast<float>(static_cast<double>(orig) + h);
    const float lo = static_cast<float>(static_cast<double>(orig) - h);
    param.values[idx] = hi;
    const double l_hi = model_loss_ref(net, head, input, labels, weights);
    param.values[idx] = lo;
    const double l_lo = model_loss_ref(net, head, input, labels, weights);
    param.values[idx] = orig;
    return (l_hi - l_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
}

namespace {

double rel_gap(double a, double b) {
    const double m = std::max(std::abs(a), std::abs(b));
    if (m < 1e-7) return 0.0;
    return std::abs(a - b) / m;
}

}  // namespace

int fd_agreement(const dfx::FextNetwork& net, const dfx::MeshHead& head, const dfx::Tensor& input,
                 const std::vector<int>& labels, const std::vector<float>& weights,
                 dfx::Tensor& param, std::size_t idx, double analytic, double h, double tol) {
    const double fd1 = fd_model_param(net, head, input, labels, weights, param, idx, h);
    if (rel_gap(analytic, fd1) < tol) return 1;
    const double fd2 = fd_model_param(net, head, input, labels, weights, param, idx, h / 8.0);
    if (rel_gap(analytic, fd2) < tol) return 1;  // kink sat between h/8 and h of the point
    if (rel_gap(fd1, fd2) > tol / 2.0) return -1;  // unstable: kink inside the stencil

    // A ReLU kink exactly at the evaluation point leaves the central
    // difference stable but averaging the two slopes. The analytic gradient
    // is the one-sided derivative, so compare against those (O(h) accurate).
    const float orig = param.values[idx];
    const double hs = h / 8.0;
    const float hi = static_cast<float>(static_cast<double>(orig) + hs);
    const float lo = static_cast<float>(static_cast<double>(orig) - hs);
    const double l0 = model_loss_ref(net, head, input, labels, weights);
    param.values[idx] = hi;
    const double lp = model_loss_ref(net, head, input, labels, weights);
    param.values[idx] = lo;
    const double lm = model_loss_ref(net, head, input, labels, weights);
    param.values[idx] = orig;
    const double fwd = (lp - l0) / (static_cast<double>(hi) - static_cast<double>(orig));
    const double bwd = (l0 - lm) / (static_cast<double>(orig) - static_cast<double>(lo));
    if (rel_gap(fwd, bwd) > tol / 2.0) {
        // genuinely kinked at the point: accept the side the analytic picked
        return (rel_gap(analytic, fwd) < 2.0 * tol || rel_gap(analytic, bwd) < 2.0 * tol) ? -1 : 0;
    }
    return 0;
}

T64 compose_chain(const std::vector<dfx::ConvKernel>& stages) {
    // combined[o,i](u) = sum_m sum_d k1[m,i](d) * k2[o,m](u-d): chaining two
    // same-padded correlations multiplies to the full convolution of kernels
    T64 acc = from_f32(*stages.front().weights);
    for (std::size_t s = 1; s < stages.size(); ++s) {
        const T64 k2 = from_f32(*stages[s].weights);
        const std::int64_t O = k2.shape[0], M = acc.shape[0], I = acc.shape[1];
        const std::int64_t h1 = acc.shape[2], w1 = acc.shape[3];
        const std::int64_t h2 = k2.shape[2], w2 = k2.shape[3];
        T64 next;
        next.shape = {O, I, h1 + h2 - 1, w1 + w2 - 1};
        next.v.assign(static_cast<std::size_t>(next.numel()), 0.0);
        for (std::int64_t o = 0; o < O; ++o) {
            for (std::int64_t i = 0; i < I; ++i) {
                for (std::int64_t m = 0; m < M; ++m) {
                    for (std::int64_t dy1 = 0; dy1 < h1; ++dy1) {
                        for (std::int64_t dx1 = 0; dx1 < w1; ++dx1) {
                            for (std::int64_t dy2 = 0; dy2 < h2; ++dy2) {
                                for (std::int64_t dx2 = 0; dx2 < w2; ++dx2) {
                                    next.at(o, i, dy1 + dy2, dx1 + dx2) +=
                                        acc.at(m, i, dy1, dx1) * k2.at(o, m, dy2, dx2);
                                }
                            }
                        }
                    }
                }
            }
        }
        acc = std::move(next);
    }
    return acc;
}

dfx::ConfusionCounts confusion_brute(const dfx::BinaryMap& pred, const dfx::BinaryMap& gt,
                                     const dfx::BinaryMap* fov) {
    dfx::ConfusionCounts c;
    for (int y = 0; y < pred.height; ++y) {
        for (int x = 0; x < pred.width; ++x) {
            if (fov && !fov->at(y, x)) continue;
            if (pred.at(y, x) && gt.at(y, x)) ++c.tp;
            if (pred.at(y, x) && !gt.at(y, x)) ++c.fp;
            if (!pred.at(y, x) && gt.at(y, x)) ++c.fn;
            if (!pred.at(y, x) && !gt.at(y, x)) ++c.tn;
        }
    }
    return c;
}

double dice_brute(const dfx::GrayMap& prob, const dfx::BinaryMap& gt, const dfx::BinaryMap* fov,
                  double threshold) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (int y = 0; y < prob.height; ++y) {
        for (int x = 0; x < prob.width; ++x) {
            if (fov && !fov->at(y, x)) continue;
            const bool p = static_cast<double>(prob.at(y, x)) >= threshold;
            const bool g = gt.at(y, x) != 0;
            if (p && g) ++tp;
            if (p && !g) ++fp;
            if (!p && g) ++fn;
        }
    }
    if (2 * tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

double max_dice_brute(const dfx::GrayMap& prob, const dfx::BinaryMap& gt, const dfx::BinaryMap* fov,
                      double* best_threshold) {
    double best = -1.0, best_t = 0.0;
    for (int i = 1; i <= 99; ++i) {
        const double t = i / 100.0;
        const double d = dice_brute(prob, gt, fov, t);
        if (d > best) {
            best = d;
            best_t = t;
        }
    }
    if (best_threshold) *best_threshold = best_t;
    return best;
}

double kappa_brute(const dfx::ConfusionCounts& c) {
    const double n = static_cast<double>(c.total());
    if (n == 0.0) return 1.0;
    const double po = (static_cast<double>(c.tp) + static_cast<double>(c.tn)) / n;
    const double pe = (static_cast<double>(c.tp + c.fp) * static_cast<double>(c.tp + c.fn) +
                       static_cast<double>(c.fn + c.tn) * static_cast<double>(c.fp + c.tn)) /
                      (n * n);
    if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
    return (po - pe) / (1.0 - pe);
}

}  // namespace oracle
