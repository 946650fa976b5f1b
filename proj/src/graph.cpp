#include "deepfext/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "deepfext/parallel.hpp"

namespace dfx {

namespace kernels {

namespace {

// row[x] += sum_dx taps[dx] * src[x + dx - pw] with src zero outside [0,W).
// The 3- and 1-tap cases carry the whole stack, so they get tight paths.
inline void row_correlate(double* row, const float* src, const double* taps, std::int64_t kw,
                          std::int64_t pw, std::int64_t W) {
    if (kw == 3 && W >= 2) {
        const double w0 = taps[0], w1 = taps[1], w2 = taps[2];
        double s0 = src[0], s1 = src[1];
        row[0] += w1 * s0 + w2 * s1;
        for (std::int64_t x = 1; x < W - 1; ++x) {
            const double s2 = src[x + 1];
            row[x] += w0 * s0 + w1 * s1 + w2 * s2;
            s0 = s1;
            s1 = s2;
        }
        row[W - 1] += w0 * s0 + w1 * s1;
        return;
    }
    if (kw == 1) {
        const double w0 = taps[0];
        for (std::int64_t x = 0; x < W; ++x) row[x] += w0 * src[x];
        return;
    }
    for (std::int64_t dx = 0; dx < kw; ++dx) {
        const double wk = taps[dx];
        const std::int64_t shift = dx - pw;
        const std::int64_t x0 = std::max<std::int64_t>(0, -shift);
        const std::int64_t x1 = std::min<std::int64_t>(W, W - shift);
        const float* s = src + shift;
        for (std::int64_t x = x0; x < x1; ++x) row[x] += s[x] * wk;
    }
}

constexpr std::int64_t kMaxStackTaps = 16;

}  // namespace

void conv2d_same_forward(const Tensor& in, const Tensor& w, const Tensor* bias, Tensor& out) {
    const std::int64_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    const std::int64_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const float* iv = in.values.data();
    const float* wv = w.values.data();
    float* ov = out.values.data();

    parallel_for(N * O * H, [&](std::int64_t b, std::int64_t e) {
        std::vector<double> row(static_cast<std::size_t>(W));
        double taps_buf[kMaxStackTaps];
        std::vector<double> taps_heap(kw > kMaxStackTaps ? static_cast<std::size_t>(kw) : 0);
        double* taps = taps_heap.empty() ? taps_buf : taps_heap.data();
        for (std::int64_t r = b; r < e; ++r) {
            const std::int64_t y = r % H;
            const std::int64_t o = (r / H) % O;
            const std::int64_t n = r / (H * O);
            const double b0 = bias ? static_cast<double>(bias->values[static_cast<std::size_t>(o)]) : 0.0;
            std::fill(row.begin(), row.end(), b0);
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t dy = 0; dy < kh; ++dy) {
                    const std::int64_t iy = y + dy - ph;
                    if (iy < 0 || iy >= H) continue;
                    const float* irow = iv + ((n * C + c) * H + iy) * W;
                    const float* wrow = wv + ((o * C + c) * kh + dy) * kw;
                    for (std::int64_t dx = 0; dx < kw; ++dx) taps[dx] = wrow[dx];
                    row_correlate(row.data(), irow, taps, kw, pw, W);
                }
            }
            float* orow = ov + ((n * O + o) * H + y) * W;
            for (std::int64_t x = 0; x < W; ++x) orow[x] = static_cast<float>(row[static_cast<std::size_t>(x)]);
        }
    }, 4);
}

void conv2d_same_grad_input(const Tensor& grad_out, const Tensor& w, Tensor& grad_in) {
    const std::int64_t N = grad_in.shape[0], C = grad_in.shape[1], H = grad_in.shape[2], W = grad_in.shape[3];
    const std::int64_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const float* gv = grad_out.grad.data();
    const float* wv = w.values.data();
    float* giv = grad_in.grad.data();

    parallel_for(N * C * H, [&](std::int64_t b, std::int64_t e) {
        std::vector<double> row(static_cast<std::size_t>(W));
        double taps_buf[kMaxStackTaps];
        std::vector<double> taps_heap(kw > kMaxStackTaps ? static_cast<std::size_t>(kw) : 0);
        double* taps = taps_heap.empty() ? taps_buf : taps_heap.data();
        for (std::int64_t r = b; r < e; ++r) {
            const std::int64_t iy = r % H;
            const std::int64_t c = (r / H) % C;
            const std::int64_t n = r / (H * C);
            std::fill(row.begin(), row.end(), 0.0);
            for (std::int64_t o = 0; o < O; ++o) {
                for (std::int64_t dy = 0; dy < kh; ++dy) {
                    const std::int64_t gy = iy - dy + ph;
                    if (gy < 0 || gy >= H) continue;
                    const float* grow = gv + ((n * O + o) * H + gy) * W;
                    const float* wrow = wv + ((o * C + c) * kh + dy) * kw;
                    // correlation with the reversed kernel row
                    for (std::int64_t dx = 0; dx < kw; ++dx) taps[dx] = wrow[kw - 1 - dx];
                    row_correlate(row.data(), grow, taps, kw, pw, W);
                }
            }
            float* girow = giv + ((n * C + c) * H + iy) * W;
            for (std::int64_t x = 0; x < W; ++x) girow[x] += static_cast<float>(row[static_cast<std::size_t>(x)]);
        }
    }, 4);
}

void conv2d_same_grad_weights(const Tensor& grad_out, const Tensor& in, Tensor& grad_w) {
    const std::int64_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    const std::int64_t O = grad_w.shape[0], kh = grad_w.shape[2], kw = grad_w.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const float* gv = grad_out.grad.data();
    const float* iv = in.values.data();
    float* gwv = grad_w.grad.data();

    // one worker owns all of grad_w[o,...]: accumulation order is fixed.
    // All kw taps of a kernel row accumulate in one pass over each image row,
    // with the bounds-free interior split out.
    parallel_for(O, [&](std::int64_t b, std::int64_t e) {
        std::vector<double> acc(static_cast<std::size_t>(kw));
        for (std::int64_t o = b; o < e; ++o) {
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t dy = 0; dy < kh; ++dy) {
                    float* dst = gwv + ((o * C + c) * kh + dy) * kw;
                    if (kw == 3 && W >= 2) {
                        double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                        for (std::int64_t n = 0; n < N; ++n) {
                            for (std::int64_t y = 0; y < H; ++y) {
                                const std::int64_t iy = y + dy - ph;
                                if (iy < 0 || iy >= H) continue;
                                const float* grow = gv + ((n * O + o) * H + y) * W;
                                const float* irow = iv + ((n * C + c) * H + iy) * W;
                                double i0 = irow[0], i1 = irow[1];
                                {
                                    const double gx = grow[0];
                                    a1 += gx * i0;
                                    a2 += gx * i1;
                                }
                                for (std::int64_t x = 1; x < W - 1; ++x) {
                                    const double i2 = irow[x + 1];
                                    const double gx = grow[x];
                                    a0 += gx * i0;
                                    a1 += gx * i1;
                                    a2 += gx * i2;
                                    i0 = i1;
                                    i1 = i2;
                                }
                                {
                                    const double gx = grow[W - 1];
                                    a0 += gx * i0;
                                    a1 += gx * i1;
                                }
                            }
                        }
                        dst[0] += static_cast<float>(a0);
                        dst[1] += static_cast<float>(a1);
                        dst[2] += static_cast<float>(a2);
                        continue;
                    }
                    std::fill(acc.begin(), acc.end(), 0.0);
                    const std::int64_t xa = std::min(W, pw);          // left border
                    const std::int64_t xb = std::max(xa, W - pw);     // interior end
                    for (std::int64_t n = 0; n < N; ++n) {
                        for (std::int64_t y = 0; y < H; ++y) {
                            const std::int64_t iy = y + dy - ph;
                            if (iy < 0 || iy >= H) continue;
                            const float* grow = gv + ((n * O + o) * H + y) * W;
                            const float* irow = iv + ((n * C + c) * H + iy) * W - pw;
                            for (std::int64_t x = xa; x < xb; ++x) {
                                const double gx = grow[x];
                                const float* src = irow + x;
                                for (std::int64_t dx = 0; dx < kw; ++dx) acc[static_cast<std::size_t>(dx)] += gx * src[dx];
                            }
                            for (std::int64_t x = 0; x < xa; ++x) {
                                const double gx = grow[x];
                                const std::int64_t d0 = std::max<std::int64_t>(0, pw - x);
                                const std::int64_t d1 = std::min<std::int64_t>(kw, W - x + pw);
                                for (std::int64_t dx = d0; dx < d1; ++dx) acc[static_cast<std::size_t>(dx)] += gx * irow[x + dx];
                            }
                            for (std::int64_t x = xb; x < W; ++x) {
                                const double gx = grow[x];
                                const std::int64_t d0 = std::max<std::int64_t>(0, pw - x);
                                const std::int64_t d1 = std::min<std::int64_t>(kw, W - x + pw);
                                for (std::int64_t dx = d0; dx < d1; ++dx) acc[static_cast<std::size_t>(dx)] += gx * irow[x + dx];
                            }
                        }
                    }
                    for (std::int64_t dx = 0; dx < kw; ++dx) dst[dx] += static_cast<float>(acc[static_cast<std::size_t>(dx)]);
                }
            }
        }
    }, 1);
}

void conv2d_same_grad_bias(const Tensor& grad_out, Tensor& grad_b) {
    const std::int64_t N = grad_out.shape[0], O = grad_out.shape[1];
    const std::int64_t HW = grad_out.shape[2] * grad_out.shape[3];
    const float* gv = grad_out.grad.data();
    for (std::int64_t o = 0; o < O; ++o) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
            const float* base = gv + (n * O + o) * HW;
            for (std::int64_t i = 0; i < HW; ++i) acc += base[i];
        }
        grad_b.grad[static_cast<std::size_t>(o)] += static_cast<float>(acc);
    }
}

}  // namespace kernels

NodeId Graph::add_node(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw StateError("invalid graph node id " + std::to_string(id));
    }
}

NodeId Graph::leaf(TensorPtr t) {
    Node n;
    n.op = "leaf";
    n.out = std::move(t);
    n.requires_grad = false;
    return add_node(std::move(n));
}

NodeId Graph::param(TensorPtr t) {
    Node n;
    n.op = "param";
    n.out = std::move(t);
    n.requires_grad = true;
    return add_node(std::move(n));
}

NodeId Graph::conv2d_same(NodeId input, NodeId weights, NodeId bias) {
    check_id(input);
    check_id(weights);
    if (bias >= 0) check_id(bias);
    const Tensor& in = value(input);
    const Tensor& w = value(weights);
    if (in.shape.rank() != 4) throw ShapeError("conv2d_same expects (N,C,H,W) input, got " + in.shape.str());
    if (w.shape.rank() != 4) throw ShapeError("conv weights must be (O,I,kh,kw), got " + w.shape.str());
    if (w.shape[2] % 2 == 0 || w.shape[3] % 2 == 0) {
        throw ConfigError("conv kernel extents must be odd, got " + w.shape.str());
    }
    if (in.shape[1] != w.shape[1]) {
        throw ConfigError("conv channel mismatch: input has " + std::to_string(in.shape[1]) +
                          " channels, kernel expects " + std::to_string(w.shape[1]));
    }
    const Tensor* b = nullptr;
    if (bias >= 0) {
        b = &value(bias);
        if (b->shape.rank() != 1 || b->shape[0] != w.shape[0]) {
            throw ShapeError("conv bias must have length " + std::to_string(w.shape[0]));
        }
    }

    Node n;
    n.op = "conv2d_same";
    n.inputs = {input, weights, bias};
    n.out = make_tensor(Shape{in.shape[0], w.shape[0], in.shape[2], in.shape[3]});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad ||
                      nodes_[static_cast<std::size_t>(weights)].requires_grad ||
                      (bias >= 0 && nodes_[static_cast<std::size_t>(bias)].requires_grad);
    kernels::conv2d_same_forward(in, w, b, *n.out);

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        const Tensor& go = *self.out;
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        Node& nw = g.nodes_[static_cast<std::size_t>(self.inputs[1])];
        if (nin.requires_grad) {
            nin.out->ensure_grad();
            kernels::conv2d_same_grad_input(go, *nw.out, *nin.out);
        }
        if (nw.requires_grad) {
            nw.out->ensure_grad();
            kernels::conv2d_same_grad_weights(go, *nin.out, *nw.out);
        }
        if (self.inputs[2] >= 0) {
            Node& nb = g.nodes_[static_cast<std::size_t>(self.inputs[2])];
            if (nb.requires_grad) {
                nb.out->ensure_grad();
                kernels::conv2d_same_grad_bias(go, *nb.out);
            }
        }
    };
    return out_id;
}

NodeId Graph::conv2d_same(NodeId input, const ConvKernel& k) {
    return conv2d_same(input, param(k.weights), param(k.bias));
}

NodeId Graph::relu(NodeId input) {
    check_id(input);
    const Tensor& in = value(input);
    Node n;
    n.op = "relu";
    n.inputs = {input};
    n.out = make_tensor(in.shape);
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;
    const std::size_t sz = in.values.size();
    for (std::size_t i = 0; i < sz; ++i) n.out->values[i] = in.values[i] > 0.0f ? in.values[i] : 0.0f;

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const std::size_t sz = self.out->grad.size();
        for (std::size_t i = 0; i < sz; ++i) {
            if (nin.out->values[i] > 0.0f) nin.out->grad[i] += self.out->grad[i];
        }
    };
    return out_id;
}

NodeId Graph::concat_channels(const std::vector<NodeId>& inputs) {
    if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
    for (NodeId id : inputs) check_id(id);
    const Tensor& first = value(inputs[0]);
    if (first.shape.rank() != 4) throw ShapeError("concat_channels expects (N,C,H,W) tensors");
    const std::int64_t N = first.shape[0], H = first.shape[2], W = first.shape[3];
    std::int64_t ctotal = 0;
    bool rg = false;
    for (NodeId id : inputs) {
        const Tensor& t = value(id);
        if (t.shape.rank() != 4 || t.shape[0] != N || t.shape[2] != H || t.shape[3] != W) {
            throw ShapeError("concat_channels spatial/batch mismatch: " + first.shape.str() +
                             " vs " + t.shape.str());
        }
        ctotal += t.shape[1];
        rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
    }

    Node n;
    n.op = "concat_channels";
    n.inputs = inputs;
    n.out = make_tensor(Shape{N, ctotal, H, W});
    n.requires_grad = rg;
    const std::int64_t plane = H * W;
    std::int64_t coff = 0;
    for (NodeId id : inputs) {
        const Tensor& t = value(id);
        const std::int64_t c = t.shape[1];
        for (std::int64_t b = 0; b < N; ++b) {
            std::memcpy(n.out->values.data() + (b * ctotal + coff) * plane,
                        t.values.data() + b * c * plane,
                        static_cast<std::size_t>(c * plane) * sizeof(float));
        }
        coff += c;
    }

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        const std::int64_t N = self.out->shape[0];
        const std::int64_t ctotal = self.out->shape[1];
        const std::int64_t plane = self.out->shape[2] * self.out->shape[3];
        std::int64_t coff = 0;
        for (NodeId id : self.inputs) {
            Node& nin = g.nodes_[static_cast<std::size_t>(id)];
            const std::int64_t c = nin.out->shape[1];
            if (nin.requires_grad) {
                nin.out->ensure_grad();
                for (std::int64_t b = 0; b < N; ++b) {
                    const float* src = self.out->grad.data() + (b * ctotal + coff) * plane;
                    float* dst = nin.out->grad.data() + b * c * plane;
                    for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
            }
            coff += c;
        }
    };
    return out_id;
}

NodeId Graph::to_mesh(NodeId input, int mesh_h, int mesh_w) {
    check_id(input);
    const Tensor& in = value(input);
    if (in.shape.rank() != 4) throw ShapeError("to_mesh expects (N,C,H,W), got " + in.shape.str());
    const std::int64_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    if (C != static_cast<std::int64_t>(mesh_h) * mesh_w) {
        throw ConfigError("to_mesh channel count " + std::to_string(C) + " != mesh " +
                          std::to_string(mesh_h) + "x" + std::to_string(mesh_w));
    }

    Node n;
    n.op = "to_mesh";
    n.inputs = {input};
    n.out = make_tensor(Shape{N * H * W, 1, mesh_h, mesh_w});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;
    const float* iv = in.values.data();
    float* ov = n.out->values.data();
    const std::int64_t HW = H * W;
    parallel_for(N * HW, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t m = b; m < e; ++m) {
            const std::int64_t nimg = m / HW;
            const std::int64_t px = m % HW;
            const float* src = iv + nimg * C * HW + px;
            float* dst = ov + m * C;
            for (std::int64_t c = 0; c < C; ++c) dst[c] = src[c * HW];
        }
    });

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id, C = C, HW = HW](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const std::int64_t M = self.out->shape[0];
        const float* gv = self.out->grad.data();
        float* giv = nin.out->grad.data();
        for (std::int64_t m = 0; m < M; ++m) {
            const std::int64_t nimg = m / HW;
            const std::int64_t px = m % HW;
            float* dst = giv + nimg * C * HW + px;
            const float* src = gv + m * C;
            for (std::int64_t c = 0; c < C; ++c) dst[c * HW] += src[c];
        }
    };
    return out_id;
}

NodeId Graph::from_mesh(NodeId input, std::int64_t n_img, std::int64_t h, std::int64_t w) {
    check_id(input);
    const Tensor& in = value(input);
    if (in.shape.rank() != 4 || in.shape[1] != 1) {
        throw ShapeError("from_mesh expects (M,1,mh,mw), got " + in.shape.str());
    }
    const std::int64_t M = in.shape[0], C = in.shape[2] * in.shape[3];
    if (M != n_img * h * w) {
        throw ShapeError("from_mesh: M=" + std::to_string(M) + " != " + std::to_string(n_img) + "*" +
                         std::to_string(h) + "*" + std::to_string(w));
    }
    Node n;
    n.op = "from_mesh";
    n.inputs = {input};
    n.out = make_tensor(Shape{n_img, C, h, w});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;
    const std::int64_t HW = h * w;
    const float* iv = in.values.data();
    float* ov = n.out->values.data();
    for (std::int64_t m = 0; m < M; ++m) {
        const std::int64_t b = m / HW;
        const std::int64_t px = m % HW;
        for (std::int64_t c = 0; c < C; ++c) ov[(b * C + c) * HW + px] = iv[m * C + c];
    }

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id, C = C, HW = HW](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const std::int64_t M = nin.out->shape[0];
        const float* gv = self.out->grad.data();
        float* giv = nin.out->grad.data();
        for (std::int64_t m = 0; m < M; ++m) {
            const std::int64_t b = m / HW;
            const std::int64_t px = m % HW;
            for (std::int64_t c = 0; c < C; ++c) giv[m * C + c] += gv[(b * C + c) * HW + px];
        }
    };
    return out_id;
}

NodeId Graph::from_pixels(NodeId input, std::int64_t n_img, std::int64_t h, std::int64_t w) {
    check_id(input);
    const Tensor& in = value(input);
    if (in.shape.rank() != 2) throw ShapeError("from_pixels expects (M,K), got " + in.shape.str());
    const std::int64_t M = in.shape[0], K = in.shape[1];
    if (M != n_img * h * w) {
        throw ShapeError("from_pixels: M=" + std::to_string(M) + " != " + std::to_string(n_img) +
                         "*" + std::to_string(h) + "*" + std::to_string(w));
    }

    Node n;
    n.op = "from_pixels";
    n.inputs = {input};
    n.out = make_tensor(Shape{n_img, K, h, w});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;
    const std::int64_t HW = h * w;
    const float* iv = in.values.data();
    float* ov = n.out->values.data();
    for (std::int64_t m = 0; m < M; ++m) {
        const std::int64_t b = m / HW;
        const std::int64_t px = m % HW;
        for (std::int64_t k = 0; k < K; ++k) ov[(b * K + k) * HW + px] = iv[m * K + k];
    }

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id, K = K, HW = HW](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const std::int64_t M = nin.out->shape[0];
        const float* gv = self.out->grad.data();
        float* giv = nin.out->grad.data();
        for (std::int64_t m = 0; m < M; ++m) {
            const std::int64_t b = m / HW;
            const std::int64_t px = m % HW;
            for (std::int64_t k = 0; k < K; ++k) giv[m * K + k] += gv[(b * K + k) * HW + px];
        }
    };
    return out_id;
}

NodeId Graph::global_avg_pool(NodeId input) {
    check_id(input);
    const Tensor& in = value(input);
    if (in.shape.rank() != 4) throw ShapeError("global_avg_pool expects (M,K,h,w), got " + in.shape.str());
    const std::int64_t M = in.shape[0], K = in.shape[1], HW = in.shape[2] * in.shape[3];

    Node n;
    n.op = "global_avg_pool";
    n.inputs = {input};
    n.out = make_tensor(Shape{M, K});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;
    const float* iv = in.values.data();
    float* ov = n.out->values.data();
    parallel_for(M * K, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            const float* base = iv + i * HW;
            double acc = 0.0;
            for (std::int64_t j = 0; j < HW; ++j) acc += base[j];
            ov[i] = static_cast<float>(acc / static_cast<double>(HW));
        }
    });

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id, HW = HW](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const std::int64_t MK = self.out->numel();
        const float inv = 1.0f / static_cast<float>(HW);
        const float* gv = self.out->grad.data();
        float* giv = nin.out->grad.data();
        for (std::int64_t i = 0; i < MK; ++i) {
            const float gshare = gv[i] * inv;
            float* base = giv + i * HW;
            for (std::int64_t j = 0; j < HW; ++j) base[j] += gshare;
        }
    };
    return out_id;
}

NodeId Graph::softmax_cross_entropy(NodeId logits, const std::vector<int>& labels,
                                    const std::vector<float>& pixel_weights) {
    check_id(logits);
    const Tensor& lg = value(logits);
    if (lg.shape.rank() != 4) throw ShapeError("softmax_cross_entropy expects (N,K,H,W) logits");
    const std::int64_t N = lg.shape[0], K = lg.shape[1], H = lg.shape[2], W = lg.shape[3];
    const std::int64_t P = N * H * W;
    if (static_cast<std::int64_t>(labels.size()) != P) {
        throw ShapeError("label map has " + std::to_string(labels.size()) + " entries, expected " +
                         std::to_string(P));
    }
    if (!pixel_weights.empty() && static_cast<std::int64_t>(pixel_weights.size()) != P) {
        throw ShapeError("weight mask size mismatch");
    }
    for (std::int64_t i = 0; i < P; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= K) {
            throw DataError("label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                            " out of range [0," + std::to_string(K) + ") at pixel " + std::to_string(i));
        }
        if (!pixel_weights.empty() && pixel_weights[static_cast<std::size_t>(i)] < 0.0f) {
            throw DataError("weight mask must be nonnegative");
        }
    }

    auto probs = make_tensor(lg.shape);
    const std::int64_t HW = H * W;
    const float* lv = lg.values.data();
    float* pv = probs->values.data();
    std::vector<double> px_loss(static_cast<std::size_t>(P));
    parallel_for(P, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            const std::int64_t n = i / HW;
            const std::int64_t px = i % HW;
            const float* lbase = lv + n * K * HW + px;
            double mx = lbase[0];
            for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(lbase[k * HW]));
            double denom = 0.0;
            for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(lbase[k * HW]) - mx);
            const double lse = mx + std::log(denom);
            for (std::int64_t k = 0; k < K; ++k) {
                pv[n * K * HW + k * HW + px] =
                    static_cast<float>(std::exp(static_cast<double>(lbase[k * HW]) - lse));
            }
            const int y = labels[static_cast<std::size_t>(i)];
            px_loss[static_cast<std::size_t>(i)] = lse - static_cast<double>(lbase[y * HW]);
        }
    });

    double wsum = 0.0, lsum = 0.0;
    for (std::int64_t i = 0; i < P; ++i) {
        const double w = pixel_weights.empty() ? 1.0 : pixel_weights[static_cast<std::size_t>(i)];
        wsum += w;
        lsum += w * px_loss[static_cast<std::size_t>(i)];
    }
    const double mean = wsum > 0.0 ? lsum / wsum : 0.0;

    Node n;
    n.op = "softmax_cross_entropy";
    n.inputs = {logits};
    n.out = make_tensor(Shape{1}, {static_cast<float>(mean)});
    n.requires_grad = nodes_[static_cast<std::size_t>(logits)].requires_grad;

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop =
        [out_id, probs, labels, pixel_weights, wsum, K = K, HW = HW](Graph& g) {
            Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
            Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
            if (!nin.requires_grad || wsum <= 0.0) return;
            nin.out->ensure_grad();
            const float gscale = self.out->grad[0];
            const std::int64_t P = static_cast<std::int64_t>(labels.size());
            const float* pv = probs->values.data();
            float* giv = nin.out->grad.data();
            for (std::int64_t i = 0; i < P; ++i) {
                const double w = pixel_weights.empty() ? 1.0 : pixel_weights[static_cast<std::size_t>(i)];
                if (w == 0.0) continue;
                const float scale = static_cast<float>(w / wsum) * gscale;
                const std::int64_t n = i / HW;
                const std::int64_t px = i % HW;
                const int y = labels[static_cast<std::size_t>(i)];
                for (std::int64_t k = 0; k < K; ++k) {
                    const float p = pv[n * K * HW + k * HW + px];
                    const float delta = (k == y) ? 1.0f : 0.0f;
                    giv[n * K * HW + k * HW + px] += (p - delta) * scale;
                }
            }
        };
    return out_id;
}

NodeId Graph::dot(NodeId input, std::vector<float> coeffs) {
    check_id(input);
    const Tensor& in = value(input);
    if (static_cast<std::int64_t>(coeffs.size()) != in.numel()) {
        throw ShapeError("dot coefficient count mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
        acc += static_cast<double>(in.values[i]) * coeffs[i];
    }
    Node n;
    n.op = "dot";
    n.inputs = {input};
    n.out = make_tensor(Shape{1}, {static_cast<float>(acc)});
    n.requires_grad = nodes_[static_cast<std::size_t>(input)].requires_grad;

    NodeId out_id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(out_id)].backprop = [out_id, coeffs = std::move(coeffs)](Graph& g) {
        Node& self = g.nodes_[static_cast<std::size_t>(out_id)];
        Node& nin = g.nodes_[static_cast<std::size_t>(self.inputs[0])];
        if (!nin.requires_grad) return;
        nin.out->ensure_grad();
        const float gv = self.out->grad[0];
        for (std::size_t i = 0; i < coeffs.size(); ++i) nin.out->grad[i] += gv * coeffs[i];
    };
    return out_id;
}

void Graph::backward(NodeId loss) {
    if (nodes_.empty()) throw StateError("backward called before any forward pass");
    if (backward_ran_) throw StateError("backward already ran on this graph");
    check_id(loss);
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.out->numel() != 1) {
        throw StateError("backward requires a scalar loss, got shape " + ln.out->shape.str());
    }
    ln.out->ensure_grad();
    ln.out->grad[0] += 1.0f;
    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || !n.backprop || !n.out->has_grad()) continue;
        n.backprop(*this);
    }
    backward_ran_ = true;
}

}  // namespace dfx
