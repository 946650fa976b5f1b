#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deepfext/common.hpp"

namespace dfx {

// Dense extents, batch-outermost. Rank 1 (bias vectors), 2 (per-pixel logits),
// 3 (C,H,W) and 4 (N,C,H,W) are the shapes the toolkit traffics in.
class Shape {
  public:
    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
    explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

    int rank() const { return static_cast<int>(dims_.size()); }
    std::int64_t operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
    const std::vector<std::int64_t>& dims() const { return dims_; }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (std::int64_t d : dims_) n *= d;
        return n;
    }

    bool operator==(const Shape& o) const { return dims_ == o.dims_; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const;

  private:
    void validate() const;
    std::vector<std::int64_t> dims_;
};

// Flat row-major 32-bit storage with an optional gradient buffer of the same
// length. Gradient buffers are allocated lazily by the graph and accumulate
// additively across fan-out.
struct Tensor {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;  // empty until ensure_grad()

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), values(static_cast<std::size_t>(shape.numel()), 0.0f) {}
    Tensor(Shape s, std::vector<float> v);

    std::int64_t numel() const { return shape.numel(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0f);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
    }
    bool has_grad() const { return !grad.empty(); }

    float& at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    float at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    float& at3(std::int64_t c, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>((c * shape[1] + y) * shape[2] + x)];
    }
    float at3(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>((c * shape[1] + y) * shape[2] + x)];
    }

    bool all_finite() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape s);
TensorPtr make_tensor(Shape s, std::vector<float> v);

// (O,I,kh,kw) weights plus a length-O bias. Odd extents only, so "same"
// padding stays symmetric.
struct ConvKernel {
    int out_channels = 0;
    int in_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    TensorPtr weights;  // (O,I,kh,kw)
    TensorPtr bias;     // (O)

    ConvKernel() = default;
    ConvKernel(int out_ch, int in_ch, int kh, int kw);

    std::int64_t weight_param_count() const {
        return static_cast<std::int64_t>(out_channels) * in_channels * kernel_h * kernel_w;
    }
    std::int64_t param_count() const { return weight_param_count() + out_channels; }
};

// Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero bias. The draw
// uses explicit 53-bit mapping so sequences are identical across platforms.
class WeightRng {
  public:
    explicit WeightRng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}
    double uniform01();                      // [0,1)
    float uniform_symmetric(double bound);   // [-bound, bound)
    std::uint64_t next();

  private:
    std::uint64_t state_;
};

void init_he_uniform(ConvKernel& k, WeightRng& rng);

}  // namespace dfx
