#include "deepfext/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace dfx {

void Shape::validate() const {
    if (dims_.empty() || dims_.size() > 4) {
        throw ShapeError("shape rank must be 1..4, got " + std::to_string(dims_.size()));
    }
    std::int64_t n = 1;
    for (std::int64_t d : dims_) {
        if (d < 1) throw ShapeError("shape extents must be >= 1, got " + str());
        if (n > std::numeric_limits<std::int64_t>::max() / d) {
            throw ShapeError("shape element count overflows: " + str());
        }
        n *= d;
    }
}

std::string Shape::str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ",";
        os << dims_[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> v) : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape.str());
    }
}

bool Tensor::all_finite() const {
    for (float v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

TensorPtr make_tensor(Shape s) { return std::make_shared<Tensor>(std::move(s)); }

TensorPtr make_tensor(Shape s, std::vector<float> v) {
    return std::make_shared<Tensor>(std::move(s), std::move(v));
}

ConvKernel::ConvKernel(int out_ch, int in_ch, int kh, int kw)
    : out_channels(out_ch), in_channels(in_ch), kernel_h(kh), kernel_w(kw) {
    if (out_ch < 1 || in_ch < 1 || kh < 1 || kw < 1) {
        throw ConfigError("conv kernel dims must be positive");
    }
    if (kh % 2 == 0 || kw % 2 == 0) {
        throw ConfigError("conv kernel extents must be odd for same padding, got " +
                          std::to_string(kh) + "x" + std::to_string(kw));
    }
    weights = make_tensor(Shape{out_ch, in_ch, kh, kw});
    bias = make_tensor(Shape{out_ch});
}

std::uint64_t WeightRng::next() {
    // splitmix64; stable everywhere, good enough for weight draws
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double WeightRng::uniform01() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

float WeightRng::uniform_symmetric(double bound) {
    return static_cast<float>((uniform01() * 2.0 - 1.0) * bound);
}

void init_he_uniform(ConvKernel& k, WeightRng& rng) {
    double fan_in = static_cast<double>(k.in_channels) * k.kernel_h * k.kernel_w;
    double bound = std::sqrt(6.0 / fan_in);
    for (float& w : k.weights->values) w = rng.uniform_symmetric(bound);
    std::fill(k.bias->values.begin(), k.bias->values.end(), 0.0f);
}

}  // namespace dfx
