#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xpe/errors.hpp"

namespace xpe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Row-major real array with an optional gradient buffer.
///
/// `Real` is float for every model the library trains; the double
/// instantiation exists so finite-difference checks can run the same code
/// without float32 roundoff swamping the difference quotients.
///
/// Leaves are either parameters (trainable) or constants. Intermediate results
/// produced while recording on a Tape are marked as gradient-tracking so the
/// reverse pass can route cotangents through them; the `trainable` flag is
/// reserved for leaves an optimizer may update.
template <typename Real>
class BasicTensor {
public:
    using value_type = Real;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, std::string name = {}, bool trainable = false)
        : shape_(std::move(shape)), values_(shape_numel(shape_), Real(0)),
          trainable_(trainable), name_(std::move(name)) {}

    BasicTensor(Shape shape, std::vector<Real> values, std::string name = {}, bool trainable = false)
        : shape_(std::move(shape)), values_(std::move(values)), trainable_(trainable),
          name_(std::move(name)) {
        if (values_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor '" + name_ + "': " + std::to_string(values_.size()) +
                                 " values do not fill shape " + shape_str(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return values_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // Matrix view: all leading extents folded into rows.
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<Real> values() { return values_; }
    std::span<const Real> values() const { return values_; }
    Real& operator[](std::size_t i) { return values_[i]; }
    Real operator[](std::size_t i) const { return values_[i]; }
    Real at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    Real& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

    const std::string& name() const { return name_; }
    void set_name(std::string name) { name_ = std::move(name); }

    bool trainable() const { return trainable_; }
    void set_trainable(bool on) {
        trainable_ = on;
        if (!on && !tracked_) grad_.clear();
    }

    // True for anything the reverse pass must deliver a cotangent to.
    bool requires_grad() const { return trainable_ || tracked_; }
    void mark_tracked() { tracked_ = true; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<Real> grad() { return grad_; }
    std::span<const Real> grad() const { return grad_; }
    void zero_grad() {
        if (requires_grad()) grad_.assign(values_.size(), Real(0));
    }
    void clear_grad() { grad_.clear(); }

    // Adds `delta` into the gradient buffer; silently ignored when the tensor
    // neither tracks nor trains.
    void accumulate_grad(std::span<const Real> delta) {
        if (!requires_grad()) return;
        if (grad_.empty()) grad_.assign(values_.size(), Real(0));
        for (std::size_t i = 0; i < grad_.size(); ++i) grad_[i] += delta[i];
    }
    std::span<Real> grad_buffer() {
        if (grad_.empty()) grad_.assign(values_.size(), Real(0));
        return grad_;
    }

    void reshape(Shape shape) {
        if (shape_numel(shape) != numel()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

private:
    Shape shape_;
    std::vector<Real> values_;
    std::vector<Real> grad_;
    bool trainable_ = false;
    bool tracked_ = false;
    std::string name_;
};

template <typename Real>
using BasicTensorPtr = std::shared_ptr<BasicTensor<Real>>;

using Tensor = BasicTensor<float>;
using TensorPtr = BasicTensorPtr<float>;

template <typename Real = float>
BasicTensorPtr<Real> make_tensor(Shape shape, std::string name = {}, bool trainable = false) {
    return std::make_shared<BasicTensor<Real>>(std::move(shape), std::move(name), trainable);
}

template <typename Real>
BasicTensorPtr<Real> make_tensor(Shape shape, std::vector<Real> values, std::string name = {},
                                 bool trainable = false) {
    return std::make_shared<BasicTensor<Real>>(std::move(shape), std::move(values), std::move(name),
                                               trainable);
}

/// Deterministic random stream.
///
/// The engine is mt19937_64, whose output sequence is fixed by the standard;
/// all conversions to floats, integers and normals are done here rather than
/// through std distributions, which are implementation-defined.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draws() const { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        return engine_();
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n) without modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw RangeError("uniform_int over an empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Box-Muller; the spare deviate is cached.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return mean + stddev * radius * std::cos(angle);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[uniform_int(i)]);
        }
    }

    // Independent child stream keyed by `stream`; does not advance this one.
    SeededRng fork(std::uint64_t stream) const { return SeededRng(mix(seed_ ^ mix(stream + 0x9E37))); }

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename Real>
void fill_normal(BasicTensor<Real>& t, SeededRng& rng, double stddev) {
    for (auto& v : t.values()) v = static_cast<Real>(rng.normal(0.0, stddev));
}

template <typename Real>
void fill_constant(BasicTensor<Real>& t, Real value) {
    for (auto& v : t.values()) v = value;
}

}  // namespace xpe
