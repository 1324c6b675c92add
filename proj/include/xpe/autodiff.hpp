#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xpe/tensor.hpp"

namespace xpe {

/// Define-by-run reverse-mode tape.
///
/// Every primitive that sees at least one gradient-requiring input appends a
/// record holding its inputs, its output and a closure that pulls the output
/// cotangent back into the inputs. Records are appended in evaluation order,
/// so walking them backwards is a valid topological order.
template <typename Real>
class BasicTape {
public:
    using Ptr = BasicTensorPtr<Real>;

    struct Record {
        std::string op;
        std::vector<Ptr> inputs;
        Ptr output;
        std::function<void()> pullback;
    };

    explicit BasicTape(bool recording = true) : recording_(recording) {}

    static BasicTape inference() { return BasicTape(false); }

    bool recording() const { return recording_; }
    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    bool wants(std::initializer_list<const Ptr*> inputs) const {
        if (!recording_) return false;
        return std::any_of(inputs.begin(), inputs.end(),
                           [](const Ptr* p) { return (*p)->requires_grad(); });
    }
    bool wants(const std::vector<Ptr>& inputs) const {
        if (!recording_) return false;
        return std::any_of(inputs.begin(), inputs.end(),
                           [](const Ptr& p) { return p->requires_grad(); });
    }

    void record(std::string op, std::vector<Ptr> inputs, const Ptr& output,
                std::function<void()> pullback) {
        output->mark_tracked();
        records_.push_back({std::move(op), std::move(inputs), output, std::move(pullback)});
    }

    /// Seeds d(loss)/d(loss) = 1 and runs every record once, newest first.
    /// Returns the number of records whose pullback executed.
    std::size_t backward(const Ptr& loss) {
        if (!loss || loss->numel() != 1) {
            throw ContractError("backward needs a scalar loss, got shape " +
                                (loss ? shape_str(loss->shape()) : std::string("<null>")));
        }
        const bool on_tape = std::any_of(records_.begin(), records_.end(),
                                         [&](const Record& r) { return r.output == loss; });
        if (!on_tape) {
            throw ContractError("loss '" + loss->name() + "' was not produced on this tape");
        }
        loss->grad_buffer()[0] = Real(1);
        std::size_t visited = 0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output->has_grad()) continue;
            it->pullback();
            ++visited;
        }
        return visited;
    }

private:
    bool recording_;
    std::vector<Record> records_;
};

using Tape = BasicTape<float>;

namespace ops {

// Additive attention-mask constant for padded key positions.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

template <typename Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <typename Real>
Shape with_last(const Shape& s, std::size_t last) {
    Shape out = s.empty() ? Shape{1} : s;
    out.back() = last;
    return out;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846); }

}  // namespace detail

/// C = A·B. A may carry leading batch extents; they are folded into rows.
template <typename Real>
BasicTensorPtr<Real> matmul(BasicTape<Real>& tape, const BasicTensorPtr<Real>& a,
                            const BasicTensorPtr<Real>& b) {
    if (b->rank() != 2 || a->rank() < 1 || a->cols() != b->dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a->shape()) + " by " +
                             shape_str(b->shape()));
    }
    const std::size_t m = a->rows(), k = a->cols(), n = b->dim(1);
    auto out = make_tensor<Real>(detail::with_last<Real>(a->shape(), n), "matmul");
    const auto av = a->values();
    const auto bv = b->values();
    auto ov = out->values();
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            if (x == 0.0) continue;
            const Real* brow = &bv[p * n];
            for (std::size_t j = 0; j < n; ++j) acc[j] += x * brow[j];
        }
        for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = static_cast<Real>(acc[j]);
    }
    if (tape.wants({&a, &b})) {
        tape.record("matmul", {a, b}, out, [a, b, out, m, k, n] {
            const auto g = out->grad();
            if (a->requires_grad()) {
                auto ga = a->grad_buffer();
                const auto bv = b->values();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += double(g[i * n + j]) * bv[p * n + j];
                        ga[i * k + p] += static_cast<Real>(s);
                    }
                }
            }
            if (b->requires_grad()) {
                std::vector<double> acc(k * n, 0.0);
                const auto av = a->values();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double x = av[i * k + p];
                        if (x == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) acc[p * n + j] += x * g[i * n + j];
                    }
                }
                auto gb = b->grad_buffer();
                for (std::size_t i = 0; i < acc.size(); ++i) gb[i] += static_cast<Real>(acc[i]);
            }
        });
    }
    return out;
}

template <typename Real>
BasicTensorPtr<Real> add(BasicTape<Real>& tape, const BasicTensorPtr<Real>& a,
                         const BasicTensorPtr<Real>& b) {
    detail::require_same_shape(*a, *b, "add");
    auto out = make_tensor<Real>(a->shape(), "add");
    for (std::size_t i = 0; i < out->numel(); ++i) (*out)[i] = (*a)[i] + (*b)[i];
    if (tape.wants({&a, &b})) {
        tape.record("add", {a, b}, out, [a, b, out] {
            a->accumulate_grad(out->grad());
            b->accumulate_grad(out->grad());
        });
    }
    return out;
}

/// x + bias broadcast over rows; bias has one entry per column.
template <typename Real>
BasicTensorPtr<Real> add_bias(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x,
                              const BasicTensorPtr<Real>& bias) {
    if (bias->numel() != x->cols()) {
        throw DimensionError("add_bias: bias " + shape_str(bias->shape()) + " does not match " +
                             shape_str(x->shape()));
    }
    const std::size_t m = x->rows(), n = x->cols();
    auto out = make_tensor<Real>(x->shape(), "add_bias");
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*out)[i * n + j] = (*x)[i * n + j] + (*bias)[j];
    if (tape.wants({&x, &bias})) {
        tape.record("add_bias", {x, bias}, out, [x, bias, out, m, n] {
            const auto g = out->grad();
            x->accumulate_grad(g);
            if (bias->requires_grad()) {
                auto gb = bias->grad_buffer();
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) s += g[i * n + j];
                    gb[j] += static_cast<Real>(s);
                }
            }
        });
    }
    return out;
}

template <typename Real>
BasicTensorPtr<Real> mul(BasicTape<Real>& tape, const BasicTensorPtr<Real>& a,
                         const BasicTensorPtr<Real>& b) {
    detail::require_same_shape(*a, *b, "mul");
    auto out = make_tensor<Real>(a->shape(), "mul");
    for (std::size_t i = 0; i < out->numel(); ++i) (*out)[i] = (*a)[i] * (*b)[i];
    if (tape.wants({&a, &b})) {
        tape.record("mul", {a, b}, out, [a, b, out] {
            const auto g = out->grad();
            if (a->requires_grad()) {
                auto ga = a->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*b)[i];
            }
            if (b->requires_grad()) {
                auto gb = b->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*a)[i];
            }
        });
    }
    return out;
}

template <typename Real>
BasicTensorPtr<Real> scale(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x, double factor) {
    auto out = make_tensor<Real>(x->shape(), "scale");
    for (std::size_t i = 0; i < out->numel(); ++i) (*out)[i] = static_cast<Real>((*x)[i] * factor);
    if (tape.wants({&x})) {
        tape.record("scale", {x}, out, [x, out, factor] {
            const auto g = out->grad();
            auto gx = x->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<Real>(g[i] * factor);
        });
    }
    return out;
}

/// Sum of all elements as a scalar.
template <typename Real>
BasicTensorPtr<Real> sum(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x) {
    double s = 0.0;
    for (auto v : x->values()) s += v;
    auto out = make_tensor<Real>(Shape{}, std::vector<Real>{static_cast<Real>(s)}, "sum");
    if (tape.wants({&x})) {
        tape.record("sum", {x}, out, [x, out] {
            const Real g = out->grad()[0];
            auto gx = x->grad_buffer();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

template <typename Real>
BasicTensorPtr<Real> tanh(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x) {
    auto out = make_tensor<Real>(x->shape(), "tanh");
    for (std::size_t i = 0; i < out->numel(); ++i) (*out)[i] = std::tanh((*x)[i]);
    if (tape.wants({&x})) {
        tape.record("tanh", {x}, out, [x, out] {
            const auto g = out->grad();
            auto gx = x->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = (*out)[i];
                gx[i] += static_cast<Real>(g[i] * (1.0 - y * y));
            }
        });
    }
    return out;
}

/// Exact GELU, x·Φ(x), with Φ the standard normal CDF.
template <typename Real>
BasicTensorPtr<Real> gelu(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x) {
    auto out = make_tensor<Real>(x->shape(), "gelu");
    for (std::size_t i = 0; i < out->numel(); ++i) {
        const double v = (*x)[i];
        (*out)[i] = static_cast<Real>(v * detail::normal_cdf(v));
    }
    if (tape.wants({&x})) {
        tape.record("gelu", {x}, out, [x, out] {
            const auto g = out->grad();
            auto gx = x->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = (*x)[i];
                gx[i] += static_cast<Real>(g[i] * (detail::normal_cdf(v) + v * detail::normal_pdf(v)));
            }
        });
    }
    return out;
}

/// Row-wise softmax with max subtraction, accumulated in double.
template <typename Real>
BasicTensorPtr<Real> softmax_rows(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x) {
    const std::size_t m = x->rows(), n = x->cols();
    auto out = make_tensor<Real>(x->shape(), "softmax_rows");
    for (std::size_t i = 0; i < m; ++i) {
        const Real* row = &(*x)[i * n];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(row[j])) {
                throw NumericError("softmax_rows: non-finite input in row " + std::to_string(i));
            }
            mx = std::max(mx, double(row[j]));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(double(row[j]) - mx);
        for (std::size_t j = 0; j < n; ++j) {
            (*out)[i * n + j] = static_cast<Real>(std::exp(double(row[j]) - mx) / z);
        }
    }
    if (tape.wants({&x})) {
        tape.record("softmax_rows", {x}, out, [x, out, m, n] {
            const auto g = out->grad();
            auto gx = x->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += double(g[i * n + j]) * (*out)[i * n + j];
                for (std::size_t j = 0; j < n; ++j) {
                    gx[i * n + j] += static_cast<Real>((*out)[i * n + j] * (g[i * n + j] - dot));
                }
            }
        });
    }
    return out;
}

/// Per-row normalization to zero mean / unit variance, then gain and bias.
template <typename Real>
BasicTensorPtr<Real> layer_norm(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x,
                                const BasicTensorPtr<Real>& gain, const BasicTensorPtr<Real>& bias,
                                double eps) {
    const std::size_t m = x->rows(), n = x->cols();
    if (gain->numel() != n || bias->numel() != n) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain->shape()) + "/" +
                             shape_str(bias->shape()) + " vs input " + shape_str(x->shape()));
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    auto out = make_tensor<Real>(x->shape(), "layer_norm");
    std::vector<double> xhat(m * n), rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += (*x)[i * n + j];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = (*x)[i * n + j] - mean;
            var += c * c;
        }
        var /= double(n);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = ((*x)[i * n + j] - mean) * rstd[i];
            xhat[i * n + j] = h;
            (*out)[i * n + j] = static_cast<Real>(double((*gain)[j]) * h + (*bias)[j]);
        }
    }
    if (tape.wants({&x, &gain, &bias})) {
        tape.record("layer_norm", {x, gain, bias}, out,
                    [x, gain, bias, out, m, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
            const auto g = out->grad();
            if (gain->requires_grad() || bias->requires_grad()) {
                std::vector<double> dg(n, 0.0), db(n, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        dg[j] += double(g[i * n + j]) * xhat[i * n + j];
                        db[j] += g[i * n + j];
                    }
                }
                if (gain->requires_grad()) {
                    auto gg = gain->grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) gg[j] += static_cast<Real>(dg[j]);
                }
                if (bias->requires_grad()) {
                    auto gb = bias->grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<Real>(db[j]);
                }
            }
            if (x->requires_grad()) {
                auto gx = x->grad_buffer();
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = double(g[i * n + j]) * (*gain)[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * n + j];
                    }
                    mean_d /= double(n);
                    mean_dx /= double(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = double(g[i * n + j]) * (*gain)[j];
                        gx[i * n + j] +=
                            static_cast<Real>(rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx));
                    }
                }
            }
        });
    }
    return out;
}

/// Mean negative log-likelihood of the true class under row-wise softmax.
template <typename Real>
BasicTensorPtr<Real> cross_entropy(BasicTape<Real>& tape, const BasicTensorPtr<Real>& logits,
                                   std::span<const int> labels) {
    const std::size_t batch = logits->rows(), k = logits->cols();
    if (labels.size() != batch) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(batch) + " logit rows");
    }
    if (batch == 0) throw DimensionError("cross_entropy: empty batch");
    std::vector<double> probs(batch * k);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                             std::to_string(k) + ")");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, double(logits->at(i, j)));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(double(logits->at(i, j)) - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(double(logits->at(i, j)) - log_z);
        total += log_z - double(logits->at(i, labels[i]));
    }
    if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
    auto out = make_tensor<Real>(Shape{}, std::vector<Real>{static_cast<Real>(total / double(batch))},
                                 "cross_entropy");
    if (tape.wants({&logits})) {
        std::vector<int> owned(labels.begin(), labels.end());
        tape.record("cross_entropy", {logits}, out,
                    [logits, out, batch, k, probs = std::move(probs), owned = std::move(owned)] {
            const double g = out->grad()[0] / double(batch);
            auto gl = logits->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double onehot = (static_cast<std::size_t>(owned[i]) == j) ? 1.0 : 0.0;
                    gl[i * k + j] += static_cast<Real>(g * (probs[i * k + j] - onehot));
                }
            }
        });
    }
    return out;
}

/// out[r] = x[indices[r]]; repeated indices accumulate on the way back.
template <typename Real>
BasicTensorPtr<Real> gather_rows(BasicTape<Real>& tape, const BasicTensorPtr<Real>& x,
                                 std::span<const std::size_t> indices) {
    const std::size_t n = x->cols(), rows = x->rows();
    auto out = make_tensor<Real>(Shape{indices.size(), n}, "gather_rows");
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= rows) {
            throw IndexError("gather_rows: row " + std::to_string(indices[r]) + " out of range for " +
                             shape_str(x->shape()) + (x->name().empty() ? "" : " ('" + x->name() + "')"));
        }
        std::copy_n(&(*x)[indices[r] * n], n, &(*out)[r * n]);
    }
    if (tape.wants({&x})) {
        std::vector<std::size_t> owned(indices.begin(), indices.end());
        tape.record("gather_rows", {x}, out, [x, out, n, owned = std::move(owned)] {
            const auto g = out->grad();
            auto gx = x->grad_buffer();
            for (std::size_t r = 0; r < owned.size(); ++r) {
                for (std::size_t j = 0; j < n; ++j) gx[owned[r] * n + j] += g[r * n + j];
            }
        });
    }
    return out;
}

/// Stacks matrices vertically; all parts share the column count.
template <typename Real>
BasicTensorPtr<Real> concat_rows(BasicTape<Real>& tape, const std::vector<BasicTensorPtr<Real>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts.front()->cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p->cols() != n) {
            throw DimensionError("concat_rows: width " + std::to_string(p->cols()) + " vs " +
                                 std::to_string(n));
        }
        total += p->rows();
    }
    auto out = make_tensor<Real>(Shape{total, n}, "concat_rows");
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p->values().begin(), p->values().end(), out->values().begin() + offset);
        offset += p->numel();
    }
    if (tape.wants(parts)) {
        tape.record("concat_rows", parts, out, [parts, out] {
            const auto g = out->grad();
            std::size_t offset = 0;
            for (const auto& p : parts) {
                p->accumulate_grad(g.subspan(offset, p->numel()));
                offset += p->numel();
            }
        });
    }
    return out;
}

/// Multi-head scaled dot-product attention over a batch of equal-length
/// sequences stored as (batch·seq)×d matrices. Keys with key_mask == 0 get
/// kMaskedLogit added before the softmax.
template <typename Real>
BasicTensorPtr<Real> attention(BasicTape<Real>& tape, const BasicTensorPtr<Real>& q,
                               const BasicTensorPtr<Real>& k, const BasicTensorPtr<Real>& v,
                               std::size_t batch, std::size_t seq, std::size_t heads,
                               std::span<const std::uint8_t> key_mask) {
    detail::require_same_shape(*q, *k, "attention");
    detail::require_same_shape(*q, *v, "attention");
    const std::size_t d = q->cols();
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                             std::to_string(heads) + " heads");
    }
    if (q->rows() != batch * seq || key_mask.size() != batch * seq) {
        throw DimensionError("attention: " + shape_str(q->shape()) + " does not hold " +
                             std::to_string(batch) + " sequences of length " + std::to_string(seq));
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    auto out = make_tensor<Real>(q->shape(), "attention");
    std::vector<double> probs(batch * heads * seq * seq);
    std::vector<double> acc(dh);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < seq; ++i) {
                double* p = &probs[((b * heads + h) * seq + i) * seq];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += double(q->at(base + i, c0 + c)) * k->at(base + j, c0 + c);
                    }
                    s *= inv_sqrt;
                    if (!key_mask[base + j]) s += kMaskedLogit;
                    p[j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t j = 0; j < seq; ++j) {
                    p[j] /= z;
                    if (p[j] == 0.0) continue;
                    for (std::size_t c = 0; c < dh; ++c) acc[c] += p[j] * v->at(base + j, c0 + c);
                }
                for (std::size_t c = 0; c < dh; ++c) out->at(base + i, c0 + c) = static_cast<Real>(acc[c]);
            }
        }
    }
    if (tape.wants({&q, &k, &v})) {
        tape.record("attention", {q, k, v}, out,
                    [q, k, v, out, batch, seq, heads, dh, inv_sqrt, probs = std::move(probs)] {
            const auto& g = *out;
            std::vector<double> dq(q->numel(), 0.0), dk(k->numel(), 0.0), dv(v->numel(), 0.0);
            std::vector<double> dp(seq);
            const std::size_t d = q->cols();
            auto grad_at = [&](std::size_t r, std::size_t c) { return double(g.grad()[r * d + c]); };
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t base = b * seq;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* p = &probs[((b * heads + h) * seq + i) * seq];
                        double dot = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                const double go = grad_at(base + i, c0 + c);
                                s += go * v->at(base + j, c0 + c);
                                dv[(base + j) * d + c0 + c] += p[j] * go;
                            }
                            dp[j] = s;
                            dot += p[j] * s;
                        }
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                            if (ds == 0.0) continue;
                            for (std::size_t c = 0; c < dh; ++c) {
                                dq[(base + i) * d + c0 + c] += ds * k->at(base + j, c0 + c);
                                dk[(base + j) * d + c0 + c] += ds * q->at(base + i, c0 + c);
                            }
                        }
                    }
                }
            }
            auto push = [](const BasicTensorPtr<Real>& t, const std::vector<double>& src) {
                if (!t->requires_grad()) return;
                auto gt = t->grad_buffer();
                for (std::size_t i = 0; i < src.size(); ++i) gt[i] += static_cast<Real>(src[i]);
            };
            push(q, dq);
            push(k, dk);
            push(v, dv);
        });
    }
    return out;
}

}  // namespace ops

/// Result of a central-difference gradient audit.
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// Every coordinate of every tensor in `params` is probed unless
/// `max_coords_per_tensor` is nonzero, in which case that many coordinates
/// per tensor are drawn with `seed`. The relative error of a coordinate is
/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8). With float32 the difference
/// quotient is dominated by roundoff below eps ~ 1e-4; eps = 1e-7 makes it
/// meaningless.
template <typename Real>
GradCheckReport finite_diff_check(
    const std::function<BasicTensorPtr<Real>(BasicTape<Real>&)>& loss_fn,
    const std::vector<BasicTensorPtr<Real>>& params, double eps,
    std::size_t max_coords_per_tensor = 0, std::uint64_t seed = 0) {
    if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
    for (const auto& p : params) {
        if (!p->trainable()) {
            throw ContractError("finite_diff_check: '" + p->name() + "' is not trainable");
        }
        p->clear_grad();
    }
    std::vector<std::vector<Real>> analytic;
    {
        BasicTape<Real> tape;
        auto loss = loss_fn(tape);
        if (!std::isfinite(double((*loss)[0]))) {
            throw NumericError("finite_diff_check: non-finite loss " + std::to_string(double((*loss)[0])));
        }
        tape.backward(loss);
        for (const auto& p : params) {
            if (p->has_grad()) {
                analytic.emplace_back(p->grad().begin(), p->grad().end());
            } else {
                analytic.emplace_back(p->numel(), Real(0));
            }
        }
    }
    auto eval = [&]() {
        BasicTape<Real> tape(false);
        const double value = (*loss_fn(tape))[0];
        if (!std::isfinite(value)) {
            throw NumericError("finite_diff_check: non-finite perturbed loss");
        }
        return value;
    };
    SeededRng rng(seed);
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& p = *params[t];
        std::vector<std::size_t> coords(p.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (max_coords_per_tensor != 0 && coords.size() > max_coords_per_tensor) {
            rng.shuffle(coords);
            coords.resize(max_coords_per_tensor);
        }
        for (auto i : coords) {
            const Real original = p[i];
            p[i] = static_cast<Real>(original + eps);
            const double up = eval();
            p[i] = static_cast<Real>(original - eps);
            const double down = eval();
            p[i] = original;
            const double fd = (up - down) / (2.0 * eps);
            const double ad = analytic[t][i];
            const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
            ++report.coordinates;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = p.name();
                report.worst_index = i;
            }
        }
    }
    for (const auto& p : params) p->clear_grad();
    return report;
}

}  // namespace xpe
