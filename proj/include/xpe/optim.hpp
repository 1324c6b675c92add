#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "xpe/serialization.hpp"
#include "xpe/tensor.hpp"

namespace xpe {

/// Tensors sharing one learning rate and weight decay.
template <typename Real>
struct BasicParamGroup {
    std::string name;
    std::vector<BasicTensorPtr<Real>> members;
    double lr = 0.0;
    double weight_decay = 0.0;
};

using ParamGroup = BasicParamGroup<float>;

/// Throws ConfigError if any tensor is listed in more than one group.
template <typename Real>
void check_partition(const std::vector<BasicParamGroup<Real>>& groups) {
    std::set<const BasicTensor<Real>*> seen;
    for (const auto& g : groups) {
        for (const auto& t : g.members) {
            if (!seen.insert(t.get()).second) {
                throw ConfigError("tensor '" + t->name() + "' appears in more than one parameter group");
            }
        }
    }
}

/// Cosine annealing restarted every total_steps / n_cycles steps; the last
/// cycle absorbs the remainder.
struct CosineRestartSchedule {
    double base_lr = 1.0;
    double min_lr = 0.0;
    std::size_t total_steps = 1;
    std::size_t n_cycles = 2;

    std::size_t cycle_length() const { return total_steps / n_cycles; }
};

inline double lr_at(const CosineRestartSchedule& s, std::size_t step) {
    if (s.n_cycles == 0 || s.total_steps < s.n_cycles) {
        throw ConfigError("schedule: need at least one step per cycle");
    }
    if (step >= s.total_steps) {
        throw RangeError("lr_at: step " + std::to_string(step) + " beyond schedule of " +
                         std::to_string(s.total_steps));
    }
    const std::size_t c = s.cycle_length();
    const std::size_t cycle = std::min(step / c, s.n_cycles - 1);
    const std::size_t start = cycle * c;
    const std::size_t len = (cycle + 1 == s.n_cycles) ? s.total_steps - start : c;
    const double t = double(step - start) / double(len);
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Published Adafactor defaults with relative step sizing turned off.
struct AdafactorOptions {
    double eps = 1e-30;           // added to squared gradients
    double clip_threshold = 1.0;  // RMS update clipping
    double decay_rate = -0.8;     // beta2_t = 1 - t^decay_rate
};

inline void to_json(Json& j, const AdafactorOptions& o) {
    j = Json{{"eps", o.eps}, {"clip_threshold", o.clip_threshold}, {"decay_rate", o.decay_rate}};
}

/// Adafactor with externally supplied learning rates.
///
/// Tensors of rank >= 2 keep factored row/column second-moment estimates over
/// their last two extents (leading extents folded into rows); vectors keep a
/// full estimate. After RMS clipping, each parameter moves by lr·update and
/// is then shrunk by (1 - lr·weight_decay).
template <typename Real>
class BasicAdafactor {
public:
    struct State {
        std::vector<double> row;
        std::vector<double> col;
        std::vector<double> full;
    };

    explicit BasicAdafactor(std::vector<BasicParamGroup<Real>> groups, AdafactorOptions options = {})
        : groups_(std::move(groups)), options_(options) {
        check_partition(groups_);
    }

    const std::vector<BasicParamGroup<Real>>& groups() const { return groups_; }
    const AdafactorOptions& options() const { return options_; }
    std::size_t steps_taken() const { return step_; }
    const State& state_of(const BasicTensor<Real>& t) const { return state_.at(&t); }

    /// One update; each group's lr is multiplied by `lr_scale`.
    void step(double lr_scale = 1.0) {
        for (const auto& g : groups_) {
            for (const auto& t : g.members) {
                for (auto v : t->grad()) {
                    if (!std::isfinite(v)) {
                        throw NumericError("adafactor: non-finite gradient in '" + t->name() + "' at step " +
                                           std::to_string(step_ + 1));
                    }
                }
            }
        }
        ++step_;
        const double beta2 = 1.0 - std::pow(double(step_), options_.decay_rate);
        for (const auto& g : groups_) {
            const double lr = g.lr * lr_scale;
            for (const auto& t : g.members) update(*t, lr, g.weight_decay, beta2);
        }
    }

    void zero_grad() {
        for (const auto& g : groups_)
            for (const auto& t : g.members) t->clear_grad();
    }

private:
    void update(BasicTensor<Real>& p, double lr, double wd, double beta2) {
        const std::size_t n = p.numel();
        std::vector<double> grad(n, 0.0);
        if (p.has_grad()) {
            for (std::size_t i = 0; i < n; ++i) grad[i] = p.grad()[i];
        }
        auto& st = state_[&p];
        std::vector<double> upd(n);
        if (p.rank() >= 2) {
            const std::size_t rows = p.rows(), cols = p.cols();
            if (st.row.empty()) {
                st.row.assign(rows, 0.0);
                st.col.assign(cols, 0.0);
            }
            std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    const double sq = grad[r * cols + c] * grad[r * cols + c] + options_.eps;
                    row_mean[r] += sq;
                    col_mean[c] += sq;
                }
            }
            for (std::size_t r = 0; r < rows; ++r) {
                st.row[r] = beta2 * st.row[r] + (1.0 - beta2) * (row_mean[r] / double(cols));
            }
            for (std::size_t c = 0; c < cols; ++c) {
                st.col[c] = beta2 * st.col[c] + (1.0 - beta2) * (col_mean[c] / double(rows));
            }
            double row_avg = 0.0;
            for (auto v : st.row) row_avg += v;
            row_avg /= double(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const double rf = 1.0 / std::sqrt(st.row[r] / row_avg);
                for (std::size_t c = 0; c < cols; ++c) {
                    upd[r * cols + c] = rf / std::sqrt(st.col[c]) * grad[r * cols + c];
                }
            }
        } else {
            if (st.full.empty()) st.full.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                st.full[i] = beta2 * st.full[i] + (1.0 - beta2) * (grad[i] * grad[i] + options_.eps);
                upd[i] = grad[i] / std::sqrt(st.full[i]);
            }
        }
        double ms = 0.0;
        for (auto u : upd) ms += u * u;
        const double rms = n ? std::sqrt(ms / double(n)) : 0.0;
        const double clip = std::max(1.0, rms / options_.clip_threshold);
        const double shrink = 1.0 - lr * wd;
        auto values = p.values();
        for (std::size_t i = 0; i < n; ++i) {
            double v = double(values[i]) - lr * upd[i] / clip;
            if (wd != 0.0) v *= shrink;
            values[i] = static_cast<Real>(v);
        }
    }

    std::vector<BasicParamGroup<Real>> groups_;
    AdafactorOptions options_;
    std::map<const BasicTensor<Real>*, State> state_;
    std::size_t step_ = 0;
};

using Adafactor = BasicAdafactor<float>;

}  // namespace xpe
