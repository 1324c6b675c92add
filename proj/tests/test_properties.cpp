#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>

#include "xpe/xpe.hpp"

using namespace xpe;
using D = double;
using DPtr = BasicTensorPtr<double>;
using DTape = BasicTape<double>;

namespace {

constexpr int kTrials = 100;

DPtr random_tensor(Shape shape, SeededRng& rng, const std::string& name, bool trainable = true, double sd = 1.0) {
    auto t = make_tensor<D>(std::move(shape), name, trainable);
    for (auto& v : t->values()) v = rng.normal(0.0, sd);
    return t;
}

std::size_t pick(SeededRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.uniform_int(hi - lo + 1); }

/// Central differences in double against the tape's gradient, with the
/// error measured relative to max(|ad|, |fd|, 1e-3).
double worst_error(const std::function<DPtr(DTape&)>& loss_fn, const std::vector<DPtr>& params,
                   double eps = 1e-5) {
    for (const auto& p : params) p->clear_grad();
    DTape tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
    double worst = 0.0;
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const D original = (*p)[i];
            (*p)[i] = original + eps;
            DTape a(false);
            const D up = (*loss_fn(a))[0];
            (*p)[i] = original - eps;
            DTape b(false);
            const D down = (*loss_fn(b))[0];
            (*p)[i] = original;
            const double fd = (up - down) / (2 * eps);
            const double ad = p->has_grad() ? p->grad()[i] : 0.0;
            worst = std::max(worst, std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-3}));
        }
        p->clear_grad();
    }
    return worst;
}

/// Scalar probe Σ out ⊙ W with a fixed random W, so every output coordinate
/// reaches the loss with a distinct weight.
std::function<DPtr(DTape&)> probe(std::function<DPtr(DTape&)> f, const Shape& out_shape, SeededRng& rng) {
    auto w = random_tensor(out_shape, rng, "probe", false);
    return [f, w](DTape& tape) { return ops::sum(tape, ops::mul(tape, f(tape), w)); };
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(GradProperty, Matmul) {
    SeededRng rng(101);
    for (int t = 0; t < kTrials; ++t) {
        const auto m = pick(rng, 1, 5), k = pick(rng, 1, 6), n = pick(rng, 1, 5);
        auto a = random_tensor({m, k}, rng, "a");
        auto b = random_tensor({k, n}, rng, "b");
        auto f = probe([&](DTape& tp) { return ops::matmul(tp, a, b); }, {m, n}, rng);
        ASSERT_LT(worst_error(f, {a, b}), kTol) << m << "x" << k << "x" << n;
    }
}

TEST(GradProperty, BatchedMatmul) {
    SeededRng rng(102);
    for (int t = 0; t < kTrials; ++t) {
        const auto bt = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        auto a = random_tensor({bt, m, k}, rng, "a");
        auto b = random_tensor({k, n}, rng, "b");
        auto f = probe([&](DTape& tp) { return ops::matmul(tp, a, b); }, {bt, m, n}, rng);
        ASSERT_LT(worst_error(f, {a, b}), kTol);
    }
}

TEST(GradProperty, ElementwiseAddMulScale) {
    SeededRng rng(103);
    for (int t = 0; t < kTrials; ++t) {
        const Shape s{pick(rng, 1, 5), pick(rng, 1, 5)};
        auto a = random_tensor(s, rng, "a");
        auto b = random_tensor(s, rng, "b");
        const double c = rng.normal();
        auto f = probe([&](DTape& tp) { return ops::scale(tp, ops::mul(tp, ops::add(tp, a, b), a), c); }, s, rng);
        ASSERT_LT(worst_error(f, {a, b}), kTol);
    }
}

TEST(GradProperty, AddBiasAndSum) {
    SeededRng rng(104);
    for (int t = 0; t < kTrials; ++t) {
        const Shape s{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 5)};
        auto x = random_tensor(s, rng, "x");
        auto bias = random_tensor({s.back()}, rng, "bias");
        auto f = probe([&](DTape& tp) { return ops::add_bias(tp, x, bias); }, s, rng);
        ASSERT_LT(worst_error(f, {x, bias}), kTol);
        auto g = [&](DTape& tp) { return ops::sum(tp, ops::mul(tp, x, x)); };
        ASSERT_LT(worst_error(g, {x}), kTol);
    }
}

TEST(GradProperty, TanhAndGelu) {
    SeededRng rng(105);
    for (int t = 0; t < kTrials; ++t) {
        const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
        auto x = random_tensor(s, rng, "x", true, 2.0);
        auto f = probe([&](DTape& tp) { return ops::tanh(tp, x); }, s, rng);
        ASSERT_LT(worst_error(f, {x}), kTol);
        auto g = probe([&](DTape& tp) { return ops::gelu(tp, x); }, s, rng);
        ASSERT_LT(worst_error(g, {x}), kTol);
    }
}

TEST(GradProperty, SoftmaxRows) {
    SeededRng rng(106);
    for (int t = 0; t < kTrials; ++t) {
        const Shape s{pick(rng, 1, 4), pick(rng, 1, 7)};
        auto x = random_tensor(s, rng, "x", true, 2.0);
        auto f = probe([&](DTape& tp) { return ops::softmax_rows(tp, x); }, s, rng);
        ASSERT_LT(worst_error(f, {x}), kTol);
    }
}

TEST(GradProperty, LayerNorm) {
    SeededRng rng(107);
    for (int t = 0; t < kTrials; ++t) {
        const auto m = pick(rng, 1, 4), n = pick(rng, 2, 7);
        auto x = random_tensor({m, n}, rng, "x");
        auto gain = random_tensor({n}, rng, "gain");
        auto bias = random_tensor({n}, rng, "bias");
        auto f = probe([&](DTape& tp) { return ops::layer_norm(tp, x, gain, bias, 1e-5); }, {m, n}, rng);
        ASSERT_LT(worst_error(f, {x, gain, bias}), kTol);
    }
}

TEST(GradProperty, CrossEntropy) {
    SeededRng rng(108);
    for (int t = 0; t < kTrials; ++t) {
        const auto b = pick(rng, 1, 5), k = pick(rng, 2, 7);
        auto logits = random_tensor({b, k}, rng, "logits", true, 2.0);
        std::vector<int> labels(b);
        for (auto& l : labels) l = int(rng.uniform_int(k));
        auto f = [&](DTape& tp) { return ops::cross_entropy(tp, logits, std::span<const int>(labels)); };
        ASSERT_LT(worst_error(f, {logits}), kTol);
    }
}

TEST(GradProperty, GatherAndConcatRows) {
    SeededRng rng(109);
    for (int t = 0; t < kTrials; ++t) {
        const auto rows = pick(rng, 1, 5), n = pick(rng, 1, 4), picks = pick(rng, 1, 8);
        auto x = random_tensor({rows, n}, rng, "x");
        std::vector<std::size_t> idx(picks);
        for (auto& i : idx) i = rng.uniform_int(rows);  // repeats accumulate
        auto f = probe([&](DTape& tp) { return ops::gather_rows(tp, x, std::span<const std::size_t>(idx)); },
                       {picks, n}, rng);
        ASSERT_LT(worst_error(f, {x}), kTol);
        auto y = random_tensor({pick(rng, 1, 3), n}, rng, "y");
        auto g = probe([&](DTape& tp) { return ops::concat_rows(tp, std::vector<DPtr>{x, y}); },
                       {rows + y->rows(), n}, rng);
        ASSERT_LT(worst_error(g, {x, y}), kTol);
    }
}

TEST(GradProperty, MaskedMultiHeadAttention) {
    SeededRng rng(110);
    for (int t = 0; t < kTrials; ++t) {
        const auto batch = pick(rng, 1, 2), seq = pick(rng, 1, 4), heads = pick(rng, 1, 2);
        const auto d = heads * pick(rng, 1, 3);
        auto q = random_tensor({batch * seq, d}, rng, "q");
        auto k = random_tensor({batch * seq, d}, rng, "k");
        auto v = random_tensor({batch * seq, d}, rng, "v");
        std::vector<std::uint8_t> mask(batch * seq);
        for (std::size_t b = 0; b < batch; ++b) {
            mask[b * seq] = 1;  // the leading position is always attended
            for (std::size_t s = 1; s < seq; ++s) mask[b * seq + s] = rng.uniform() < 0.7;
        }
        auto f = probe(
            [&](DTape& tp) {
                return ops::attention(tp, q, k, v, batch, seq, heads, std::span<const std::uint8_t>(mask));
            },
            {batch * seq, d}, rng);
        ASSERT_LT(worst_error(f, {q, k, v}), kTol) << batch << " " << seq << " " << heads << " " << d;
    }
}

TEST(GradProperty, PromptEncoder) {
    SeededRng rng(111);
    for (int t = 0; t < kTrials; ++t) {
        const auto n = pick(rng, 1, 5), d = pick(rng, 2, 6), r = pick(rng, 1, 4);
        BasicPromptEncoder<D> enc(d, r, rng);
        for (const auto& p : enc.tensors())
            for (auto& v : p->values()) v = rng.normal(0.0, 0.5);
        auto pseudo = random_tensor({n, d}, rng, "pseudo");
        auto f = probe([&](DTape& tp) { return encode_prompt(tp, enc, pseudo); }, {n, d}, rng);
        auto params = enc.tensors();
        params.push_back(pseudo);
        ASSERT_LT(worst_error(f, params), kTol);
    }
}

TEST(Property, SoftmaxRowsAreDistributions) {
    SeededRng rng(201);
    for (int t = 0; t < kTrials; ++t) {
        const Shape s{pick(rng, 1, 5), pick(rng, 1, 9)};
        auto x = random_tensor(s, rng, "x", false, 10.0);
        BasicTape<double> tape(false);
        auto y = ops::softmax_rows(tape, x);
        for (std::size_t i = 0; i < y->rows(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < y->cols(); ++j) {
                EXPECT_GE(y->at(i, j), 0.0);
                sum += y->at(i, j);
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Property, EncoderIsRowPermutationEquivariant) {
    SeededRng rng(202);
    PromptEncoder enc(32, 16, rng);
    for (const auto& p : enc.tensors()) fill_normal(*p, rng, 0.2);
    std::mt19937_64 eng(7);
    for (int t = 0; t < kTrials; ++t) {
        auto pseudo = make_tensor<float>({20, 32}, "pseudo", true);
        fill_normal(*pseudo, rng, 1.0);
        std::vector<std::size_t> perm(20);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), eng);
        Tape tape(false);
        auto out = encode_prompt(tape, enc, pseudo);
        auto permuted = ops::gather_rows(tape, pseudo, std::span<const std::size_t>(perm));
        auto out_perm = encode_prompt(tape, enc, permuted);
        for (std::size_t i = 0; i < 20; ++i)
            for (std::size_t j = 0; j < 32; ++j) ASSERT_EQ(out_perm->at(i, j), out->at(perm[i], j));
    }
}

TEST(Property, BudgetSplitConservesLength) {
    for (std::size_t L = 1; L <= 64; ++L) {
        for (int pct = 0; pct <= 100; ++pct) {
            const auto b = split_budget(L, pct / 100.0);
            ASSERT_EQ(b.n_std + b.n_xpe, L);
            ASSERT_LE(std::abs(double(b.n_xpe) - pct / 100.0 * double(L)), 0.5 + 1e-9);
        }
    }
}

TEST(Property, CachedPathMatchesEncoderPath) {
    BackboneConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_ffn = 64;
    cfg.vocab_size = 40;
    cfg.max_positions = 40;
    cfg.n_classes = 5;
    SeededRng rng(203);
    EncoderStack stack(cfg, rng);
    stack.freeze();
    ClassificationHead head(cfg, rng);
    auto pc = make_prompt_components<float>(PromptMethod::Dual, 20, 0.7, 32, 16, rng);
    for (const auto& t : pc.tensors()) fill_normal(*t, rng, 0.3);
    const auto path = std::filesystem::temp_directory_path() / ("xpe_prop_cache_" + std::to_string(::getpid()));
    const auto cached = export_cached_prompt(pc, {}, path);
    const auto calls = pc.encoder->forward_count();
    double worst = 0.0;
    for (int t = 0; t < kTrials; ++t) {
        TokenBatch b;
        b.batch = 2;
        b.length = pick(rng, 1, 12);
        for (std::size_t i = 0; i < b.batch * b.length; ++i) {
            b.tokens.push_back(int(2 + rng.uniform_int(38)));
            b.mask.push_back(1);
        }
        b.labels = {0, 1};
        Tape live(false);
        auto via_encoder = classify(live, cfg, stack, head, assemble_prompt(live, pc), b);
        Tape fixed(false);
        auto via_cache = classify(fixed, cfg, stack, head, cached.matrix(), b);
        for (std::size_t i = 0; i < via_cache->numel(); ++i)
            worst = std::max(worst, double(std::abs((*via_cache)[i] - (*via_encoder)[i])));
    }
    EXPECT_LE(worst, 1e-6);
    EXPECT_EQ(pc.encoder->forward_count(), calls + std::size_t(kTrials));
    std::filesystem::remove(path);
}
