#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "dds/gating.hpp"

using namespace dds;

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// test-side oracle: full stable sort (stability provides the low-index tie rule)
std::vector<double> brute_force_topm(std::span<const double> row, std::size_t m) {
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<double> mask(row.size(), 0.0);
    for (std::size_t k = 0; k < m; ++k) mask[idx[k]] = 1.0;
    return mask;
}

}  // namespace

TEST_CASE("hard concrete gate at x = 0 with defaults is exactly one half") {
    GateConfig cfg;
    CHECK(hard_concrete(Tensor::scalar(0.0), cfg).item() == 0.5);
}

TEST_CASE("gate configs validate their ranges") {
    GateConfig bad;
    bad.beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = GateConfig{};
    bad.kappa = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = GateConfig{};
    bad.epsilon = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = GateConfig{};
    bad.m = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("hard concrete with the classic stretch still passes through one half at x = 0") {
    GateConfig cfg;
    cfg.zeta = 1.1;
    cfg.gamma = -0.1;
    CHECK(hard_concrete(Tensor::scalar(0.0), cfg).item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("hard concrete at x = 1 with defaults equals the logistic at 1.5") {
    GateConfig cfg;
    double expected = logistic(1.0 / cfg.beta);  // independent scalar evaluation
    CHECK(hard_concrete(Tensor::scalar(1.0), cfg).item() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(hard_concrete(Tensor::scalar(1.0), cfg).item() == doctest::Approx(0.8175744).epsilon(1e-6));
}

TEST_CASE("stochastic gate with kappa = 0 is bitwise identical to the hard gate") {
    Rng rng(11);
    GateConfig cfg;
    cfg.kappa = 0.0;
    std::vector<double> xs(64), us(64);
    for (auto& v : xs) v = rng.uniform(-4.0, 4.0);
    for (auto& v : us) v = rng.uniform(0.001, 0.999);
    Tensor x({64}, xs);
    CHECK(bitwise_equal(stochastic_gate(x, cfg, Tensor({64}, us)), hard_concrete(x, cfg)));
}

TEST_CASE("stochastic gate at u = 0.5 is bitwise identical to the hard gate") {
    Rng rng(12);
    GateConfig cfg;  // kappa = 0.1
    std::vector<double> xs(32);
    for (auto& v : xs) v = rng.uniform(-4.0, 4.0);
    Tensor x({32}, xs);
    CHECK(bitwise_equal(stochastic_gate(x, cfg, Tensor::full({32}, 0.5)), hard_concrete(x, cfg)));
}

TEST_CASE("stochastic gate value at x = 1, kappa = 0.1, u = 0.9") {
    GateConfig cfg;
    double expected = logistic((0.1 * (std::log(0.9) - std::log(0.1)) + 1.0) / cfg.beta);
    Tensor out = stochastic_gate(Tensor::scalar(1.0), cfg, Tensor::scalar(0.9));
    CHECK(out.item() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(out.item() == doctest::Approx(0.8618).epsilon(1e-4));
}

TEST_CASE("stochastic gate rejects endpoint uniforms") {
    GateConfig cfg;
    CHECK_THROWS_AS(stochastic_gate(Tensor::scalar(0.2), cfg, Tensor::scalar(0.0)), NumericError);
    CHECK_THROWS_AS(stochastic_gate(Tensor::scalar(0.2), cfg, Tensor::scalar(1.0)), NumericError);
}

TEST_CASE("gate noise is a constant: gradient flows through x only") {
    GateConfig cfg;
    Tape tape;
    Tensor x = tape.leaf({4}, {0.3, -0.5, 1.2, 0.0});
    Tensor u({4}, {0.3, 0.6, 0.8, 0.4});
    Tensor y = stochastic_gate(x, cfg, u);
    tape.backward(sum(y));
    // closed-form: d/dx sigma(z/beta) = sigma'(z/beta)/beta with z = kappa*logit(u) + x
    for (std::size_t i = 0; i < 4; ++i) {
        double z = cfg.kappa * (std::log(u[i]) - std::log(1.0 - u[i])) + x[i];
        double s = logistic(z / cfg.beta);
        CHECK(x.grad()[i] == doctest::Approx(s * (1.0 - s) / cfg.beta).epsilon(1e-12));
    }
}

TEST_CASE("the classic stretch crops importances and zeroes their gradient") {
    // zeta = 1.1, gamma = -0.1 pushes confident scores onto the clamp, where
    // the gradient dies; the default stretch keeps the same input strictly
    // inside (0, 1) with a live gradient
    GateConfig classic;
    classic.zeta = 1.1;
    classic.gamma = -0.1;
    double x = 2.0;  // sigma(3) ~ 0.953 > 11/12: cropped under the classic stretch

    Tape t1;
    Tensor a = t1.leaf({1}, {x});
    Tensor ya = hard_concrete(a, classic);
    CHECK(ya.item() == 1.0);
    t1.backward(sum(ya));
    CHECK(a.grad()[0] == 0.0);

    Tape t2;
    Tensor b = t2.leaf({1}, {x});
    Tensor yb = hard_concrete(b, GateConfig{});
    CHECK(yb.item() < 1.0);
    t2.backward(sum(yb));
    CHECK(b.grad()[0] > 0.0);
}

TEST_CASE("gate outputs stay inside [0, 1] for random inputs and configs") {
    Rng rng(13);
    for (int trial = 0; trial < 100000; ++trial) {
        GateConfig cfg;
        cfg.beta = rng.uniform(0.05, 3.0);
        cfg.zeta = rng.uniform(0.5, 2.0);
        cfg.gamma = rng.uniform(-1.0, 0.49);
        cfg.kappa = rng.uniform01();
        double x = rng.uniform(-50.0, 50.0);
        double u = rng.uniform01_open();
        double v = stochastic_gate(Tensor::scalar(x), cfg, Tensor::scalar(u)).item();
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("top-M picks the highest scores with lowest-index tie break") {
    Tensor scores({1, 5}, {0.9, 0.2, 0.7, 0.7, 0.1});
    Tensor mask = topm_mask(scores, {2});
    std::vector<double> expect{1, 0, 1, 0, 0};
    for (std::size_t i = 0; i < 5; ++i) CHECK(mask[i] == expect[i]);
}

TEST_CASE("top-M with m = F keeps everything") {
    Tensor scores({1, 4}, {0.3, 0.1, 0.2, 0.05});
    Tensor mask = topm_mask(scores, {4});
    for (std::size_t i = 0; i < 4; ++i) CHECK(mask[i] == 1.0);
}

TEST_CASE("top-M selection equals the brute-force sort oracle for every m") {
    Rng rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t F = 3 + rng.below(30);
        std::vector<double> row(F);
        for (auto& v : row) v = rng.below(8) == 0 ? 0.5 : rng.uniform01();  // inject ties
        Tensor scores({1, F}, row);
        for (std::size_t m = 1; m <= F; ++m) {
            Tensor mask = topm_mask(scores, {m});
            auto oracle = brute_force_topm(scores.data(), m);
            for (std::size_t i = 0; i < F; ++i) {
                INFO("F=", F, " m=", m, " i=", i);
                CHECK(mask[i] == oracle[i]);
            }
        }
    }
}

TEST_CASE("cardinality: each row holds exactly min(m, F) ones") {
    Rng rng(22);
    std::size_t B = 6, F = 17;
    std::vector<double> rows(B * F);
    for (auto& v : rows) v = rng.uniform01();
    std::vector<std::size_t> ms{1, 5, 17, 9, 2, 17};
    Tensor mask = topm_mask(Tensor({B, F}, rows), ms);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t ones = 0;
        for (std::size_t j = 0; j < F; ++j) ones += mask[b * F + j] == 1.0 ? 1 : 0;
        CHECK(ones == std::min(ms[b], F));
    }
}

TEST_CASE("monotone thresholding: growing m never drops a selected feature") {
    Rng rng(23);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t F = 4 + rng.below(20);
        std::vector<double> row(F);
        for (auto& v : row) v = rng.below(6) == 0 ? 0.25 : rng.uniform01();
        Tensor scores({1, F}, row);
        Tensor prev = topm_mask(scores, {1});
        for (std::size_t m = 2; m <= F; ++m) {
            Tensor cur = topm_mask(scores, {m});
            for (std::size_t i = 0; i < F; ++i)
                if (prev[i] == 1.0) CHECK(cur[i] == 1.0);
            prev = cur;
        }
    }
}

TEST_CASE("top-M rejects out-of-range budgets") {
    Tensor scores({1, 3}, {0.1, 0.2, 0.3});
    CHECK_THROWS_AS(topm_mask(scores, {0}), ConfigError);
    CHECK_THROWS_AS(topm_mask(scores, {4}), ConfigError);
}

TEST_CASE("dynamic M with epsilon = 0 always keeps the budget") {
    GateConfig cfg;
    cfg.epsilon = 0.0;
    cfg.m = 5;
    Rng rng(31);
    auto ms = dynamic_m(1000, 64, cfg, rng);
    for (std::size_t m : ms) CHECK(m == 5);
}

TEST_CASE("dynamic M lifts to F when the draw does not exceed epsilon") {
    GateConfig cfg;
    cfg.epsilon = 0.1;
    cfg.m = 5;
    // find a seed whose first open-uniform draw sits at p <= epsilon (e.g. near 0.05)
    std::uint64_t seed = 0;
    for (;; ++seed) {
        Rng probe(seed);
        double p = probe.uniform01_open();
        if (p <= 0.1) break;
    }
    Rng rng(seed);
    auto ms = dynamic_m(1, 64, cfg, rng);
    CHECK(ms[0] == 64);
}

TEST_CASE("dynamic M eval mode ignores epsilon") {
    GateConfig cfg = GateConfig{}.for_eval();
    cfg.m = 7;
    Rng rng(32);
    auto ms = dynamic_m(100, 64, cfg, rng);
    for (std::size_t m : ms) CHECK(m == 7);
}

TEST_CASE("dynamic M statistics: the F branch fires at rate epsilon") {
    GateConfig cfg;
    cfg.epsilon = 0.1;
    cfg.m = 5;
    Rng rng(33);
    auto ms = dynamic_m(10000, 64, cfg, rng);
    std::size_t lifted = 0;
    for (std::size_t m : ms) lifted += m == 64 ? 1 : 0;
    double freq = static_cast<double>(lifted) / 10000.0;
    CHECK(freq == doctest::Approx(0.1).epsilon(0.1));  // 0.1 +- 0.01
    CHECK(std::abs(freq - 0.1) <= 0.01);
}

TEST_CASE("apply_gate with all-ones mask and scores is the identity") {
    Tensor x({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    Tensor y = apply_gate(x, Tensor::ones({2, 3}), Tensor::ones({2, 3}));
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("apply_gate with an all-zero mask zeroes values and gradients") {
    Tape tape;
    Tensor x = tape.leaf({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    Tensor y = apply_gate(x, Tensor::full({2, 3}, 0.7), Tensor::zeros({2, 3}));
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == 0.0);
    tape.backward(sum(y));
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("masked positions receive a bit-exact zero gradient through a network") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t F = 12;
        std::vector<double> xs(F), ss(F), ms(F);
        for (auto& v : xs) v = rng.uniform(-1.0, 1.0);
        for (auto& v : ss) v = rng.uniform01();
        for (auto& v : ms) v = rng.below(2) ? 1.0 : 0.0;

        Tape tape;
        Tensor x = tape.leaf({1, F}, xs);
        Tensor w = tape.leaf({F, 4}, random_vec(rng, F * 4));
        Tensor gated = apply_gate(x, Tensor({1, F}, ss), Tensor({1, F}, ms));
        Tensor out = sigmoid(matmul(gated, w));
        tape.backward(mse(out, Tensor::zeros({1, 4})));
        for (std::size_t i = 0; i < F; ++i)
            if (ms[i] == 0.0) CHECK(x.grad()[i] == 0.0);
    }
}

TEST_CASE("selection mask bookkeeping") {
    Tensor scores({2, 4}, {0.9, 0.1, 0.5, 0.4, 0.2, 0.8, 0.8, 0.1});
    std::vector<std::size_t> ms{2, 3};
    SelectionMask sm{scores, topm_mask(scores, ms), ms};
    CHECK(sm.ones_in_row(0) == 2);
    CHECK(sm.ones_in_row(1) == 3);
    for (double s : sm.scores.data()) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
    }
}
