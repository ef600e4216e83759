#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dds/gradcheck.hpp"
#include "dds/tensor.hpp"

using namespace dds;

TEST_CASE("elementwise add") {
    Tensor a({2}, {1, 2}), b({2}, {3, 4});
    Tensor c = add(a, b);
    CHECK(c[0] == 4.0);
    CHECK(c[1] == 6.0);
}

TEST_CASE("multiply by zero annihilates and kills the gradient") {
    Tape tape;
    Tensor x = tape.leaf({3}, {1.5, -2.0, 7.0});
    Tensor y = mul(x, Tensor::zeros({3}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == 0.0);
    tape.backward(sum(y));
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("product rule: d(a*b)/da at a=2, b=3 is 3") {
    Tape tape;
    Tensor a = tape.leaf({1}, {2.0});
    Tensor b = tape.leaf({1}, {3.0});
    tape.backward(mul(a, b));
    CHECK(a.grad()[0] == 3.0);
    CHECK(b.grad()[0] == 2.0);
}

TEST_CASE("tensor construction rejects shape/data length mismatches") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0}), ShapeError);
    CHECK_THROWS_AS(Tensor({0}, {1.0}), ShapeError);
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1, 1, 6, 6}), 1, 1), ShapeError);
}

TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2, 3]"), ShapeError);
    try {
        add(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[4, 2]") != std::string::npos);
    }
}

TEST_CASE("broadcasting keeps the documented output shapes") {
    Tensor batch = Tensor::ones({4, 3});
    Tensor row = Tensor({3}, {1, 2, 3});
    Tensor s = Tensor::scalar(2.0);

    CHECK(add(batch, row).shape() == Shape{4, 3});
    CHECK(add(batch, s).shape() == Shape{4, 3});
    CHECK(add(s, batch).shape() == Shape{4, 3});
    CHECK(mul(batch, row)[5] == 3.0);  // row [1,2,3] tiled over the batch

    // broadcast gradients reduce over the broadcast axis
    Tape tape;
    Tensor r = tape.leaf({3}, {1, 2, 3});
    tape.backward(sum(add(Tensor::ones({4, 3}), r)));
    for (double g : r.grad()) CHECK(g == 4.0);
}

TEST_CASE("matmul identity and dot product") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    Tensor p = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == m[i]);

    Tensor rowv({1, 2}, {1, 2});
    Tensor colv({2, 1}, {3, 4});
    CHECK(matmul(rowv, colv).item() == 11.0);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradients match central finite differences below 1e-6") {
    Rng rng(42);
    gradcheck::Problem p;
    p.name = "matmul";
    p.tol = 1e-6;
    p.shapes = {{3, 4}, {4, 2}};
    p.init = {gradcheck::detail::random_vec(rng, 12), gradcheck::detail::random_vec(rng, 8)};
    p.build = [](Tape&, std::span<const Tensor> t) {
        Tensor y = matmul(t[0], t[1]);
        return sum(mul(y, y));
    };
    auto rep = gradcheck::check_problem(p, rng);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv2d 1x1 identity kernel") {
    Rng rng(3);
    auto v = gradcheck::detail::random_vec(rng, 16, 0.0, 1.0);
    Tensor x({1, 1, 4, 4}, v);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, k);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) CHECK(y[i] == v[i]);
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 3x3 sums to 9") {
    Tensor x = Tensor::ones({1, 1, 3, 3});
    Tensor k = Tensor::ones({1, 1, 3, 3});
    Tensor y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0);
}

TEST_CASE("conv2d rejects non-integral output sizes") {
    CHECK_THROWS_WITH_AS(conv2d(Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({1, 1, 2, 2}), 2, 0),
                         doctest::Contains("non-integral"), ShapeError);
}

TEST_CASE("conv2d gradients match central finite differences below 1e-5") {
    Rng rng(9);
    gradcheck::Problem p;
    p.name = "conv2d";
    p.tol = 1e-5;
    p.shapes = {{1, 2, 5, 5}, {3, 2, 3, 3}};
    p.init = {gradcheck::detail::random_vec(rng, 50), gradcheck::detail::random_vec(rng, 54)};
    p.build = [](Tape&, std::span<const Tensor> t) {
        Tensor y = conv2d(t[0], t[1], 1, 1);
        return sum(mul(y, y));
    };
    auto rep = gradcheck::check_problem(p, rng);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("activation values and kink conventions") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(sigmoid(Tensor::scalar(1.5)).item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.5))).epsilon(1e-14));

    Tape tape;
    Tensor x = tape.leaf({4}, {1.3, 0.0, 1.0, -0.2});
    Tensor y = clamp01(x);
    CHECK(y[0] == 1.0);
    CHECK(y[3] == 0.0);
    tape.backward(sum(y));
    auto g = x.grad();
    CHECK(g[0] == 0.0);  // above the clamp
    CHECK(g[1] == 0.0);  // exactly at the boundary
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);

    Tape tape2;
    Tensor z = tape2.leaf({3}, {-1.0, 0.0, 2.0});
    tape2.backward(sum(relu(z)));
    auto gz = z.grad();
    CHECK(gz[0] == 0.0);
    CHECK(gz[1] == 0.0);  // relu'(0) = 0
    CHECK(gz[2] == 1.0);
}

TEST_CASE("mse values and analytic gradient") {
    Tensor x({3}, {0.3, -0.1, 2.0});
    CHECK(mse(x, x).item() == 0.0);
    CHECK(mse(Tensor({2}, {0, 0}), Tensor({2}, {1, 1})).item() == 1.0);
    CHECK_THROWS_AS(mse(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);

    Tape tape;
    Tensor pred = tape.leaf({4}, {0.2, 0.9, -0.4, 1.1});
    Tensor target({4}, {0.0, 1.0, 0.0, 1.0});
    tape.backward(mse(pred, target));
    auto g = pred.grad();
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(g[i] == doctest::Approx(2.0 * (pred[i] - target[i]) / 4.0).epsilon(1e-14));
}

TEST_CASE("backward on sum gives all-ones gradient") {
    Tape tape;
    Tensor x = tape.leaf({3}, {5.0, -1.0, 0.5});
    tape.backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("loss independent of a leaf leaves its gradient zero") {
    Tape tape;
    Tensor x = tape.leaf({3}, {1, 2, 3});
    Tensor y = tape.leaf({2}, {1, 1});
    tape.backward(sum(y));
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and accumulates on repeat") {
    Tape tape;
    Tensor x = tape.leaf({2}, {1, 2});
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), NumericError);

    Tensor loss = sum(y);
    tape.backward(loss);
    CHECK(loss.grad()[0] == 1.0);  // d loss / d loss, exactly
    CHECK(x.grad()[0] == 2.0);
    tape.backward(loss);
    CHECK(loss.grad()[0] == 1.0);
    CHECK(x.grad()[0] == 4.0);  // leaf grads accumulate across passes
}

TEST_CASE("three-layer MLP gradients match finite differences below 1e-4") {
    Rng rng(77);
    gradcheck::Problem p;
    p.name = "mlp3";
    p.shapes = {{2, 5}, {5, 7}, {7}, {7, 4}, {4}, {4, 3}, {3}};
    for (const Shape& s : p.shapes) p.init.push_back(gradcheck::detail::random_vec(rng, numel(s), -0.7, 0.7));
    auto target = gradcheck::detail::random_vec(rng, 6, 0.0, 1.0);
    p.build = [target](Tape&, std::span<const Tensor> t) {
        Tensor h1 = relu(add(matmul(t[0], t[1]), t[2]));
        Tensor h2 = relu(add(matmul(h1, t[3]), t[4]));
        Tensor out = add(matmul(h2, t[5]), t[6]);
        return mse(out, Tensor({2, 3}, target));
    };
    auto rep = gradcheck::check_problem(p, rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("tape records a topological order and visits every entry once") {
    Tape tape;
    Tensor a = tape.leaf({2}, {1, 2});
    Tensor b = tape.leaf({2}, {3, 4});
    Tensor loss = sum(mul(add(a, b), b));
    for (const auto& e : tape.entry_infos()) {
        for (std::size_t op_id : e.operand_ids)
            CHECK(op_id < e.output_id);  // untracked operands report id 0
    }
    tape.backward(loss);
    CHECK(tape.last_visit_count() == tape.entry_count());
}

TEST_CASE("replay determinism: identical seed and inputs give bit-identical buffers") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tape tape;
        Tensor x = tape.leaf({8}, gradcheck::detail::random_vec(rng, 8));
        Tensor w = tape.leaf({8}, gradcheck::detail::random_vec(rng, 8));
        Tensor loss = sum(mul(sigmoid(mul(x, w)), x));
        tape.backward(loss);
        std::vector<double> out(x.data().begin(), x.data().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        out.push_back(loss.item());
        return out;
    };
    auto r1 = run(123), r2 = run(123);
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

TEST_CASE("finite differences agree with backward for every op over random seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(900 + seed);
        for (const auto& p : gradcheck::op_problems(rng)) {
            Rng prng = rng.fork(7);
            auto rep = gradcheck::check_problem(p, prng);
            INFO(p.name);
            CHECK(rep.max_rel_err <= p.tol);
            worst = std::max(worst, rep.max_rel_err);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("the corrupted-backward fixture is caught by the checker") {
    auto rep = gradcheck::run_corrupted_fixture(5);
    CHECK(rep.max_rel_err > 1e-4);
}
