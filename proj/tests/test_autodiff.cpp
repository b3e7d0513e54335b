#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <random>

#include "oscqat/autodiff.hpp"
#include "oscqat/optim.hpp"

using namespace oscqat;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : t.data) x = dist(rng);
    return t;
}

// Central finite differences of a scalar-valued graph against the analytic
// gradients for every input tensor.
void check_gradients(const std::vector<Tensor>& inputs,
                     const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                     double rel_tol = 1e-6, double step = 1e-5) {
    auto eval = [&](const std::vector<Tensor>& ins) {
        Tape tape;
        std::vector<Value> leaves;
        for (const Tensor& t : ins) leaves.push_back(tape.leaf(t, true));
        Value out = build(tape, leaves);
        REQUIRE(out.val().size() == 1);
        return out.val()[0];
    };
    Tape tape;
    std::vector<Value> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    Value out = build(tape, leaves);
    tape.backward(out);

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& g = leaves[k].grad();
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            std::vector<Tensor> plus = inputs, minus = inputs;
            plus[k][i] += step;
            minus[k][i] -= step;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * step);
            CHECK(std::abs(g[i] - fd) <=
                  rel_tol * std::max(1.0, std::max(std::abs(fd), std::abs(g[i]))));
        }
    }
}

}  // namespace

TEST_CASE("forward basics") {
    Tape tape;
    Value x = tape.leaf(Tensor::scalar(3.0), true);
    Value y = square(x);
    CHECK(y.val()[0] == 9.0);

    // Identity graph: value passes through untouched.
    Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
    Value v = tape.leaf(t);
    CHECK(v.val().data == t.data);

    Value a = tape.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
    Value eye = tape.leaf(Tensor::from({2, 2}, {1, 0, 0, 1}));
    CHECK(matmul(a, eye).val().data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("shape mismatch errors name both shapes") {
    Tape tape;
    Value a = tape.leaf(Tensor::zeros({2, 3}));
    Value b = tape.leaf(Tensor::zeros({4}));
    try {
        add(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4]") != std::string::npos);
    }
}

TEST_CASE("backward basics") {
    Tape tape;
    Value w = tape.leaf(Tensor::scalar(3.0), true);
    Value loss = square(w);
    tape.backward(loss);
    CHECK(w.grad()[0] == 6.0);
}

TEST_CASE("backward on constant graph gives zero gradients") {
    Tape tape;
    Value w = tape.leaf(Tensor::scalar(2.0), true);
    Value c = tape.leaf(Tensor::scalar(5.0));
    Value loss = add(mul_scalar(w, 0.0), c);
    tape.backward(loss);
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("gradient requested before backward is an error") {
    Tape tape;
    Value w = tape.leaf(Tensor::scalar(1.0), true);
    CHECK_THROWS_AS((void)w.grad(), std::runtime_error);
}

TEST_CASE("diamond graph accumulates gradients from both paths") {
    Tape tape;
    Value x = tape.leaf(Tensor::scalar(1.5), true);
    Value b = square(x);
    Value c = add(b, b);  // dc/dx = 2 * 2x = 6
    tape.backward(c);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("finite differences: elementwise and reductions") {
    std::mt19937_64 rng(11);
    for (int it = 0; it < 100; ++it) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        check_gradients({a, b}, [](Tape&, const std::vector<Value>& v) {
            Value x = mul(add(v[0], v[1]), sub(v[0], v[1]));
            x = add_scalar(mul_scalar(square(x), 0.3), 0.7);
            return mean(x);
        });
    }
}

TEST_CASE("finite differences: relu and relu6 away from kinks") {
    std::mt19937_64 rng(12);
    for (int it = 0; it < 100; ++it) {
        Tensor a = random_tensor({8}, rng, -3.0, 9.0);
        // Nudge values off the non-differentiable points.
        for (double& x : a.data) {
            if (std::abs(x) < 1e-3) x += 0.01;
            if (std::abs(x - 6.0) < 1e-3) x += 0.01;
        }
        check_gradients({a}, [](Tape&, const std::vector<Value>& v) {
            return sum(add(relu(v[0]), relu6(v[0])));
        });
    }
}

TEST_CASE("finite differences: matmul and linear") {
    std::mt19937_64 rng(13);
    for (int it = 0; it < 20; ++it) {
        Tensor a = random_tensor({2, 3}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        check_gradients({a, b}, [](Tape&, const std::vector<Value>& v) {
            return sum(matmul(v[0], v[1]));
        });
        Tensor x = random_tensor({2, 5}, rng);
        Tensor w = random_tensor({3, 5}, rng);
        Tensor bias = random_tensor({3}, rng);
        check_gradients({x, w, bias}, [](Tape&, const std::vector<Value>& v) {
            return sum(square(linear(v[0], v[1], v[2])));
        });
    }
}

TEST_CASE("finite differences: conv2d, depthwise, pooling") {
    std::mt19937_64 rng(14);
    for (int it = 0; it < 10; ++it) {
        Tensor x = random_tensor({2, 3, 5, 5}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tensor b = random_tensor({4}, rng);
        check_gradients({x, w, b}, [](Tape&, const std::vector<Value>& v) {
            return sum(square(conv2d(v[0], v[1], v[2], 2, 1)));
        });
        Tensor dw = random_tensor({3, 3, 3}, rng);
        Tensor db = random_tensor({3}, rng);
        check_gradients({x, dw, db}, [](Tape&, const std::vector<Value>& v) {
            return sum(square(depthwise_conv2d(v[0], v[1], v[2], 1, 1)));
        });
        check_gradients({x}, [](Tape&, const std::vector<Value>& v) {
            return sum(square(global_avg_pool(v[0])));
        });
    }
}

TEST_CASE("finite differences: softmax cross entropy") {
    std::mt19937_64 rng(15);
    std::vector<int> labels{2, 0, 3};
    for (int it = 0; it < 20; ++it) {
        Tensor logits = random_tensor({3, 4}, rng, -2.0, 2.0);
        check_gradients({logits}, [&](Tape&, const std::vector<Value>& v) {
            return softmax_cross_entropy(v[0], labels);
        });
    }
}

TEST_CASE("sgd examples") {
    SgdState s(0.1, 0.0);
    Tensor w = Tensor::scalar(1.0);
    sgd_step(w, Tensor::scalar(0.5), s);
    CHECK(w[0] == doctest::Approx(0.95).epsilon(1e-15));

    // Two steps with momentum 0.9, g=1, lr=0.1, from 0.
    SgdState m(0.1, 0.9);
    Tensor w2 = Tensor::scalar(0.0);
    sgd_step(w2, Tensor::scalar(1.0), m);
    sgd_step(w2, Tensor::scalar(1.0), m);
    CHECK(w2[0] == doctest::Approx(-0.29).epsilon(1e-15));

    // Zero gradient: weight unchanged, velocity decays by momentum.
    SgdState z(0.1, 0.5);
    Tensor w3 = Tensor::scalar(2.0);
    sgd_step(w3, Tensor::scalar(1.0), z);
    const double v_before = z.velocity[0][0];
    const double w_after_first = w3[0];
    sgd_step(w3, Tensor::scalar(0.0), z);
    CHECK(z.velocity[0][0] == doctest::Approx(0.5 * v_before).epsilon(1e-15));
    CHECK(w3[0] == doctest::Approx(w_after_first - 0.1 * z.velocity[0][0]).epsilon(1e-15));
}

TEST_CASE("sgd with momentum 0 is bit-identical to plain gradient descent") {
    std::mt19937_64 rng(16);
    Tensor w1 = random_tensor({32}, rng);
    Tensor w2 = w1;
    SgdState s(0.05, 0.0);
    for (int step = 0; step < 50; ++step) {
        Tensor g = random_tensor({32}, rng);
        sgd_step(w1, g, s);
        for (std::size_t i = 0; i < w2.size(); ++i) w2[i] = w2[i] - 0.05 * g[i];
    }
    CHECK(w1.data == w2.data);
}

TEST_CASE("sgd rejects non-finite gradients naming the parameter") {
    SgdState s(0.1, 0.0);
    Tensor w = Tensor::scalar(1.0);
    Tensor g = Tensor::scalar(std::nan(""));
    std::vector<Tensor*> ps{&w};
    std::vector<const Tensor*> gs{&g};
    std::vector<std::string> names{"blockX.w"};
    try {
        sgd_step(ps, gs, s, nullptr, &names);
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("blockX.w") != std::string::npos);
    }
}

TEST_CASE("sgd frozen mask skips masked elements") {
    SgdState s(0.1, 0.0);
    Tensor w = Tensor::from({3}, {1.0, 2.0, 3.0});
    Tensor g = Tensor::from({3}, {1.0, 1.0, 1.0});
    Tensor mask = Tensor::from({3}, {0.0, 1.0, 0.0});
    std::vector<Tensor*> ps{&w};
    std::vector<const Tensor*> gs{&g};
    std::vector<const Tensor*> fz{&mask};
    sgd_step(ps, gs, s, &fz, nullptr);
    CHECK(w[0] == doctest::Approx(0.9));
    CHECK(w[1] == 2.0);
    CHECK(w[2] == doctest::Approx(2.9));
}

TEST_CASE("cosine schedule") {
    CosineSchedule lam(0.0, 1e-3, 100);
    CHECK(lam.value(0) == 0.0);
    CHECK(lam.value(100) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(lam.value(50) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lam.value(1000) == doctest::Approx(1e-3).epsilon(1e-15));  // clamps past the end

    CosineSchedule fth(0.04, 0.01, 77);
    CHECK(fth.value(0) == 0.04);
    CHECK(fth.value(77) == doctest::Approx(0.01).epsilon(1e-15));
    for (std::size_t t = 1; t <= 77; ++t) CHECK(fth.value(t) <= fth.value(t - 1) + 1e-15);
}
