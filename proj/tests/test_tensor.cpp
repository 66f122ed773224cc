#include <cmath>
#include <limits>

#include "support.hpp"
#include "stvla/tensor.hpp"

using namespace stvla;
using stvla::test::check_grads;
using stvla::test::uniform_tensor;

TEST_CASE("tensor construction checks shape against data") {
  CHECK_THROWS(Tensor({2, 3}, std::vector<double>(5, 0.0)));
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("softmax closed forms") {
  const Tensor u = softmax(Tensor::row({1, 1, 1}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor s = softmax(Tensor::row({0.0, std::log(2.0)}), 0);
  CHECK(std::abs(s[0] - 1.0 / 3.0) <= 1e-15);
  CHECK(std::abs(s[1] - 2.0 / 3.0) <= 1e-15);
}

TEST_CASE("softmax slices sum to one and ignore a constant shift") {
  Rng rng(3);
  const Tensor x = uniform_tensor({5, 7}, rng, -2, 2, false);
  for (std::size_t axis : {0u, 1u}) {
    const Tensor y = softmax(x, axis);
    const Tensor z = softmax(add_scalar(x, 37.25), axis);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - z[i]) <= 1e-12);
    const std::size_t outer = axis == 0 ? 7 : 5, inner = axis == 0 ? 5 : 7;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += axis == 0 ? y.at(k, o) : y.at(o, k);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax stays finite on huge logits and rejects non-finite ones") {
  const Tensor y = softmax(Tensor::row({1e300, 0.0}), 0);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.0);
  CHECK_THROWS_WITH(softmax(Tensor::row({0.0, std::numeric_limits<double>::quiet_NaN()}), 0),
                    doctest::Contains("non-finite logits"));
  CHECK_THROWS(softmax(Tensor::row({0.0, 1.0}), 1));
}

TEST_CASE("softmax weighted-sum gradient against central differences") {
  Rng rng(11);
  const Tensor x = uniform_tensor({3, 4}, rng);
  const Tensor c = uniform_tensor({3, 4}, rng, -2, 2, false);
  check_grads([&] { return sum(mul(softmax(x, 1), c)); }, {x}, 1e-6);
  check_grads([&] { return sum(mul(softmax(x, 0), c)); }, {x}, 1e-6);
}

TEST_CASE("l1_loss values and subgradient") {
  const Tensor a = Tensor::row({0.5, -1.5, 2.0});
  CHECK(l1_loss(a, a).item() == 0.0);
  CHECK(l1_loss(Tensor::row({1, -1}), Tensor::row({0, 0})).item() == 1.0);
  CHECK_THROWS(l1_loss(Tensor::row({1, 2}), Tensor::row({1, 2, 3})));

  // Ties get a zero subgradient.
  Tensor p = Tensor::row({1.0, 2.0}, true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(l1_loss(p, Tensor::row({1.0, 0.0})));
  }
  CHECK(p.grad()[0] == 0.0);
  CHECK(p.grad()[1] == 0.5);
}

TEST_CASE("l1_loss gradient is sign(pred - target) / n") {
  Rng rng(5);
  Tensor pred = uniform_tensor({4, 3}, rng);
  const Tensor target = uniform_tensor({4, 3}, rng, -2, 2, false);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(l1_loss(pred, target));
  }
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - target[i];
    CHECK(pred.grad()[i] == (d > 0 ? 1.0 : -1.0) / 12.0);
  }
  pred.zero_grad();
  check_grads([&] { return l1_loss(pred, target); }, {pred}, 1e-6);
}

TEST_CASE("grad_check closed forms") {
  Tensor x = Tensor::scalar(3.0, true);
  GradCheckOptions opt;
  opt.tolerance = 1e-9;
  const auto r = grad_check([&] { return mul(x, x); }, {x}, opt);
  CHECK(r.passed);
  CHECK(r.worst < 1e-9);

  Tensor y = Tensor::row({0.3, -0.7}, true);
  const auto c = grad_check([] { return Tensor::scalar(4.0); }, {y});
  CHECK(c.passed);
  CHECK(c.worst == 0.0);

  Tensor z = Tensor::scalar(0.0, true);
  CHECK_THROWS(grad_check([&] { return scale(z, std::numeric_limits<double>::infinity()); }, {z}));
}

TEST_CASE("every differentiable op matches central differences") {
  Rng rng(2024);
  const Tensor a = uniform_tensor({3, 4}, rng), b = uniform_tensor({4, 2}, rng), bt = uniform_tensor({2, 4}, rng);
  const Tensor c = uniform_tensor({3, 4}, rng), bias = uniform_tensor({4}, rng), bias2 = uniform_tensor({2}, rng);
  const Tensor s = uniform_tensor({1}, rng), w = uniform_tensor({4}, rng);
  const Tensor weights = uniform_tensor({3, 4}, rng, -2, 2, false);
  const Tensor wide = uniform_tensor({3, 2}, rng);
  auto reduce = [&](const Tensor& t) { return sum(mul(t, weights)); };

  check_grads([&] { return sum(matmul(a, b)); }, {a, b});
  check_grads([&] { return sum(matmul_nt(a, bt)); }, {a, bt});
  check_grads([&] { return sum(linear(a, b, bias2)); }, {a, b, bias2});
  check_grads([&] { return reduce(add(a, c)); }, {a, c});
  check_grads([&] { return reduce(sub(a, c)); }, {a, c});
  check_grads([&] { return reduce(mul(a, c)); }, {a, c});
  check_grads([&] { return reduce(scale(a, -1.7)); }, {a});
  check_grads([&] { return reduce(add_scalar(a, 0.3)); }, {a});
  check_grads([&] { return reduce(add_bias(a, bias)); }, {a, bias});
  check_grads([&] { return reduce(mul_trailing(a, w)); }, {a, w});
  check_grads([&] { return reduce(mul_scalar_tensor(a, s)); }, {a, s});
  check_grads([&] { return reduce(cos(a)); }, {a});
  check_grads([&] { return reduce(sin(a)); }, {a});
  check_grads([&] { return reduce(tanh(a)); }, {a});
  check_grads([&] { return reduce(sigmoid(a)); }, {a});
  check_grads([&] { return reduce(softplus(a)); }, {a});
  check_grads([&] { return reduce(gelu(a)); }, {a});
  check_grads([&] { return reduce(abs(a)); }, {a});
  check_grads([&] { return reduce(clamp_max(a, 0.25)); }, {a});
  check_grads([&] { return reduce(softmax(a, 1)); }, {a});
  check_grads([&] { return reduce(rms_norm(a)); }, {a});
  check_grads([&] { return reduce(reshape(reshape(a, {12}), {3, 4})); }, {a});
  check_grads([&] { return sum(mul(concat({a, wide}, 1), concat({weights, wide}, 1))); }, {a, wide});
  check_grads([&] { return reduce(concat({slice(a, 0, 0, 1), slice(a, 0, 1, 2)}, 0)); }, {a});
  check_grads([&] { return mean(mul(a, c)); }, {a, c});
  check_grads([&] { return l1_loss(a, c); }, {a, c});
  const Tensor table = uniform_tensor({5, 4}, rng);
  check_grads([&] { return reduce(embedding(table, {4, 0, 4})); }, {table});
}

TEST_CASE("concat then split is the identity and routes gradients") {
  Rng rng(9);
  Tensor a = uniform_tensor({2, 3}, rng), b = uniform_tensor({2, 5}, rng);
  Tape tape;
  TapeScope scope(tape);
  const Tensor joined = concat({a, b}, 1);
  const auto parts = split(joined, 1, {3, 5});
  REQUIRE(parts.size() == 2);
  CHECK(stvla::test::bitwise_equal(parts[0].data(), a.data()));
  CHECK(stvla::test::bitwise_equal(parts[1].data(), b.data()));
  // Only the second half reaches the loss.
  tape.backward(sum(scale(parts[1], 2.0)));
  CHECK(tape.size() == 0);
  for (double g : b.grad()) CHECK(g == 2.0);
  if (a.has_grad())
    for (double g : a.grad()) CHECK(g == 0.0);
  CHECK_THROWS(split(joined, 1, {3, 4}));
}

TEST_CASE("shape mismatches are errors; only trailing bias broadcasts") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  CHECK_THROWS(add(a, b));
  CHECK_THROWS(mul(a, Tensor::zeros({1, 3})));
  CHECK_THROWS(matmul(a, a));
  CHECK_NOTHROW(add_bias(a, Tensor::zeros({3})));
  CHECK_THROWS(add_bias(a, Tensor::zeros({2})));
}

TEST_CASE("ops record only under an active tape with a trainable input") {
  Tensor p = Tensor::row({1.0, 2.0}, true);
  const Tensor frozen = Tensor::row({1.0, 2.0});
  const Tensor untaped = mul(p, p);
  CHECK_FALSE(untaped.requires_grad());

  Tape tape;
  TapeScope scope(tape);
  const Tensor f = mul(frozen, frozen);
  CHECK(tape.size() == 0);
  CHECK_THROWS(tape.backward(sum(f)));
  const Tensor g = sum(mul(p, p));
  CHECK(tape.size() == 2);
  tape.backward(g, true);
  CHECK(tape.size() == 2);
  CHECK(p.grad()[0] == 2.0);
  CHECK(p.grad()[1] == 4.0);
  // Leaf gradients accumulate until cleared.
  tape.backward(g);
  CHECK(p.grad()[1] == 8.0);
  CHECK(tape.size() == 0);
}

TEST_CASE("every reachable trainable leaf gets a gradient") {
  Rng rng(4);
  Tensor w1 = uniform_tensor({3, 3}, rng), w2 = uniform_tensor({3, 1}, rng), unused = uniform_tensor({2}, rng);
  const Tensor x = uniform_tensor({2, 3}, rng, -2, 2, false);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(matmul(tanh(matmul(x, w1)), w2)));
  CHECK(w1.has_grad());
  CHECK(w2.has_grad());
  CHECK(w1.grad().size() == w1.numel());
  CHECK_FALSE(unused.has_grad());
}
