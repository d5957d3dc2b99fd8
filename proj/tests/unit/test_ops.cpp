#include <cmath>

#include "acia/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace acia;
using acia::nn::Var;
using acia::testing::gradcheck;
using acia::testing::random_tensor;

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(1);
  auto x = random_tensor({3, 4}, rng);
  auto y = random_tensor({3, 4}, rng, 0.5, 2.0);
  CHECK(gradcheck([](auto& v) { return nn::sum(nn::mul(nn::add(v[0], v[1]), nn::sub(v[0], v[1]))); }, {x, y}) < 1e-6);
  CHECK(gradcheck([](auto& v) { return nn::mean(nn::log(v[0])); }, {y}) < 1e-6);
  CHECK(gradcheck([](auto& v) { return nn::sum(nn::pow(v[0], 1.7)); }, {y}) < 1e-6);
  CHECK(gradcheck([](auto& v) { return nn::sum(nn::gelu(v[0])); }, {x}) < 1e-6);
  CHECK(gradcheck([](auto& v) { return nn::sum(nn::sigmoid(nn::exp(v[0]))); }, {x}) < 1e-6);
  CHECK(gradcheck([](auto& v) { return nn::sum(nn::leaky_relu(v[0], 0.1)); }, {x}) < 1e-6);
}

TEST_CASE("shape op gradients") {
  Rng rng(2);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 2}, rng);
  auto w = random_tensor({3, 6}, rng);
  CHECK(gradcheck(
            [&](auto& v) {
              Var c = nn::concat_cols(v[0], v[1]);
              return nn::sum(nn::mul(c, Var(w)));
            },
            {a, b}) < 1e-6);
  const int rows[] = {2, 0, 2};
  auto w2 = random_tensor({3, 2}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::slice_cols(nn::select_rows(v[0], rows), 1, 2), Var(w2))); },
                  {a}) < 1e-6);
  auto w3 = random_tensor({4, 3}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::transpose(v[0]), Var(w3))); }, {a}) < 1e-6);
  auto w4 = random_tensor({1, 4}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::mean_rows(v[0]), Var(w4))); }, {a}) < 1e-6);
  auto w5 = random_tensor({6, 4}, rng);
  CHECK(gradcheck(
            [&](auto& v) {
              const Var parts[] = {v[0], v[1]};
              return nn::sum(nn::mul(nn::concat_rows(parts), Var(w5)));
            },
            {a, random_tensor({3, 4}, rng)}) < 1e-6);
}

TEST_CASE("linear, conv and pooling gradients") {
  Rng rng(3);
  auto wout = random_tensor({2, 5}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::linear(v[0], v[1], v[2]), Var(wout))); },
                  {random_tensor({2, 3}, rng), random_tensor({5, 3}, rng), random_tensor({5}, rng)}) < 1e-6);
  auto wc = random_tensor({2, 5, 5}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::conv2d(v[0], v[1], v[2], 1, 1), Var(wc))); },
                  {random_tensor({3, 5, 5}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)}) < 1e-6);
  auto ws = random_tensor({2, 3, 3}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::conv2d(v[0], v[1], v[2], 2, 1), Var(ws))); },
                  {random_tensor({3, 5, 5}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)}) < 1e-6);
  auto wp = random_tensor({2, 3, 3}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::max_pool2d(v[0], 2), Var(wp))); },
                  {random_tensor({2, 5, 5}, rng)}) < 1e-6);
}

TEST_CASE("normalization and probability gradients") {
  Rng rng(4);
  auto x = random_tensor({3, 5}, rng, -2, 2);
  auto w = random_tensor({3, 5}, rng);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::layer_norm(v[0], v[1], v[2]), Var(w))); },
                  {x, random_tensor({5}, rng), random_tensor({5}, rng)}) < 1e-5);
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::mul(nn::softmax_rows(v[0]), Var(w))); }, {x}) < 1e-6);
  const int cols[] = {4, 0, 2};
  CHECK(gradcheck([&](auto& v) { return nn::sum(nn::gather_cols(nn::log_softmax_rows(v[0]), cols)); }, {x}) < 1e-6);
  const double t[] = {1, 0, 1, 1, 0};
  CHECK(gradcheck([&](auto& v) { return nn::bce_with_logits(nn::reshape(nn::slice_cols(v[0], 0, 5), {5}), t); },
                  {random_tensor({1, 5}, rng, -3, 3)}) < 1e-6);
  CHECK(gradcheck([&](auto& v) { return nn::mean(nn::smooth_l1_elementwise(v[0], 0.7)); }, {x}) < 1e-6);
}

TEST_CASE("softmax rows are normalized and log-softmax is stable") {
  Var x(Tensor(Shape{2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5}));
  Tensor p = nn::softmax_rows(x).value();
  for (int r = 0; r < 2; ++r) CHECK(p.at(r, 0) + p.at(r, 1) + p.at(r, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(nn::log_softmax_rows(x).value().all_finite());
}

TEST_CASE("no-grad guard detaches results") {
  Var w(Tensor::from({1.0, 2.0}), true);
  {
    nn::NoGradGuard guard;
    Var y = nn::sum(nn::mul(w, w));
    CHECK_FALSE(y.requires_grad());
  }
  Var y = nn::sum(nn::mul(w, w));
  y.backward();
  CHECK(w.grad()[1] == 4.0);
}

TEST_CASE("shape errors are reported") {
  Var a(Tensor(Shape{2, 3}));
  Var b(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(nn::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(nn::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(nn::grad_reverse(a, -1.0), std::invalid_argument);
}
