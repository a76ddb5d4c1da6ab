// Copyright 2026 The tractflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "tractflow/nn.hpp"

using namespace tractflow;
using tftest::gradcheck;

namespace {

Var<double> dleaf(Tensor<double> t) { return Var<double>::leaf(std::move(t), true); }

Tensor<double> drandn(std::vector<int> shape, uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(shape), rng, sd);
}

}  // namespace

TEST_CASE("elementwise and scalar ops gradcheck") {
  auto a = dleaf(drandn({3, 4}, 1));
  auto b = dleaf(drandn({3, 4}, 2));
  CHECK(gradcheck({a, b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); }) < 1e-4);
  CHECK(gradcheck({a}, [&] { return mean_all(mul_const(add_const(neg(a), 0.3), 1.7)); }) < 1e-4);

  auto s = dleaf(Tensor<double>::full({1}, 0.7));
  CHECK(gradcheck({a, s}, [&] { return sum_all(scale_by(a, s)); }) < 1e-4);
  CHECK(gradcheck({a, s}, [&] { return sum_all(add_scalar_v(a, s)); }) < 1e-4);
}

TEST_CASE("activation gradchecks away from kinks") {
  // inputs kept away from 0 so the relu/leaky subgradient is exact
  Tensor<double> t = drandn({2, 5}, 3);
  for (auto& v : t.data) v += v > 0 ? 0.5 : -0.5;
  auto a = dleaf(t);
  CHECK(gradcheck({a}, [&] { return sum_all(relu(a)); }) < 1e-4);
  CHECK(gradcheck({a}, [&] { return sum_all(leaky_relu(a, 0.2)); }) < 1e-4);
  CHECK(gradcheck({a}, [&] { return sum_all(sigmoid(a)); }) < 1e-4);
  CHECK(gradcheck({a}, [&] { return sum_all(tanh(a)); }) < 1e-4);
  CHECK(gradcheck({a}, [&] { return sum_all(exp(mul_const(a, 0.3))); }) < 1e-4);

  Tensor<double> pos = drandn({6}, 4);
  for (auto& v : pos.data) v = std::fabs(v) + 0.5;
  auto p = dleaf(pos);
  CHECK(gradcheck({p}, [&] { return sum_all(log_abs(p)); }) < 1e-4);
  CHECK(gradcheck({p}, [&] { return sum_all(reciprocal(p)); }) < 1e-4);
  // clamp interior: inputs in (-0.9,0.9), bounds at +-1
  Tensor<double> c = drandn({8}, 5, 0.3);
  auto cv = dleaf(c);
  CHECK(gradcheck({cv}, [&] { return sum_all(clamp(cv, -1.0, 1.0)); }) < 1e-4);
}

TEST_CASE("bias and scale broadcast ops gradcheck") {
  auto x = dleaf(drandn({4, 3}, 6));
  auto b = dleaf(drandn({3}, 7));
  CHECK(gradcheck({x, b}, [&] { return sum_all(mul(add_feature(x, b), x)); }) < 1e-4);
  CHECK(gradcheck({x, b}, [&] { return sum_all(scale_feature(x, b)); }) < 1e-4);

  auto xc = dleaf(drandn({2, 3, 2, 2}, 8));
  auto bc = dleaf(drandn({3}, 9));
  CHECK(gradcheck({xc, bc}, [&] { return sum_all(mul(add_channel(xc, bc), xc)); }) < 1e-4);
}

TEST_CASE("matmul family gradcheck") {
  auto a = dleaf(drandn({3, 4}, 10));
  auto b = dleaf(drandn({4, 5}, 11));
  CHECK(gradcheck({a, b}, [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }) < 1e-4);

  auto c = dleaf(drandn({5, 4}, 12));
  CHECK(gradcheck({a, c}, [&] { return sum_all(matmul_nt(a, c)); }) < 1e-4);

  auto ba = dleaf(drandn({2, 3, 4}, 13));
  auto bb = dleaf(drandn({2, 4, 2}, 14));
  CHECK(gradcheck({ba, bb}, [&] {
          return sum_all(mul(bmm(ba, bb), bmm(ba, bb)));
        }) < 1e-4);
  CHECK(gradcheck({ba}, [&] {
          return sum_all(mul(transpose_last2(ba), transpose_last2(ba)));
        }) < 1e-4);
}

TEST_CASE("conv2d identity kernel is identity") {
  Rng rng(15);
  auto x = Var<float>::leaf(Tensor<float>::randn({2, 3, 5, 5}, rng));
  Tensor<float> w({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w[(c * 3 + c)] = 1.0f;
  auto wv = Var<float>::leaf(w);
  auto y = conv2d(x, wv, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-6));
}

TEST_CASE("conv2d gradcheck strided and padded") {
  auto x = dleaf(drandn({2, 2, 5, 5}, 16, 0.5));
  auto w = dleaf(drandn({3, 2, 3, 3}, 17, 0.5));
  CHECK(gradcheck({x, w}, [&] {
          auto y = conv2d(x, w, 2, 1);
          return sum_all(mul(y, y));
        }) < 1e-4);
}

TEST_CASE("conv_transpose2d shapes and gradcheck") {
  auto x = dleaf(drandn({2, 3, 4, 4}, 18, 0.5));
  auto w = dleaf(drandn({3, 2, 4, 4}, 19, 0.5));
  auto y = conv_transpose2d(x, w, 2, 1, 0);
  CHECK(y.shape() == std::vector<int>{2, 2, 8, 8});
  CHECK(gradcheck({x, w}, [&] {
          auto o = conv_transpose2d(x, w, 2, 1, 0);
          return sum_all(mul(o, o));
        }) < 1e-4);

  // k=3 with output padding restores odd sizes
  auto w3 = dleaf(drandn({3, 2, 3, 3}, 20, 0.5));
  auto y3 = conv_transpose2d(x, w3, 2, 1, 1);
  CHECK(y3.shape() == std::vector<int>{2, 2, 8, 8});
  CHECK(gradcheck({x, w3}, [&] {
          auto o = conv_transpose2d(x, w3, 2, 1, 1);
          return sum_all(mul(o, o));
        }) < 1e-4);
}

TEST_CASE("conv adjoint identity <conv(x),y> == <x,convT(y)>") {
  Rng rng(21);
  auto x = Tensor<double>::randn({1, 2, 6, 6}, rng);
  auto w = Tensor<double>::randn({3, 2, 3, 3}, rng);
  auto y = Tensor<double>::randn({1, 3, 3, 3}, rng);
  auto xv = Var<double>::leaf(x);
  auto wv = Var<double>::leaf(w);
  auto conv = conv2d(xv, wv, 2, 1);
  REQUIRE(conv.shape() == std::vector<int>{1, 3, 3, 3});
  double lhs = 0;
  for (int64_t i = 0; i < conv.numel(); ++i) lhs += conv.value()[i] * y[i];

  // convT weight layout [Cin,Cout,k,k]: the conv weight [Cout,Cin,k,k] is
  // already laid out correctly for the adjoint, only the shape label changes
  Tensor<double> wt({3, 2, 3, 3}, w.data);
  auto yv = Var<double>::leaf(y);
  auto wtv = Var<double>::leaf(wt);
  auto back = conv_transpose2d(yv, wtv, 2, 1, 1);
  REQUIRE(back.shape() == std::vector<int>{1, 2, 6, 6});
  double rhs = 0;
  for (int64_t i = 0; i < back.numel(); ++i) rhs += back.value()[i] * x[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("reshape slice concat sum_axis gradcheck") {
  auto a = dleaf(drandn({2, 6}, 22));
  CHECK(gradcheck({a}, [&] {
          auto r = reshape(a, {3, 4});
          return sum_all(mul(r, r));
        }) < 1e-4);
  CHECK(gradcheck({a}, [&] {
          auto s = slice(a, 1, 2, 3);
          return sum_all(mul(s, s));
        }) < 1e-4);
  auto b = dleaf(drandn({2, 2}, 23));
  CHECK(gradcheck({a, b}, [&] {
          auto c = concat<double>({a, b, a}, 1);
          return sum_all(mul(c, c));
        }) < 1e-4);
  CHECK(gradcheck({a}, [&] {
          auto s = sum_axis(a, 1);
          return sum_all(mul(s, s));
        }) < 1e-4);
}

TEST_CASE("softmax rows sum to one and gradcheck") {
  auto a = dleaf(drandn({3, 7}, 24));
  auto y = softmax(a, 1);
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += y.value()[i * 7 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto probe = dleaf(drandn({3, 7}, 25));
  CHECK(gradcheck({a}, [&] {
          return sum_all(mul(softmax(a, 1), probe));
        }) < 1e-4);
  // middle-axis softmax
  auto m = dleaf(drandn({2, 4, 3}, 26));
  auto probe2 = dleaf(drandn({2, 4, 3}, 27));
  CHECK(gradcheck({m}, [&] {
          return sum_all(mul(softmax(m, 1), probe2));
        }) < 1e-4);
}

TEST_CASE("mse value and gradcheck") {
  auto a = dleaf(drandn({4, 4}, 28));
  auto b = dleaf(drandn({4, 4}, 29));
  auto same = mse(a, a);
  CHECK(same.value()[0] == doctest::Approx(0.0));

  Tensor<double> ones = Tensor<double>::full({5}, 1.0);
  Tensor<double> zeros({5});
  auto u = Var<double>::leaf(ones);
  auto z = Var<double>::leaf(zeros);
  CHECK(mse(u, z).value()[0] == doctest::Approx(1.0));

  CHECK(gradcheck({a, b}, [&] { return mse(a, b); }, 1e-5) < 1e-4);
}

TEST_CASE("shape mismatch errors name the op") {
  auto a = dleaf(drandn({2, 3}, 30));
  auto b = dleaf(drandn({3, 2}, 31));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_AS(mse(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("logabsdet matches LU and gradcheck") {
  auto w = dleaf(drandn({4, 4}, 32));
  for (int i = 0; i < 4; ++i) w.value()[i * 4 + i] += 3.0;  // well-conditioned
  auto ld = logabsdet(w);
  double expect;
  std::vector<double> m(w.value().data.begin(), w.value().data.end());
  REQUIRE(mat_logabsdet(m, 4, expect));
  CHECK(ld.value()[0] == doctest::Approx(expect).epsilon(1e-10));
  CHECK(gradcheck({w}, [&] { return logabsdet(w); }, 1e-5) < 1e-4);

  auto sing = dleaf(Tensor<double>({3, 3}));
  CHECK_THROWS_AS(logabsdet(sing), NumericError);
}

TEST_CASE("mat_inverse inverts and gradcheck") {
  auto w = dleaf(drandn({3, 3}, 33));
  for (int i = 0; i < 3; ++i) w.value()[i * 3 + i] += 2.5;
  auto inv = mat_inverse(w);
  // W * W^{-1} = I
  auto prod = matmul(w, inv);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(prod.value()[i * 3 + j] ==
            doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
  auto probe = dleaf(drandn({3, 3}, 34));
  CHECK(gradcheck({w}, [&] {
          return sum_all(mul(mat_inverse(w), probe));
        }, 1e-5) < 1e-4);
}

TEST_CASE("gradients accumulate into reused leaves") {
  auto a = dleaf(Tensor<double>::full({2}, 1.5));
  auto loss = sum_all(mul(a, a));
  backward(loss);
  CHECK(a.n->grad[0] == doctest::Approx(3.0));
  // second backward without zero_grad accumulates
  auto loss2 = sum_all(mul(a, a));
  backward(loss2);
  CHECK(a.n->grad[0] == doctest::Approx(6.0));
  a.zero_grad();
  CHECK(a.n->grad[0] == doctest::Approx(0.0));
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Rng rng(35);
  auto p = Var<float>::leaf(Tensor<float>::randn({4}, rng), true);
  ParamList<float> pl{{"p", p}};
  Adam<float> opt(pl, 1e-3);
  Tensor<float> before = p.value();
  p.grad();  // allocate zero grads
  opt.step();
  for (int i = 0; i < 4; ++i) CHECK(p.value()[i] == before[i]);
}

TEST_CASE("adam single step magnitude is lr for constant gradient") {
  auto p = Var<float>::leaf(Tensor<float>::full({3}, 2.0f), true);
  ParamList<float> pl{{"p", p}};
  Adam<float> opt(pl, 0.01);
  p.grad();
  p.n->grad.fill(0.5f);
  opt.step();
  // bias-corrected first step: delta = -lr * g / (|g| + eps)
  for (int i = 0; i < 3; ++i)
    CHECK(p.value()[i] == doctest::Approx(2.0f - 0.01f).epsilon(1e-6));

  auto q = Var<float>::leaf(Tensor<float>::full({1}, 2.0f), true);
  ParamList<float> ql{{"q", q}};
  Adam<float> opt2(ql, 0.01);
  q.grad();
  q.n->grad.fill(-3.0f);
  opt2.step();
  CHECK(q.value()[0] == doctest::Approx(2.0f + 0.01f).epsilon(1e-6));
}

TEST_CASE("adam drives quadratic toward zero in 200 steps") {
  auto w = Var<double>::leaf(Tensor<double>::full({1}, 1.0), true);
  ParamList<double> pl{{"w", w}};
  Adam<double> opt(pl, 0.1);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = mul(w, w);
    backward(sum_all(loss));
    opt.step();
  }
  CHECK(std::fabs(w.value()[0]) < 0.1);
}

TEST_CASE("adam rejects NaN gradients") {
  auto p = Var<float>::leaf(Tensor<float>::full({2}, 1.0f), true);
  ParamList<float> pl{{"p", p}};
  Adam<float> opt(pl, 0.01);
  p.grad();
  p.n->grad[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(opt.step(), NumericError);
}

TEST_CASE("batchnorm train mode normalizes per channel") {
  Rng rng(36);
  BatchNorm2d<float> bn(3);
  auto x = Var<float>::leaf(Tensor<float>::randn({4, 3, 5, 5}, rng, 2.0f));
  for (auto& v : x.value().data) v += 1.3f;
  auto y = bn.forward(x, true);
  int64_t hw = 25;
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (int b = 0; b < 4; ++b)
      for (int64_t k = 0; k < hw; ++k) {
        double v = y.value()[(b * 3 + c) * hw + k];
        s += v;
        s2 += v * v;
      }
    double mean = s / (4 * hw);
    double var = s2 / (4 * hw) - mean * mean;
    CHECK(std::fabs(mean) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm eval identity with unit running stats") {
  BatchNorm2d<float> bn(2);
  Rng rng(37);
  auto x = Var<float>::leaf(Tensor<float>::randn({1, 2, 3, 3}, rng));
  auto y = bn.forward(x, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm rejects batch of one in train mode") {
  BatchNorm2d<float> bn(2);
  Rng rng(38);
  auto x = Var<float>::leaf(Tensor<float>::randn({1, 2, 3, 3}, rng));
  CHECK_THROWS_AS(bn.forward(x, true), ConfigError);
}

TEST_CASE("batchnorm gradcheck both modes") {
  BatchNorm2d<double> bn(2);
  Rng rng(39);
  bn.gamma.value()[0] = 1.3;
  bn.gamma.value()[1] = 0.8;
  bn.beta.value()[0] = 0.2;
  auto x = dleaf(drandn({3, 2, 2, 2}, 40));
  auto probe = dleaf(drandn({3, 2, 2, 2}, 41));
  // train mode: fresh running stats each call do not affect the value path
  CHECK(gradcheck({x, bn.gamma, bn.beta}, [&] {
          BatchNorm2d<double> local(2);
          local.gamma = bn.gamma;
          local.beta = bn.beta;
          return sum_all(mul(local.forward(x, true), probe));
        }) < 1e-4);
  CHECK(gradcheck({x, bn.gamma, bn.beta}, [&] {
          BatchNorm2d<double> local(2);
          local.gamma = bn.gamma;
          local.beta = bn.beta;
          return sum_all(mul(local.forward(x, false), probe));
        }) < 1e-4);
}

TEST_CASE("dense layer gradcheck") {
  Rng rng(42);
  Dense<double> d(4, 3, rng);
  auto x = dleaf(drandn({2, 4}, 43));
  CHECK(gradcheck({x, d.w, d.b}, [&] {
          auto y = d.forward(x);
          return sum_all(mul(y, y));
        }) < 1e-4);
}
