#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "discn/ops.hpp"
#include "discn/tensor.hpp"
#include "oracles.hpp"

using namespace discn;
using D = Tensor<double>;
using F = Tensor<float>;

namespace {

D random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(numel(s)));
  for (auto& x : v) x = dist(rng);
  return D::from_data(s, std::move(v));
}

// gradcheck: analytic backward vs central differences, all in f64
double check_gradients(std::vector<D> leaves, const std::function<D(const std::vector<D>&)>& build,
                       int probes_per_leaf = 6, std::uint64_t seed = 99) {
  for (auto& l : leaves) l.set_requires_grad(true);
  D loss = build(leaves);
  loss.backward();
  std::vector<std::vector<double>> grads;
  for (auto& l : leaves) grads.push_back(l.grad());
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto loss_fn = [&]() { return build(leaves).item(); };
    worst = std::max(worst, oracle::max_grad_rel_err(leaves[li], loss_fn, grads[li],
                                                     std::min<long>(probes_per_leaf, leaves[li].numel()), rng));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  D I = D::from_data({2, 2}, {1, 0, 0, 1});
  D X = D::from_data({2, 2}, {3.5, -1.25, 2.0, 7.75});
  D Y = matmul(I, X);
  for (int i = 0; i < 4; ++i) CHECK(Y.data()[i] == doctest::Approx(X.data()[i]));

  D A = D::from_data({2, 2}, {1, 2, 3, 4});
  D B = D::from_data({2, 1}, {5, 6});
  D C = matmul(A, B);
  CHECK(C.data()[0] == doctest::Approx(17));
  CHECK(C.data()[1] == doctest::Approx(39));
}

TEST_CASE("matmul matches triple-loop oracle on random shapes") {
  std::mt19937_64 rng(42);
  for (int iter = 0; iter < 10; ++iter) {
    long m = 1 + static_cast<long>(rng() % 6);
    long k = 1 + static_cast<long>(rng() % 6);
    long n = 1 + static_cast<long>(rng() % 6);
    D a = random_tensor({m, k}, rng);
    D b = random_tensor({k, n}, rng);
    auto ref = oracle::matmul_ref(a.data(), b.data(), m, k, n);
    D c = matmul(a, b);
    for (long i = 0; i < m * n; ++i) CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul grad of sum(A*B) wrt A equals ones*B^T and passes fd") {
  std::mt19937_64 rng(7);
  D a = random_tensor({3, 4}, rng);
  D b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  D loss = sum_all(matmul(a, b));
  loss.backward();
  // expected dA[i,k] = sum_j B[k,j]
  for (long i = 0; i < 3; ++i)
    for (long k = 0; k < 4; ++k) {
      double expect = 0;
      for (long j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect));
    }
  double worst = check_gradients({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                                 [](const std::vector<D>& l) { return sum_all(matmul(l[0], l[1])); });
  CHECK(worst < 1e-4);
}

TEST_CASE("matmul batched forms and gradients") {
  std::mt19937_64 rng(11);
  // [B,m,k] x [k,n]
  double w1 = check_gradients({random_tensor({2, 3, 4}, rng), random_tensor({4, 2}, rng)},
                              [](const std::vector<D>& l) { return mean_all(matmul(l[0], l[1])); });
  CHECK(w1 < 1e-4);
  // [m,k] x [B,k,n]
  double w2 = check_gradients({random_tensor({3, 4}, rng), random_tensor({2, 4, 2}, rng)},
                              [](const std::vector<D>& l) { return mean_all(matmul(l[0], l[1])); });
  CHECK(w2 < 1e-4);
  // [B,m,k] x [B,k,n]
  double w3 = check_gradients({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)},
                              [](const std::vector<D>& l) { return mean_all(matmul(l[0], l[1])); });
  CHECK(w3 < 1e-4);
}

TEST_CASE("matmul dimension errors name both shapes") {
  D a = D::zeros({2, 3});
  D b = D::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax closed forms") {
  D x = D::from_data({2}, {0, 0});
  D y = softmax(x, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  D x2 = D::from_data({2}, {1, 2});
  D y2 = softmax(x2, 0);
  CHECK(y2.data()[0] == doctest::Approx(0.26894142137).epsilon(1e-9));
  CHECK(y2.data()[1] == doctest::Approx(0.73105857863).epsilon(1e-9));
}

TEST_CASE("softmax shift invariance, row sums, gradient") {
  std::mt19937_64 rng(17);
  for (int iter = 0; iter < 20; ++iter) {
    D x = random_tensor({3, 5}, rng, -3, 3);
    std::uniform_real_distribution<double> cd(-10, 10);
    double c = cd(rng);
    D shifted = D::from_data({3, 5}, x.data());
    for (auto& v : shifted.mutable_data()) v += c;
    D y1 = softmax(x, 1);
    D y2 = softmax(shifted, 1);
    for (long i = 0; i < 15; ++i) CHECK(y1.data()[i] == doctest::Approx(y2.data()[i]).epsilon(1e-9));
    for (long r = 0; r < 3; ++r) {
      double sum = 0;
      for (long j = 0; j < 5; ++j) sum += y1.data()[r * 5 + j];
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
  }
  // softmax along a middle axis
  D x = random_tensor({2, 4, 3}, rng);
  D y = softmax(x, 1);
  for (long b = 0; b < 2; ++b)
    for (long k = 0; k < 3; ++k) {
      double sum = 0;
      for (long j = 0; j < 4; ++j) sum += y.data()[(b * 4 + j) * 3 + k];
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
  double worst = check_gradients({random_tensor({2, 5}, rng)}, [](const std::vector<D>& l) {
    D y = softmax(l[0], 1);
    return sum_all(mul(y, y));  // non-trivial downstream
  });
  CHECK(worst < 1e-4);
}

TEST_CASE("relu sigmoid tanh behavior and gradients") {
  D x = D::from_data({4}, {-2, -0.5, 0.5, 2});
  D r = relu(x);
  CHECK(r.data()[0] == 0);
  CHECK(r.data()[1] == 0);
  CHECK(r.data()[2] == doctest::Approx(0.5));
  CHECK(r.data()[3] == doctest::Approx(2));
  std::mt19937_64 rng(3);
  double w = check_gradients({random_tensor({6}, rng, 0.1, 1.0)}, [](const std::vector<D>& l) {
    return sum_all(mul(relu(l[0]), sigmoid(tanh_op(l[0]))));
  });
  CHECK(w < 1e-4);
}

TEST_CASE("broadcasting add/mul values and gradients") {
  std::mt19937_64 rng(23);
  D a = D::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  D b = D::from_data({3}, {10, 20, 30});
  D c = add(a, b);
  CHECK(c.data()[0] == 11);
  CHECK(c.data()[5] == 36);
  D g = D::from_data({2, 1}, {2, 3});
  D m = mul(a, g);
  CHECK(m.data()[0] == 2);
  CHECK(m.data()[3] == 12);

  double w = check_gradients({random_tensor({2, 3, 4}, rng), random_tensor({3, 1}, rng)},
                             [](const std::vector<D>& l) { return mean_all(mul(add(l[0], l[1]), l[1])); });
  CHECK(w < 1e-4);
  CHECK_THROWS_AS(add(D::zeros({2, 3}), D::zeros({4})), DimensionError);
}

TEST_CASE("backward contract") {
  // loss = x^2 at x=3 -> grad 6
  D x = D::scalar(3.0);
  x.set_requires_grad(true);
  D loss = mul(x, x);
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));

  // constant loss: gradients stay zero
  D y = D::scalar(2.0);
  y.set_requires_grad(true);
  D c = D::scalar(5.0);
  c.set_requires_grad(true);
  D loss2 = mul(c, c);
  loss2.backward();
  CHECK(y.grad()[0] == 0.0);

  // non-scalar loss refused
  D v = D::from_data({2}, {1, 2});
  v.set_requires_grad(true);
  CHECK_THROWS_AS(mul(v, v).backward(), Error);
}

TEST_CASE("two-layer perceptron gradcheck vs central differences") {
  std::mt19937_64 rng(31);
  D x = random_tensor({4, 3}, rng);
  D w1 = random_tensor({3, 5}, rng);
  D b1 = random_tensor({5}, rng);
  D w2 = random_tensor({5, 2}, rng);
  D b2 = random_tensor({2}, rng);
  double worst = check_gradients({x, w1, b1, w2, b2}, [](const std::vector<D>& l) {
    D h = relu(linear(l[0], l[1], l[2]));
    D out = linear(h, l[3], l[4]);
    return mean_all(mul(out, out));
  }, 8);
  CHECK(worst < 1e-4);
}

TEST_CASE("sgd recurrence") {
  // w=1, grad=1, lr=0.1, momentum=0.9, wd=0: w -> 0.9 -> 0.71
  Parameter<double> p("w", D::scalar(1.0));
  std::vector<Parameter<double>*> params = {&p};
  p.tensor.zero_grad();
  p.tensor.node()->grad[0] = 1.0;
  sgd_step(params, 0.1, 0.9, 0.0);
  CHECK(p.tensor.data()[0] == doctest::Approx(0.9));
  p.tensor.node()->grad[0] = 1.0;
  sgd_step(params, 0.1, 0.9, 0.0);
  CHECK(p.velocity[0] == doctest::Approx(1.9));
  CHECK(p.tensor.data()[0] == doctest::Approx(0.71));

  // zero grad, zero velocity: no movement
  Parameter<double> q("q", D::scalar(2.5));
  std::vector<Parameter<double>*> qs = {&q};
  q.tensor.zero_grad();
  sgd_step(qs, 0.1, 0.9, 0.0);
  CHECK(q.tensor.data()[0] == doctest::Approx(2.5));

  // momentum 0 reduces to vanilla
  Parameter<double> r("r", D::scalar(1.0));
  std::vector<Parameter<double>*> rs = {&r};
  r.tensor.zero_grad();
  r.tensor.node()->grad[0] = 0.5;
  sgd_step(rs, 0.2, 0.0, 0.0);
  CHECK(r.tensor.data()[0] == doctest::Approx(1.0 - 0.2 * 0.5));

  // weight decay enters the velocity: v = g + wd*w
  Parameter<double> s("s", D::scalar(2.0));
  std::vector<Parameter<double>*> ss = {&s};
  s.tensor.zero_grad();
  s.tensor.node()->grad[0] = 1.0;
  sgd_step(ss, 0.1, 0.9, 0.01);
  CHECK(s.tensor.data()[0] == doctest::Approx(2.0 - 0.1 * (1.0 + 0.01 * 2.0)));
}

TEST_CASE("conv2d identity kernel and box kernel") {
  std::mt19937_64 rng(41);
  D x = random_tensor({1, 1, 4, 4}, rng);
  D ident = D::from_data({1, 1, 1, 1}, {1.0});
  D y = conv2d(x, ident, D::zeros({0}), 1, 0);
  for (long i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  // 3x3 all-ones kernel, p=1, on a one-hot image: 3x3 box of ones
  D hot = D::zeros({1, 1, 5, 5});
  hot.mutable_data()[2 * 5 + 2] = 1.0;
  D ones = D::from_data({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  D box = conv2d(hot, ones, D::zeros({0}), 1, 1);
  for (long y2 = 0; y2 < 5; ++y2)
    for (long x2 = 0; x2 < 5; ++x2) {
      bool inside = std::abs(y2 - 2) <= 1 && std::abs(x2 - 2) <= 1;
      CHECK(box.data()[y2 * 5 + x2] == doctest::Approx(inside ? 1.0 : 0.0));
    }
}

TEST_CASE("conv2d gradcheck incl. stride and padding") {
  std::mt19937_64 rng(43);
  double w = check_gradients(
      {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
      [](const std::vector<D>& l) { return mean_all(mul(conv2d(l[0], l[1], l[2], 2, 1),
                                                        conv2d(l[0], l[1], l[2], 2, 1))); }, 8);
  CHECK(w < 1e-4);
  CHECK_THROWS_AS(conv2d(D::zeros({1, 3, 4, 4}), D::zeros({2, 2, 3, 3}), D::zeros({0}), 1, 1), DimensionError);
}

TEST_CASE("batchnorm2d train/eval semantics and gradcheck") {
  std::mt19937_64 rng(47);
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  D zero = D::zeros({2, 2, 3, 3});
  D g = D::ones({2});
  D b = D::zeros({2});
  D out = batchnorm2d(zero, g, b, &rm, &rv, true);
  for (double v : out.data()) CHECK(std::isfinite(v));
  // eval mode on zero input with fresh stats: finite as well
  std::vector<double> rm2(2, 0.0), rv2(2, 1.0);
  D out2 = batchnorm2d(zero, g, b, &rm2, &rv2, false);
  for (double v : out2.data()) CHECK(std::isfinite(v));

  std::vector<double> rm3(2, 0.0), rv3(2, 1.0);
  double w = check_gradients(
      {random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng, 0.5, 1.5), random_tensor({2}, rng)},
      [&](const std::vector<D>& l) {
        std::vector<double> m = rm3, v = rv3;  // keep stats fixed across fd probes
        return mean_all(mul(batchnorm2d(l[0], l[1], l[2], &m, &v, true),
                            batchnorm2d(l[0], l[1], l[2], &m, &v, true)));
      }, 8);
  CHECK(w < 1e-4);
}

TEST_CASE("layer_norm gradcheck") {
  std::mt19937_64 rng(53);
  double w = check_gradients(
      {random_tensor({3, 4}, rng), random_tensor({4}, rng, 0.5, 1.5), random_tensor({4}, rng)},
      [](const std::vector<D>& l) {
        D y = layer_norm(l[0], l[1], l[2]);
        return mean_all(mul(y, y));
      }, 8);
  CHECK(w < 1e-4);
}

TEST_CASE("shape ops: reshape, concat, slice, transpose gradients") {
  std::mt19937_64 rng(59);
  double w1 = check_gradients({random_tensor({2, 6}, rng)}, [](const std::vector<D>& l) {
    return mean_all(mul(reshape(l[0], {3, 4}), reshape(l[0], {3, 4})));
  });
  CHECK(w1 < 1e-4);
  double w2 = check_gradients({random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)},
                              [](const std::vector<D>& l) {
                                D c = concat<double>({l[0], l[1]}, 1);
                                return mean_all(mul(c, c));
                              });
  CHECK(w2 < 1e-4);
  double w3 = check_gradients({random_tensor({2, 5, 3}, rng)}, [](const std::vector<D>& l) {
    D s = slice(l[0], 1, 1, 3);
    D t = transpose_last2(s);
    return mean_all(mul(t, t));
  });
  CHECK(w3 < 1e-4);
}

TEST_CASE("per_token_linear matches per-token oracle and gradcheck") {
  std::mt19937_64 rng(61);
  long B = 2, n = 3, d = 4;
  D x = random_tensor({B, n, d}, rng);
  D w = random_tensor({n, d, d}, rng);
  D y = per_token_linear(x, w);
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < n; ++i) {
      std::vector<double> xr(x.data().begin() + (b * n + i) * d, x.data().begin() + (b * n + i + 1) * d);
      std::vector<double> wi(w.data().begin() + i * d * d, w.data().begin() + (i + 1) * d * d);
      auto ref = oracle::matmul_ref(xr, wi, 1, d, d);
      for (long j = 0; j < d; ++j) CHECK(y.data()[(b * n + i) * d + j] == doctest::Approx(ref[j]));
    }
  double worst = check_gradients({x, w}, [](const std::vector<D>& l) {
    D y2 = per_token_linear(l[0], l[1]);
    return mean_all(mul(y2, y2));
  }, 8);
  CHECK(worst < 1e-4);
}

TEST_CASE("bce closed forms and gradient") {
  D q = D::scalar(0.5);
  CHECK(bce_loss(q, 0).item() == doctest::Approx(std::log(2.0)));
  CHECK(bce_loss(q, 1).item() == doctest::Approx(std::log(2.0)));

  D good = D::scalar(1.0 - 1e-7);
  CHECK(bce_loss(good, 1).item() == doctest::Approx(0.0).epsilon(1e-5));

  D q9 = D::scalar(0.9);
  CHECK(bce_loss(q9, 1).item() == doctest::Approx(0.10536051565782628).epsilon(1e-9));

  // loss is non-negative
  std::mt19937_64 rng(67);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    double p = u(rng);
    CHECK(bce_loss(D::scalar(p), static_cast<int>(rng() % 2)).item() >= 0.0);
  }

  double w = check_gradients({D::scalar(0.3)}, [](const std::vector<D>& l) { return bce_loss(l[0], 1); });
  CHECK(w < 1e-4);
}

TEST_CASE("forward passes are deterministic") {
  std::mt19937_64 rng(71);
  D a = random_tensor({3, 4}, rng);
  D b = random_tensor({4, 3}, rng);
  D r1 = softmax(matmul(a, b), -1);
  D r2 = softmax(matmul(a, b), -1);
  for (long i = 0; i < r1.numel(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
}

TEST_CASE("no-grad mode builds no graph") {
  D a = D::scalar(2.0);
  a.set_requires_grad(true);
  NoGradGuard ng;
  D y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}
