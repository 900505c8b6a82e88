#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <random>

#include "discn/ops.hpp"
#include "oracles.hpp"

using namespace discn;
using D = Tensor<double>;

namespace {

D random_image(long C, long H, long W, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> v(static_cast<size_t>(C * H * W));
  for (auto& x : v) x = dist(rng);
  return D::from_data({C, H, W}, std::move(v));
}

}  // namespace

TEST_CASE("unfold quadrants of a 4x4 with k=2,p=0,s=2") {
  std::vector<double> img(16);
  for (int i = 0; i < 16; ++i) img[i] = i;
  D x = D::from_data({1, 4, 4}, img);
  D t = unfold(x, 2, 0, 2);
  CHECK(t.shape() == Shape{4, 4});
  // token 0: rows 0-1, cols 0-1
  CHECK(t.data()[0] == 0);
  CHECK(t.data()[1] == 1);
  CHECK(t.data()[2] == 4);
  CHECK(t.data()[3] == 5);
  // token 3: rows 2-3, cols 2-3
  CHECK(t.data()[12] == 10);
  CHECK(t.data()[13] == 11);
  CHECK(t.data()[14] == 14);
  CHECK(t.data()[15] == 15);
}

TEST_CASE("unfold k=1 is identity tokenization") {
  std::mt19937_64 rng(5);
  D x = random_image(2, 3, 4, rng);
  D t = unfold(x, 1, 0, 1);
  CHECK(t.shape() == Shape{12, 2});
  for (long i = 0; i < 12; ++i)
    for (long c = 0; c < 2; ++c) CHECK(t.data()[i * 2 + c] == x.data()[c * 12 + i]);
}

TEST_CASE("per-axis token count follows the floored rule") {
  CHECK(axis_windows(56, 3, 1, 2) == 28);
  CHECK(axis_windows(4, 2, 0, 2) == 2);
  CHECK(axis_windows(8, 3, 1, 2) == 4);
  CHECK(axis_windows(7, 3, 1, 2) == 4);
}

TEST_CASE("unfold matches brute-force enumeration over a parameter grid") {
  std::mt19937_64 rng(9);
  int combos = 0;
  for (long H : {4L, 5L, 7L, 8L}) {
    for (long k : {1L, 2L, 3L}) {
      for (long p : {0L, 1L}) {
        for (long s : {1L, 2L}) {
          if (H + 2 * p < k) continue;
          long W = H + 1;  // non-square
          D x = random_image(2, H, W, rng);
          auto ref = oracle::unfold_ref(x.data(), 2, H, W, k, p, s);
          D t = unfold(x, k, p, s);
          REQUIRE(t.shape()[0] == static_cast<long>(ref.size()));
          REQUIRE(t.shape()[1] == 2 * k * k);
          for (size_t i = 0; i < ref.size(); ++i)
            for (size_t j = 0; j < ref[i].values.size(); ++j)
              CHECK(t.data()[i * ref[i].values.size() + j] == doctest::Approx(ref[i].values[j]));
          ++combos;
        }
      }
    }
  }
  CHECK(combos >= 20);
}

TEST_CASE("fold inverts unfold exactly for disjoint windows") {
  std::mt19937_64 rng(13);
  D x = random_image(3, 6, 6, rng);
  D t = unfold(x, 2, 0, 2);
  D back = fold(t, 2, 0, 2, 3, 6, 6);
  for (long i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("fold inverts unfold within 1e-6 for overlapping windows") {
  std::mt19937_64 rng(17);
  for (auto [k, p, s] : std::vector<std::array<long, 3>>{{3, 1, 2}, {3, 1, 1}, {2, 1, 1}, {4, 1, 2}}) {
    for (long H : {7L, 8L}) {
      auto counts = oracle::coverage_ref(H, H, k, p, s);
      bool covered = true;
      for (int c : counts) covered &= c > 0;
      if (!covered) continue;
      D x = random_image(2, H, H, rng);
      D back = fold(unfold(x, k, p, s), k, p, s, 2, H, H);
      for (long i = 0; i < x.numel(); ++i) CHECK(std::fabs(back.data()[i] - x.data()[i]) < 1e-6);
    }
  }
}

TEST_CASE("fold of all-zero tokens is an all-zero image") {
  D t = D::zeros({9, 4});
  D img = fold(t, 2, 1, 1, 1, 2, 2);
  for (double v : img.data()) CHECK(v == 0.0);
}

TEST_CASE("fold counts match enumeration oracle") {
  for (auto [k, p, s] : std::vector<std::array<long, 3>>{{3, 1, 2}, {2, 0, 2}, {3, 0, 1}, {2, 1, 1}}) {
    for (long H : {5L, 8L}) {
      auto lib = fold_counts(H, H, k, p, s);
      auto ref = oracle::coverage_ref(H, H, k, p, s);
      REQUIRE(lib.size() == ref.size());
      for (size_t i = 0; i < lib.size(); ++i) CHECK(lib[i] == ref[i]);
    }
  }
}

TEST_CASE("fold rejects inconsistent token counts") {
  D t = D::zeros({5, 4});
  CHECK_THROWS_AS(fold(t, 2, 0, 2, 1, 4, 4), DimensionError);
  D bad_dim = D::zeros({4, 5});
  CHECK_THROWS_AS(fold(bad_dim, 2, 0, 2, 1, 4, 4), DimensionError);
}

TEST_CASE("unfold refuses windows larger than the padded image") {
  D x = D::zeros({1, 3, 3});
  CHECK_THROWS_AS(unfold(x, 5, 0, 1), DimensionError);
  CHECK(unfold(x, 5, 1, 1).shape()[0] == 1);  // padding makes it fit
}

TEST_CASE("unfold/fold are differentiable and pass gradcheck") {
  std::mt19937_64 rng(23);
  D x = random_image(2, 6, 6, rng);
  x.set_requires_grad(true);
  D t = unfold(x, 3, 1, 2);
  D y = fold(t, 3, 1, 2, 2, 6, 6);
  D loss = mean_all(mul(y, y));
  loss.backward();
  auto analytic = x.grad();
  auto loss_fn = [&]() {
    D t2 = unfold(x, 3, 1, 2);
    return mean_all(mul(fold(t2, 3, 1, 2, 2, 6, 6), fold(t2, 3, 1, 2, 2, 6, 6))).item();
  };
  double worst = oracle::max_grad_rel_err(x, loss_fn, analytic, 10, rng);
  CHECK(worst < 1e-4);
}

TEST_CASE("batched unfold keeps the batch axis intact") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> v(2 * 1 * 4 * 4);
  for (auto& x : v) x = dist(rng);
  D imgs = D::from_data({2, 1, 4, 4}, v);
  D t = unfold(imgs, 2, 0, 2);
  CHECK(t.shape() == Shape{2, 4, 4});
  for (long b = 0; b < 2; ++b) {
    std::vector<double> one(v.begin() + b * 16, v.begin() + (b + 1) * 16);
    auto ref = oracle::unfold_ref(one, 1, 4, 4, 2, 0, 2);
    for (size_t i = 0; i < ref.size(); ++i)
      for (size_t j = 0; j < 4; ++j) CHECK(t.data()[b * 16 + i * 4 + j] == doctest::Approx(ref[i].values[j]));
  }
}
