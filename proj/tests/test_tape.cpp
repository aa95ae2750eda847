#include "langroute/tape.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "langroute/errors.hpp"

using namespace langroute;

namespace {

// Max absolute difference between analytic and central-difference gradients.
// build must run forward and backward on the given tape and return the loss.
double grad_check(const std::function<double(Tape&, NodeId)>& build, const Tensor& x,
                  double eps = 1e-6) {
  Tape t;
  NodeId xid = t.leaf(x);
  build(t, xid);
  const Tensor& analytic = t.grad(xid);
  Tensor numeric = finite_diff_grad(
      [&](const Tensor& probe) {
        Tape t2;
        return build(t2, t2.leaf(probe));
      },
      x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.data.size(); ++i) {
    worst = std::max(worst, std::abs(analytic.data[i] - numeric.data[i]));
  }
  return worst;
}

Tensor random_tensor(std::vector<std::int64_t> shape, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
  Tape t;
  NodeId a = t.leaf(Tensor::from({1, 2}, {1.0, 2.0}));
  NodeId b = t.leaf(Tensor::from({2, 1}, {3.0, 4.0}));
  NodeId c = t.matmul(a, b);
  CHECK(t.value(c).shape == std::vector<std::int64_t>{1, 1});
  CHECK(t.value(c).data[0] == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul with identity returns input exactly") {
  Tensor x = random_tensor({3, 3}, 7);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
  Tape t;
  NodeId c = t.matmul(t.leaf(x), t.leaf(eye));
  for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(t.value(c).data[i] == x.data[i]);
}

TEST_CASE("quadratic loss has gradient 2x") {
  // L = sum(x*x) at x=3 gives dL/dx = 6
  Tape t;
  NodeId x = t.leaf(Tensor::scalar(3.0));
  NodeId l = t.sum(t.mul(x, x));
  t.backward(l);
  CHECK(t.value(l).data[0] == doctest::Approx(9.0));
  CHECK(t.grad(x).data[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("uniform logits give ln(V) cross entropy") {
  Tape t;
  NodeId logits = t.leaf(Tensor::zeros({1, 4}));
  NodeId l = t.softmax_cross_entropy(logits, {2}, {1});
  CHECK(t.value(l).data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("relu uses subgradient zero at zero") {
  Tape t;
  NodeId x = t.leaf(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  NodeId l = t.sum(t.relu(x));
  t.backward(l);
  CHECK(t.grad(x).data[0] == 0.0);
  CHECK(t.grad(x).data[1] == 0.0);
  CHECK(t.grad(x).data[2] == 1.0);
}

TEST_CASE("causal masked softmax rows sum to one and upper triangle is zero") {
  Tensor s = random_tensor({2, 5, 5}, 11, 2.0);
  Tape t;
  NodeId y = t.causal_masked_softmax(t.leaf(s));
  const Tensor& v = t.value(y);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 5; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < 5; ++j) {
        const double p = v.data[static_cast<std::size_t>((b * 5 + i) * 5 + j)];
        if (j > i) CHECK(p == 0.0);
        row_sum += p;
      }
      CHECK(std::abs(row_sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("gradients match central differences per op") {
  const double tol = 1e-7;

  SUBCASE("matmul") {
    Tensor x = random_tensor({3, 4}, 1);
    Tensor w = random_tensor({4, 2}, 2);
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId l = t.sum(t.matmul(xid, t.leaf(w)));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
  }

  SUBCASE("batched matmul") {
    Tensor x = random_tensor({2, 3, 3, 4}, 3);
    Tensor w = random_tensor({2, 3, 4, 2}, 4);
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId l = t.sum(t.matmul(xid, t.leaf(w)));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
    // also check the right-hand operand
    double worst_w = grad_check(
        [&](Tape& t, NodeId wid) {
          NodeId l = t.sum(t.matmul(t.leaf(x), wid));
          t.backward(l);
          return t.value(l).data[0];
        },
        w);
    CHECK(worst_w < tol);
  }

  SUBCASE("add_bias") {
    Tensor b = random_tensor({5}, 5);
    Tensor x = random_tensor({4, 5}, 6);
    double worst = grad_check(
        [&](Tape& t, NodeId bid) {
          NodeId out = t.add_bias(t.leaf(x), bid);
          NodeId l = t.sum(t.mul(out, out));
          t.backward(l);
          return t.value(l).data[0];
        },
        b);
    CHECK(worst < tol);
  }

  SUBCASE("relu away from the kink") {
    Tensor x = random_tensor({6}, 8);
    for (double& v : x.data) {
      if (std::abs(v) < 1e-3) v += 0.5;  // keep finite differences off the kink
    }
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId l = t.sum(t.mul(t.relu(xid), t.relu(xid)));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
  }

  SUBCASE("scale_columns") {
    Tensor x = random_tensor({3, 4}, 9);
    std::vector<double> f = {0.0, 1.0, -2.0, 0.5};
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId out = t.scale_columns(xid, f);
          NodeId l = t.sum(t.mul(out, out));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
  }

  SUBCASE("permute and reshape") {
    Tensor x = random_tensor({2, 3, 4}, 10);
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId p = t.permute(xid, {2, 0, 1});
          NodeId r = t.reshape(p, {4, 6});
          NodeId l = t.sum(t.mul(r, r));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
  }

  SUBCASE("causal masked softmax") {
    Tensor s = random_tensor({1, 4, 4}, 12);
    Tensor w = random_tensor({1, 4, 4}, 13);
    double worst = grad_check(
        [&](Tape& t, NodeId sid) {
          NodeId y = t.causal_masked_softmax(sid);
          NodeId l = t.sum(t.mul(y, t.leaf(w)));
          t.backward(l);
          return t.value(l).data[0];
        },
        s);
    CHECK(worst < tol);
  }

  SUBCASE("layer_norm") {
    Tensor x = random_tensor({3, 6}, 14);
    Tensor gamma = random_tensor({6}, 15);
    Tensor beta = random_tensor({6}, 16);
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId y = t.layer_norm(xid, t.leaf(gamma), t.leaf(beta));
          NodeId l = t.sum(t.mul(y, y));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
    double worst_g = grad_check(
        [&](Tape& t, NodeId gid) {
          NodeId y = t.layer_norm(t.leaf(x), gid, t.leaf(beta));
          NodeId l = t.sum(t.mul(y, y));
          t.backward(l);
          return t.value(l).data[0];
        },
        gamma);
    CHECK(worst_g < tol);
  }

  SUBCASE("gather_rows") {
    Tensor x = random_tensor({5, 3}, 17);
    double worst = grad_check(
        [&](Tape& t, NodeId xid) {
          NodeId y = t.gather_rows(xid, {4, 0, 0, 2});
          NodeId l = t.sum(t.mul(y, y));
          t.backward(l);
          return t.value(l).data[0];
        },
        x);
    CHECK(worst < tol);
  }

  SUBCASE("softmax cross entropy with mask") {
    Tensor logits = random_tensor({4, 6}, 18);
    double worst = grad_check(
        [&](Tape& t, NodeId lid) {
          NodeId l = t.softmax_cross_entropy(lid, {1, 3, 0, 5}, {1, 0, 1, 1});
          t.backward(l);
          return t.value(l).data[0];
        },
        logits);
    CHECK(worst < tol);
  }
}

TEST_CASE("backward is bit-identical across repeated runs") {
  Tensor x = random_tensor({4, 8}, 21);
  Tensor w1 = random_tensor({8, 16}, 22);
  Tensor w2 = random_tensor({16, 8}, 23);
  auto run = [&]() {
    Tape t;
    NodeId xid = t.leaf(x);
    NodeId h = t.relu(t.matmul(xid, t.leaf(w1)));
    NodeId y = t.matmul(h, t.leaf(w2));
    NodeId l = t.sum(t.mul(y, y));
    t.backward(l);
    return t.grad(xid).data;
  };
  std::vector<double> g1 = run();
  std::vector<double> g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("shape mismatches raise contract errors") {
  Tape t;
  NodeId a = t.leaf(Tensor::zeros({2, 3}));
  NodeId b = t.leaf(Tensor::zeros({4, 2}));
  CHECK_THROWS_AS(t.matmul(a, b), ContractError);
  CHECK_THROWS_AS(t.add(a, b), ContractError);
  CHECK_THROWS_AS(t.backward(a), ContractError);  // loss must be scalar
}

TEST_CASE("non-finite values raise numeric errors") {
  Tape t;
  CHECK_THROWS_AS(t.leaf(Tensor::from({1}, {std::nan("")})), NumericError);
  NodeId big = t.leaf(Tensor::from({1}, {1e308}));
  CHECK_THROWS_AS(t.mul(big, big), NumericError);  // overflow to inf
}

TEST_CASE("fully masked cross entropy is a data error") {
  Tape t;
  NodeId logits = t.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(t.softmax_cross_entropy(logits, {0, 1}, {0, 0}), DataError);
}

TEST_CASE("cross entropy rejects out-of-range targets") {
  Tape t;
  NodeId logits = t.leaf(Tensor::zeros({1, 3}));
  CHECK_THROWS_AS(t.softmax_cross_entropy(logits, {3}, {1}), ContractError);
}

TEST_CASE("grad before backward is a contract error") {
  Tape t;
  NodeId x = t.leaf(Tensor::scalar(1.0));
  CHECK_THROWS_AS(t.grad(x), ContractError);
}
