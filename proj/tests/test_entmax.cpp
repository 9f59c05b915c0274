#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "miasrec/entmax.hpp"

using namespace miasrec;

namespace {

Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 2.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
  return z;
}

// Coarse-to-fine grid search for the Euclidean projection of a 3-vector onto
// the simplex: minimise ||p - z||^2 over p = (a, b, 1 - a - b) >= 0.
Eigen::Vector3d grid_projection(const Eigen::Vector3d& z) {
  double best_a = 1.0 / 3, best_b = 1.0 / 3;
  double radius = 0.5;
  auto objective = [&](double a, double b) {
    const Eigen::Vector3d p(a, b, 1.0 - a - b);
    return (p - z).squaredNorm();
  };
  for (int level = 0; level < 40; ++level) {
    double cand_a = best_a, cand_b = best_b, cand = objective(best_a, best_b);
    const int steps = 20;
    for (int i = -steps; i <= steps; ++i) {
      for (int j = -steps; j <= steps; ++j) {
        const double a = std::clamp(best_a + radius * i / steps, 0.0, 1.0);
        const double b = std::clamp(best_b + radius * j / steps, 0.0, 1.0 - a);
        const double v = objective(a, b);
        if (v < cand) {
          cand = v;
          cand_a = a;
          cand_b = b;
        }
      }
    }
    best_a = cand_a;
    best_b = cand_b;
    radius *= 0.5;
  }
  return {best_a, best_b, 1.0 - best_a - best_b};
}

// Tsallis-regularised objective maximised by alpha-entmax.
double entmax_objective(const Eigen::VectorXd& p, const Eigen::VectorXd& z, double alpha) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) h += p[j] - std::pow(p[j], alpha);
  return p.dot(z) + h / (alpha * (alpha - 1.0));
}

void check_simplex(const SparseDistribution<double>& p) {
  CHECK((p.probabilities.array() >= 0.0).all());
  CHECK(std::abs(p.probabilities.sum() - 1.0) <= 1e-6);
  REQUIRE(!p.support.empty());
  for (Eigen::Index j = 0; j < p.probabilities.size(); ++j) {
    const bool in_support = std::find(p.support.begin(), p.support.end(), j) != p.support.end();
    CHECK(in_support == (p.probabilities[j] > 0.0));
  }
}

}  // namespace

TEST_CASE("constant scores give the uniform distribution") {
  for (const double alpha : {1.0, 1.2, 1.5, 2.0, 3.0}) {
    const Eigen::VectorXd z = Eigen::VectorXd::Constant(7, 0.37);
    const auto p = entmax(z, alpha);
    CHECK((p.probabilities.array() - 1.0 / 7).abs().maxCoeff() <= 1e-9);
    CHECK(p.support.size() == 7);
  }
}

TEST_CASE("alpha 1.5 on (10, 0) selects the first entry exactly") {
  // (alpha - 1) z = (5, 0); with threshold 4 the mass is (5 - 4)^2 = 1.
  const auto p = entmax(Eigen::Vector2d(10.0, 0.0), 1.5);
  CHECK(std::abs(p.probabilities[0] - 1.0) <= 1e-9);
  CHECK(p.probabilities[1] == 0.0);
  CHECK(p.support == std::vector<Eigen::Index>{0});
}

TEST_CASE("alpha 2 on (0.6, 0.4) equals the simplex projection") {
  const Eigen::Vector2d z(0.6, 0.4);
  const auto p = entmax(z, 2.0);
  const Eigen::VectorXd q = simplex_projection_oracle(z);
  CHECK((p.probabilities - q).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(q[0] == doctest::Approx(0.6));
  CHECK(q[1] == doctest::Approx(0.4));
}

TEST_CASE("simplex projection of simplex points is the identity") {
  CHECK((simplex_projection_oracle(Eigen::Vector2d(1.0, 0.0)) - Eigen::Vector2d(1.0, 0.0)).norm() == 0.0);
  CHECK((simplex_projection_oracle(Eigen::Vector2d(0.5, 0.5)) - Eigen::Vector2d(0.5, 0.5)).norm() <= 1e-15);
}

TEST_CASE("simplex projection agrees with grid search") {
  const Eigen::Vector3d z(1.2, 0.8, -5.0);
  const Eigen::Vector3d grid = grid_projection(z);
  const Eigen::VectorXd q = simplex_projection_oracle(z);
  CHECK((q - grid).cwiseAbs().maxCoeff() <= 1e-6);
  // Frozen from the grid search above.
  CHECK(q[0] == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(q[1] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(q[2] == 0.0);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector3d r = random_vector(rng, 3, 1.0);
    CHECK((simplex_projection_oracle(r) - grid_projection(r)).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("entmax outputs are valid sparse distributions") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const double alpha = trial % 2 ? 1.5 : 1.0 + (trial % 7) * 0.25;
    check_simplex(entmax(random_vector(rng, 1 + trial % 12), alpha));
  }
}

TEST_CASE("entmax maximises the Tsallis objective") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd z = random_vector(rng, 6);
    const auto p = entmax(z, 1.5);
    const double best = entmax_objective(p.probabilities, z, 1.5);
    for (int k = 0; k < 50; ++k) {
      Eigen::VectorXd q(6);
      for (Eigen::Index j = 0; j < 6; ++j) q[j] = -std::log(unit(rng) + 1e-12);
      q /= q.sum();
      CHECK(entmax_objective(q, z, 1.5) <= best + 1e-9);
    }
  }
}

TEST_CASE("translation invariance and permutation equivariance") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::VectorXd z = random_vector(rng, 9);
    for (const double alpha : {1.0, 1.5, 2.0}) {
      const auto p = entmax(z, alpha);
      const Eigen::VectorXd shifted = z.array() + shift(rng);
      CHECK((entmax(shifted, alpha).probabilities - p.probabilities).cwiseAbs().maxCoeff() <= 1e-6);

      std::vector<int> perm(9);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Eigen::VectorXd zp(9), pp(9);
      for (int i = 0; i < 9; ++i) {
        zp[i] = z[perm[static_cast<std::size_t>(i)]];
        pp[i] = p.probabilities[perm[static_cast<std::size_t>(i)]];
      }
      CHECK((entmax(zp, alpha).probabilities - pp).cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("argmax is always in the support") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const Eigen::VectorXd z = random_vector(rng, 10, 5.0);
    Eigen::Index top = 0;
    z.maxCoeff(&top);
    const auto p = entmax(z, 1.0 + 0.01 * (trial % 200));
    CHECK(std::find(p.support.begin(), p.support.end(), top) != p.support.end());
  }
}

TEST_CASE("invalid inputs are rejected") {
  CHECK_THROWS(entmax(Eigen::VectorXd(0), 1.5));
  CHECK_THROWS(entmax(Eigen::Vector2d(1.0, std::nan("")), 1.5));
  CHECK_THROWS(entmax(Eigen::Vector2d(1.0, INFINITY), 1.5));
  CHECK_THROWS(entmax(Eigen::Vector2d(1.0, 2.0), 0.5));
}

TEST_CASE("float inputs are solved in double") {
  const Eigen::VectorXf z = Eigen::Vector3f(1.0f, 0.5f, -2.0f);
  const auto pf = entmax(z, 1.5);
  const auto pd = entmax(z.cast<double>().eval(), 1.5);
  CHECK((pf.probabilities.cast<double>() - pd.probabilities).cwiseAbs().maxCoeff() <= 1e-7);
}

TEST_CASE("entmax_grad: zero upstream and off-support coordinates") {
  const auto p = entmax(Eigen::Vector3d(10.0, 0.0, -1.0), 1.5);
  CHECK(entmax_grad(p, Eigen::Vector3d::Zero()).norm() == 0.0);
  const Eigen::VectorXd g = entmax_grad(p, Eigen::Vector3d(0.3, -2.0, 5.0));
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[0] == doctest::Approx(0.0));  // one-hot: the only direction is off the simplex
}

TEST_CASE("entmax_grad matches central finite differences") {
  std::mt19937_64 rng(6);
  const double h = 1e-4;
  const EntmaxOptions exact{200, 0.0};
  int checked = 0;
  for (int trial = 0; trial < 400 && checked < 100; ++trial) {
    const Eigen::VectorXd z = random_vector(rng, 6, 1.5);
    const Eigen::VectorXd up = random_vector(rng, 6, 1.0);
    for (const double alpha : {1.5, 1.0, 1.8}) {
      const auto p = entmax(z, alpha, exact);
      // Skip points where a perturbation changes the support or sits near its edge.
      bool stable = true;
      for (const auto j : p.support) stable = stable && p.probabilities[j] > 1e-3;
      Eigen::VectorXd fd(6);
      for (Eigen::Index j = 0; j < 6 && stable; ++j) {
        Eigen::VectorXd zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        const auto pp = entmax(zp, alpha, exact);
        const auto pm = entmax(zm, alpha, exact);
        stable = pp.support == p.support && pm.support == p.support;
        fd[j] = (up.dot(pp.probabilities) - up.dot(pm.probabilities)) / (2 * h);
      }
      if (!stable) continue;
      const Eigen::VectorXd g = entmax_grad(p, up);
      const double rel = (g - fd).norm() / std::max({g.norm(), fd.norm(), 1e-8});
      CHECK(rel <= 1e-4);
      if (alpha == 1.5) ++checked;
    }
  }
  CHECK(checked == 100);
}

TEST_CASE("alpha 1 agrees with softmax and alpha 2 with the simplex projection") {
  std::mt19937_64 rng(7);
  double worst_soft = 0.0, worst_proj = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::VectorXd z = random_vector(rng, 1 + trial % 20);
    const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp().matrix();
    worst_soft = std::max(worst_soft, (entmax(z, 1.0).probabilities - e / e.sum()).cwiseAbs().maxCoeff());
    worst_proj = std::max(worst_proj, (entmax(z, 2.0).probabilities - simplex_projection_oracle(z)).cwiseAbs().maxCoeff());
  }
  CHECK(worst_soft <= 1e-6);
  CHECK(worst_proj <= 1e-6);
}
