#include <gtest/gtest.h>

#include <limits>

#include "support.hpp"

using namespace d3lmpc;
using d3lmpc::testing::random_matrix;

TEST(EqLsTest, MinNormOnLine) {
  EqLsProblem p{Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 1), Eigen::MatrixXd::Ones(1, 2),
                Eigen::MatrixXd::Constant(1, 1, 2.0)};
  EqLsResult r = solve_eq_ls(p);
  EXPECT_NEAR(r.x(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(r.x(1, 0), 1.0, 1e-12);
}

TEST(EqLsTest, HandKkt) {
  Eigen::MatrixXd a(1, 2), d(2, 1);
  a << 1, -1;
  d << 3, 0;
  EqLsResult r = solve_eq_ls({Eigen::MatrixXd::Identity(2, 2), d, a, Eigen::MatrixXd::Zero(1, 1)});
  EXPECT_NEAR(r.x(0, 0), 1.5, 1e-12);
  EXPECT_NEAR(r.x(1, 0), 1.5, 1e-12);
  // grad = x - d = (-1.5, 1.5) = -a' lambda  =>  lambda = 1.5
  EXPECT_NEAR(r.multipliers(0, 0), 1.5, 1e-12);
}

TEST(EqLsTest, Unconstrained) {
  Eigen::MatrixXd d = random_matrix(4, 2, 3);
  EqLsResult r = solve_eq_ls({Eigen::MatrixXd::Identity(4, 4), d, Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 2)});
  EXPECT_LE((r.x - d).norm(), 1e-12);
}

TEST(EqLsTest, Infeasible) {
  Eigen::MatrixXd a(2, 2);
  a << 1, 1, 1, 1;
  Eigen::MatrixXd b(2, 1);
  b << 1, 2;
  EXPECT_THROW(solve_eq_ls({Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 1), a, b}), InfeasibleError);
}

TEST(EqLsTest, KktStationarityOnRandomInstances) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const int n = 12, mc = 7, me = 4;
    Eigen::MatrixXd c = random_matrix(mc, n, s), a = random_matrix(me, n, 100 + s);
    // Rank-deficient variants: duplicate a constraint row and a cost row.
    if (s % 2) {
      a.row(3) = a.row(0);
      c.row(6) = 2.0 * c.row(1);
    }
    Eigen::MatrixXd x_true = random_matrix(n, 3, 200 + s);
    Eigen::MatrixXd b = a * x_true, d = random_matrix(mc, 3, 300 + s);
    EqLsResult r = solve_eq_ls({c, d, a, b});
    const double scale = 1.0 + c.norm() * (c.norm() * r.x.norm() + d.norm());
    EXPECT_LE(r.stationarity, 1e-8 * scale);
    EXPECT_LE((c.transpose() * (c * r.x - d) + a.transpose() * r.multipliers).norm(), 1e-8 * scale);
    EXPECT_LE((a * r.x - b).norm(), 1e-9 * (1.0 + b.norm()));
    EXPECT_FALSE(r.warning.has_value());
  }
}

TEST(EqLsTest, MinimumNormTieBreak) {
  // Cost sees only x0; constraint pins x1 + x2 = 2; x3 is free and must be 0.
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(1, 4);
  c(0, 0) = 1.0;
  Eigen::MatrixXd a(1, 4);
  a << 0, 1, 1, 0;
  EqLsResult r = solve_eq_ls({c, Eigen::MatrixXd::Constant(1, 1, 3.0), a, Eigen::MatrixXd::Constant(1, 1, 2.0)});
  Eigen::Vector4d want(3, 1, 1, 0);
  EXPECT_LE((r.x.col(0) - want).norm(), 1e-12);
}

TEST(EqLsTest, Deterministic) {
  Eigen::MatrixXd c = random_matrix(6, 9, 1), a = random_matrix(3, 9, 2), d = random_matrix(6, 2, 3);
  Eigen::MatrixXd b = a * random_matrix(9, 2, 4);
  EqLsResult r1 = solve_eq_ls({c, d, a, b}), r2 = solve_eq_ls({c, d, a, b});
  EXPECT_EQ(r1.x, r2.x);
}

TEST(BoxQpTest, SeparableClip) {
  BoxQpProblem p{Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Constant(3, -2.0), Eigen::VectorXd::Zero(3),
                 Eigen::VectorXd::Ones(3), Eigen::MatrixXd(0, 3), Eigen::VectorXd(0)};
  QpResult r = solve_box_qp(p);
  EXPECT_LE((r.x - Eigen::VectorXd::Ones(3)).norm(), 1e-9);
}

TEST(BoxQpTest, NoBoundsMatchesEqLs) {
  Eigen::MatrixXd m = random_matrix(6, 6, 5);
  Eigen::MatrixXd p = m * m.transpose() + Eigen::MatrixXd::Identity(6, 6);
  Eigen::VectorXd q = random_matrix(6, 1, 6);
  Eigen::MatrixXd a = random_matrix(2, 6, 7);
  Eigen::VectorXd b = random_matrix(2, 1, 8);
  QpResult r = solve_box_qp({p, q, std::nullopt, std::nullopt, a, b});
  // Same problem as min ||L'x + L^{-1} q||^2 with P = L L'.
  Eigen::LLT<Eigen::MatrixXd> llt(p);
  Eigen::MatrixXd lt = llt.matrixU();
  Eigen::VectorXd target = -llt.matrixL().solve(q);
  EqLsResult ls = solve_eq_ls({lt, target, a, b});
  EXPECT_LE((r.x - ls.x.col(0)).norm(), 1e-8);
}

namespace {

// Brute force: every assignment of each coordinate to {free, lower, upper};
// keep the best primal-feasible stationary point with sign-correct multipliers.
Eigen::VectorXd enumerate_active_sets(const Eigen::MatrixXd& p, const Eigen::VectorXd& q, const Eigen::VectorXd& lo,
                                      const Eigen::VectorXd& hi) {
  const int n = static_cast<int>(q.size());
  int total = 1;
  for (int k = 0; k < n; ++k) total *= 3;
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x;
  for (int code = 0; code < total; ++code) {
    std::vector<int> state(n);
    for (int k = 0, c = code; k < n; ++k, c /= 3) state[k] = c % 3;
    std::vector<int> free_idx;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < n; ++k) {
      if (state[k] == 0) free_idx.push_back(k);
      if (state[k] == 1) x(k) = lo(k);
      if (state[k] == 2) x(k) = hi(k);
    }
    const int f = static_cast<int>(free_idx.size());
    if (f > 0) {
      Eigen::MatrixXd pff(f, f);
      Eigen::VectorXd rhs(f);
      for (int a = 0; a < f; ++a) {
        rhs(a) = -q(free_idx[a]);
        for (int k = 0; k < n; ++k)
          if (state[k] != 0) rhs(a) -= p(free_idx[a], k) * x(k);
        for (int b = 0; b < f; ++b) pff(a, b) = p(free_idx[a], free_idx[b]);
      }
      Eigen::VectorXd xf = pff.llt().solve(rhs);
      for (int a = 0; a < f; ++a) x(free_idx[a]) = xf(a);
    }
    bool ok = true;
    Eigen::VectorXd g = p * x + q;
    for (int k = 0; k < n && ok; ++k) {
      if (x(k) < lo(k) - 1e-12 || x(k) > hi(k) + 1e-12) ok = false;
      if (state[k] == 1 && g(k) < -1e-12) ok = false;
      if (state[k] == 2 && g(k) > 1e-12) ok = false;
    }
    if (!ok) continue;
    double val = 0.5 * x.dot(p * x) + q.dot(x);
    if (val < best) {
      best = val;
      best_x = x;
    }
  }
  return best_x;
}

}  // namespace

TEST(BoxQpTest, MatchesActiveSetEnumeration) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const int n = 10;
    Eigen::MatrixXd m = random_matrix(n, n, 10 + s);
    Eigen::MatrixXd p = m * m.transpose() / n + 0.5 * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd q = 2.0 * random_matrix(n, 1, 20 + s);
    Eigen::VectorXd lo = -0.5 * Eigen::VectorXd::Ones(n), hi = 0.7 * Eigen::VectorXd::Ones(n);
    QpResult r = solve_box_qp({p, q, lo, hi, Eigen::MatrixXd(0, n), Eigen::VectorXd(0)});
    Eigen::VectorXd oracle = enumerate_active_sets(p, q, lo, hi);
    ASSERT_EQ(oracle.size(), n);
    EXPECT_LE((r.x - oracle).cwiseAbs().maxCoeff(), 1e-6) << "seed " << s;
  }
}

TEST(BoxQpTest, BoxedWithEquality) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(3, 3);
  Eigen::VectorXd q(3);
  q << -3, 0, 0;
  Eigen::MatrixXd a = Eigen::MatrixXd::Ones(1, 3);
  Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 1.0);
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(3, 0.8);
  QpResult r = solve_box_qp({p, q, std::nullopt, hi, a, b});
  // x0 hits 0.8; the remaining 0.2 splits evenly.
  EXPECT_NEAR(r.x(0), 0.8, 1e-8);
  EXPECT_NEAR(r.x(1), 0.1, 1e-8);
  EXPECT_NEAR(r.x(2), 0.1, 1e-8);
}

TEST(BoxQpTest, IterationCap) {
  Eigen::MatrixXd m = random_matrix(8, 8, 1);
  QpSettings s;
  s.max_iter = 1;
  s.polish_every = 1000;
  BoxQpProblem p{m * m.transpose() + Eigen::MatrixXd::Identity(8, 8), random_matrix(8, 1, 2) * 5.0,
                 Eigen::VectorXd::Constant(8, -0.1), Eigen::VectorXd::Constant(8, 0.1), Eigen::MatrixXd(0, 8),
                 Eigen::VectorXd(0)};
  EXPECT_THROW(solve_box_qp(p, s), SolverError);
  BoxQpProblem bad = p;
  (*bad.lo)(0) = 1.0;
  EXPECT_THROW(solve_box_qp(bad), ArgumentError);
}

TEST(Rank1ProxTest, Examples) {
  Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
  EXPECT_NEAR(rank1_prox(1.0, one, one, 2.0)(0), 0.5, 1e-15);
  Eigen::VectorXd v = random_matrix(5, 1, 3), a = random_matrix(5, 1, 4);
  EXPECT_EQ(rank1_prox(0.0, a, v, 1.0), v);
  EXPECT_EQ(rank1_prox(3.0, Eigen::VectorXd::Zero(5), v, 1.0), v);
  EXPECT_THROW(rank1_prox(1.0, a, v, 0.0), ArgumentError);
}

TEST(Rank1ProxTest, MatchesQp) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const int n = 6;
    Eigen::VectorXd a = random_matrix(n, 1, s), v = random_matrix(n, 1, 50 + s);
    const double qw = 0.3 + s, rho = 0.5 + 0.25 * s;
    // q_w (phi'a)^2 + rho/2 ||phi - v||^2  =  1/2 phi'(2 q_w a a' + rho I) phi - rho v' phi + const
    Eigen::MatrixXd p = 2.0 * qw * a * a.transpose() + rho * Eigen::MatrixXd::Identity(n, n);
    QpResult r = solve_box_qp({p, -rho * v, std::nullopt, std::nullopt, Eigen::MatrixXd(0, n), Eigen::VectorXd(0)});
    EXPECT_LE((rank1_prox(qw, a, v, rho) - r.x).norm(), 1e-10);
  }
}
