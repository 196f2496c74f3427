#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/errors.hpp"

namespace d3lmpc {

namespace detail {

struct SvdSplit {
  Eigen::MatrixXd pinv;      // cols x rows
  Eigen::MatrixXd null_basis;  // cols x (cols - rank), orthonormal
  int rank = 0;
  double cond = 1.0;
};

// Pseudo-inverse and orthonormal null-space basis from a full SVD.
inline SvdSplit svd_split(const Eigen::MatrixXd& m, double rel_tol) {
  SvdSplit s;
  const Eigen::Index cols = m.cols();
  if (m.rows() == 0 || cols == 0) {
    s.pinv = Eigen::MatrixXd::Zero(cols, m.rows());
    s.null_basis = Eigen::MatrixXd::Identity(cols, cols);
    return s;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double cut = sv(0) > 0 ? rel_tol * sv(0) : 0.0;
  int r = 0;
  while (r < sv.size() && sv(r) > cut && sv(r) > 0) ++r;
  s.rank = r;
  s.cond = r > 0 ? sv(0) / sv(r - 1) : 1.0;
  const Eigen::MatrixXd& u = svd.matrixU();
  const Eigen::MatrixXd& v = svd.matrixV();
  s.pinv = v.leftCols(r) * sv.head(r).cwiseInverse().asDiagonal() * u.leftCols(r).transpose();
  s.null_basis = v.rightCols(cols - r);
  return s;
}

}  // namespace detail

/// min ||C x - d||^2  s.t.  A_eq x = b_eq
struct EqLsProblem {
  Eigen::MatrixXd c;
  Eigen::MatrixXd d;  // one column per right-hand side
  Eigen::MatrixXd a_eq;
  Eigen::MatrixXd b_eq;
};

struct EqLsResult {
  Eigen::MatrixXd x;
  Eigen::MatrixXd multipliers;
  double equality_residual = 0.0;
  double stationarity = 0.0;
  double condition = 1.0;
  std::optional<std::string> warning;
};

/// Factorization of an equality-constrained least-squares problem that can be
/// reused across right-hand sides. Minimizers are split as x = x_p + Z w with
/// x_p the minimum-norm solution of A_eq x = b and Z an orthonormal null-space
/// basis, so the overall solution is the minimum-norm minimizer.
class EqLsFactor {
 public:
  static constexpr double kDefaultRankTol = 1e-10;
  static constexpr double kFeasTol = 1e-8;

  EqLsFactor() = default;

  EqLsFactor(const Eigen::MatrixXd& c, const Eigen::MatrixXd& a_eq, double rel_tol = kDefaultRankTol)
      : c_(c), a_(a_eq) {
    if (a_eq.rows() > 0 && a_eq.cols() != c.cols())
      throw ArgumentError("solve_eq_ls: C and A_eq column counts differ");
    const Eigen::Index k = c.cols();
    if (a_eq.rows() > 0) {
      auto split = detail::svd_split(a_eq, rel_tol);
      pinv_a_ = std::move(split.pinv);
      z_ = std::move(split.null_basis);
      cond_ = split.cond;
    } else {
      pinv_a_ = Eigen::MatrixXd::Zero(k, 0);
      z_ = Eigen::MatrixXd::Identity(k, k);
    }
    if (z_.cols() > 0 && c.rows() > 0) {
      cz_ = c * z_;
      auto split = detail::svd_split(cz_, rel_tol);
      pinv_cz_ = std::move(split.pinv);
      cond_ = std::max(cond_, split.cond);
    } else {
      cz_ = Eigen::MatrixXd::Zero(c.rows(), z_.cols());
      pinv_cz_ = Eigen::MatrixXd::Zero(z_.cols(), c.rows());
    }
  }

  int unknowns() const { return static_cast<int>(c_.cols()); }
  int nullity() const { return static_cast<int>(z_.cols()); }
  double condition() const { return cond_; }
  const Eigen::MatrixXd& null_basis() const { return z_; }

  /// Minimum-norm solution of A_eq x = b; throws InfeasibleError when the
  /// equalities are inconsistent.
  Eigen::MatrixXd particular(const Eigen::MatrixXd& b) const {
    if (b.rows() != a_.rows()) throw ArgumentError("solve_eq_ls: b_eq row count mismatch");
    Eigen::MatrixXd xp = pinv_a_ * b;
    if (a_.rows() > 0) {
      const double res = (a_ * xp - b).norm();
      if (res > kFeasTol * (1.0 + b.norm())) {
        std::ostringstream os;
        os << "solve_eq_ls: inconsistent equality constraints (residual " << res << ")";
        throw InfeasibleError(os.str());
      }
    }
    return xp;
  }

  /// Linear map d -> x for fixed b: x = offset + gain * d.
  Eigen::MatrixXd gain() const { return z_ * pinv_cz_; }
  Eigen::MatrixXd offset(const Eigen::MatrixXd& xp) const { return xp - gain() * (c_ * xp); }

  EqLsResult solve(const Eigen::MatrixXd& d, const Eigen::MatrixXd& b) const {
    if (d.rows() != c_.rows()) throw ArgumentError("solve_eq_ls: d row count mismatch");
    if (a_.rows() > 0 && b.cols() != d.cols()) throw ArgumentError("solve_eq_ls: rhs column counts differ");
    EqLsResult res;
    Eigen::MatrixXd xp = a_.rows() > 0 ? particular(b) : Eigen::MatrixXd::Zero(c_.cols(), d.cols());
    res.x = xp + z_ * (pinv_cz_ * (d - c_ * xp));
    Eigen::MatrixXd grad = c_.transpose() * (c_ * res.x - d);
    res.multipliers = a_.rows() > 0 ? Eigen::MatrixXd(-pinv_a_.transpose() * grad)
                                    : Eigen::MatrixXd::Zero(0, d.cols());
    Eigen::MatrixXd stat = grad;
    if (a_.rows() > 0) {
      stat += a_.transpose() * res.multipliers;
      res.equality_residual = (a_ * res.x - b).norm();
    }
    res.stationarity = stat.norm();
    res.condition = cond_;
    if (cond_ > 1e12) {
      std::ostringstream os;
      os << "ill-conditioned problem (condition estimate " << cond_ << ")";
      res.warning = os.str();
    }
    return res;
  }

 private:
  Eigen::MatrixXd c_, a_;
  Eigen::MatrixXd pinv_a_, z_, cz_, pinv_cz_;
  double cond_ = 1.0;
};

inline EqLsResult solve_eq_ls(const EqLsProblem& p) {
  EqLsFactor f(p.c, p.a_eq);
  Eigen::MatrixXd b = p.a_eq.rows() > 0 ? p.b_eq : Eigen::MatrixXd::Zero(0, p.d.cols());
  return f.solve(p.d, b);
}

/// min 1/2 x'Px + q'x  s.t.  lo <= x <= hi (per coordinate, optional),
/// A_eq x = b_eq (optional). P must be PD on the null space of A_eq.
struct BoxQpProblem {
  Eigen::MatrixXd p;
  Eigen::VectorXd q;
  std::optional<Eigen::VectorXd> lo;
  std::optional<Eigen::VectorXd> hi;
  Eigen::MatrixXd a_eq;
  Eigen::VectorXd b_eq;
};

struct QpSettings {
  double rho = 1.0;
  double alpha = 1.6;
  double sigma = 1e-6;
  double tol = 1e-9;
  int max_iter = 20000;
  int polish_every = 25;
};

struct QpResult {
  Eigen::VectorXd x;
  Eigen::VectorXd multipliers;  // stacked [equalities; bounded coordinates]
  int iterations = 0;
  bool polished = false;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
};

namespace detail {

// Equality-constrained QP by null-space elimination; nullopt if the reduced
// Hessian is not positive definite or the equalities are inconsistent.
inline std::optional<Eigen::VectorXd> eq_qp(const Eigen::MatrixXd& p, const Eigen::VectorXd& q,
                                            const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  const Eigen::Index n = p.rows();
  Eigen::VectorXd xp = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd z = Eigen::MatrixXd::Identity(n, n);
  if (a.rows() > 0) {
    auto split = svd_split(a, 1e-12);
    xp = split.pinv * b;
    if ((a * xp - b).norm() > 1e-9 * (1.0 + b.norm())) return std::nullopt;
    z = split.null_basis;
  }
  if (z.cols() == 0) return xp;
  Eigen::MatrixXd h = z.transpose() * p * z;
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) return std::nullopt;
  Eigen::VectorXd w = llt.solve(-z.transpose() * (p * xp + q));
  return Eigen::VectorXd(xp + z * w);
}

}  // namespace detail

/// Operator-splitting QP solver (ADMM on l <= Ax <= u with over-relaxation)
/// followed by active-set polishing. Returns when the KKT residual is below
/// tol; throws SolverError at the iteration cap.
inline QpResult solve_box_qp(const BoxQpProblem& prob, const QpSettings& s = {}) {
  const Eigen::Index n = prob.p.rows();
  if (prob.p.cols() != n || prob.q.size() != n) throw ArgumentError("solve_box_qp: P/q dimension mismatch");
  if (prob.a_eq.rows() > 0 && (prob.a_eq.cols() != n || prob.b_eq.size() != prob.a_eq.rows()))
    throw ArgumentError("solve_box_qp: equality dimension mismatch");
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::VectorXd lo = prob.lo.value_or(Eigen::VectorXd::Constant(n, -inf));
  Eigen::VectorXd hi = prob.hi.value_or(Eigen::VectorXd::Constant(n, inf));
  if (lo.size() != n || hi.size() != n) throw ArgumentError("solve_box_qp: bound dimension mismatch");
  for (Eigen::Index k = 0; k < n; ++k)
    if (lo(k) > hi(k)) throw ArgumentError("solve_box_qp: lo > hi");

  // Constraint rows: equalities, then one identity row per bounded coordinate.
  std::vector<Eigen::Index> bounded;
  for (Eigen::Index k = 0; k < n; ++k)
    if (std::isfinite(lo(k)) || std::isfinite(hi(k))) bounded.push_back(k);
  const Eigen::Index neq = prob.a_eq.rows(), nb = static_cast<Eigen::Index>(bounded.size()), m = neq + nb;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, n);
  Eigen::VectorXd l(m), u(m), rho(m);
  if (neq > 0) {
    a.topRows(neq) = prob.a_eq;
    l.head(neq) = prob.b_eq;
    u.head(neq) = prob.b_eq;
    rho.head(neq).setConstant(1e3 * s.rho);
  }
  for (Eigen::Index k = 0; k < nb; ++k) {
    a(neq + k, bounded[k]) = 1.0;
    l(neq + k) = lo(bounded[k]);
    u(neq + k) = hi(bounded[k]);
    rho(neq + k) = s.rho;
  }

  auto kkt_residuals = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& y, double& prim, double& dual) {
    Eigen::VectorXd ax = a * x;
    prim = 0.0;
    for (Eigen::Index r = 0; r < m; ++r) prim = std::max(prim, std::max(l(r) - ax(r), ax(r) - u(r)));
    dual = m > 0 ? (prob.p * x + prob.q + a.transpose() * y).lpNorm<Eigen::Infinity>()
                 : (prob.p * x + prob.q).lpNorm<Eigen::Infinity>();
  };

  // Accepts a candidate active set if the resulting point is primal feasible,
  // stationary and sign-consistent.
  auto try_polish = [&](const Eigen::VectorXd& z, const Eigen::VectorXd& y, QpResult& out) -> bool {
    std::vector<Eigen::Index> rows;
    std::vector<double> vals;
    for (Eigen::Index r = 0; r < m; ++r) {
      if (r < neq) {
        rows.push_back(r);
        vals.push_back(l(r));
      } else if (z(r) - l(r) < -y(r)) {
        rows.push_back(r);
        vals.push_back(l(r));
      } else if (u(r) - z(r) < y(r)) {
        rows.push_back(r);
        vals.push_back(u(r));
      }
    }
    Eigen::MatrixXd aa(rows.size(), n);
    Eigen::VectorXd bb(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      aa.row(k) = a.row(rows[k]);
      bb(k) = vals[k];
    }
    auto x = detail::eq_qp(prob.p, prob.q, aa, bb);
    if (!x) return false;
    Eigen::VectorXd ya = Eigen::VectorXd::Zero(m);
    if (!rows.empty()) {
      Eigen::VectorXd g = -(prob.p * *x + prob.q);
      Eigen::VectorXd lam = aa.transpose().completeOrthogonalDecomposition().solve(g);
      for (std::size_t k = 0; k < rows.size(); ++k) ya(rows[k]) = lam(k);
    }
    for (Eigen::Index r = neq; r < m; ++r) {
      const double ax = a.row(r).dot(*x);
      if (ax < l(r) - s.tol || ax > u(r) + s.tol) return false;
      if (ya(r) < -s.tol && std::abs(ax - l(r)) > s.tol) return false;
      if (ya(r) > s.tol && std::abs(ax - u(r)) > s.tol) return false;
    }
    double prim, dual;
    kkt_residuals(*x, ya, prim, dual);
    if (prim > s.tol || dual > s.tol * (1.0 + prob.q.lpNorm<Eigen::Infinity>())) return false;
    out.x = *x;
    out.multipliers = ya;
    out.polished = true;
    out.primal_residual = prim;
    out.dual_residual = dual;
    return true;
  };

  QpResult res;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n), z = Eigen::VectorXd::Zero(m), y = Eigen::VectorXd::Zero(m);
  for (Eigen::Index r = 0; r < m; ++r) z(r) = std::clamp(0.0, l(r), u(r));
  if (try_polish(z, y, res)) return res;

  Eigen::MatrixXd kkt = prob.p + s.sigma * Eigen::MatrixXd::Identity(n, n) + a.transpose() * rho.asDiagonal() * a;
  Eigen::LLT<Eigen::MatrixXd> llt(kkt);
  if (llt.info() != Eigen::Success) throw ArgumentError("solve_box_qp: P is not positive semidefinite");

  double prim = 0.0, dual = 0.0;
  for (int it = 1; it <= s.max_iter; ++it) {
    Eigen::VectorXd rhs = s.sigma * x - prob.q + a.transpose() * (rho.cwiseProduct(z) - y);
    Eigen::VectorXd xt = llt.solve(rhs);
    Eigen::VectorXd zt = a * xt;
    x = s.alpha * xt + (1.0 - s.alpha) * x;
    Eigen::VectorXd zr = s.alpha * zt + (1.0 - s.alpha) * z;
    Eigen::VectorXd zn = (zr + y.cwiseQuotient(rho)).cwiseMax(l).cwiseMin(u);
    y += rho.cwiseProduct(zr - zn);
    z = zn;
    kkt_residuals(x, y, prim, dual);
    res.iterations = it;
    if (it % s.polish_every == 0 && try_polish(z, y, res)) {
      res.iterations = it;
      return res;
    }
    if (prim <= s.tol && dual <= s.tol) {
      res.x = x;
      res.multipliers = y;
      res.primal_residual = prim;
      res.dual_residual = dual;
      return res;
    }
  }
  std::ostringstream os;
  os << "solve_box_qp: no convergence after " << s.max_iter << " iterations (primal " << prim << ", dual " << dual
     << ")";
  throw SolverError(os.str());
}

/// argmin_phi  q_w (phi'a)^2 + rho/2 ||phi - v||^2, by Sherman-Morrison.
inline Eigen::VectorXd rank1_prox(double q_w, const Eigen::VectorXd& a, const Eigen::VectorXd& v, double rho) {
  if (!(rho > 0)) throw ArgumentError("rank1_prox: rho must be positive");
  if (a.size() != v.size()) throw ArgumentError("rank1_prox: dimension mismatch");
  const double denom = rho + 2.0 * q_w * a.squaredNorm();
  return v - (2.0 * q_w * a.dot(v) / denom) * a;
}

}  // namespace d3lmpc
