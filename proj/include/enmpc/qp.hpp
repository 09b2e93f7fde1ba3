// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_QP_HPP_
#define ENMPC_QP_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "enmpc/expr.hpp"

namespace enmpc {

enum class QpStatus { optimal, infeasible, nonconvex_detected, iteration_limit };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::nonconvex_detected: return "nonconvex_detected";
    case QpStatus::iteration_limit: return "iteration_limit";
  }
  return "?";
}

/// QP in reduced (equality-eliminated) variables:
///   min 1/2 y'P y + q'y   s.t.  G y >= h,
/// where the first n_eq rows of G are equalities (G y = h).
struct ReducedQp {
  Mat P;
  Vec q;
  Mat G;
  Vec h;
  int n_eq{0};
};

struct ReducedQpResult {
  QpStatus status{QpStatus::optimal};
  Vec y;
  Vec mult;                 // one per row of G; >= 0 on inequality rows
  std::vector<int> active;  // rows held at equality in the final working set
  int changes{0};           // working-set changes beyond a verified warm start
};

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Dual active-set method (Goldfarb-Idnani) for strictly convex reduced QPs.
/// Starts at the unconstrained minimizer, so no phase-1 is needed; an
/// optimal working-set hint is verified with a single factorization.
class DualActiveSet {
 public:
  DualActiveSet(const ReducedQp& qp, const Eigen::LLT<Mat>& llt) : qp_(qp), llt_(llt) {
    n_ = static_cast<int>(qp.P.rows());
    m_ = static_cast<int>(qp.G.rows());
  }

  ReducedQpResult solve(std::span<const int> hint) {
    ReducedQpResult res;
    y0_ = llt_.solve(-qp_.q);
    y_ = y0_;

    bool primed = !hint.empty() && prime_from(hint);
    if (!primed) {
      reset();
      for (int p = 0; p < qp_.n_eq; ++p) {
        if (!drive_equality(p, res)) return res;
      }
    }
    const int max_iter = 50 * (m_ + n_) + 1000;
    int iter = 0;
    while (true) {
      if (++iter > max_iter) {
        res.status = QpStatus::iteration_limit;
        return res;
      }
      int p = most_violated();
      if (p < 0) break;
      if (!drive_inequality(p, res)) return res;
    }
    finish(res);
    return res;
  }

 private:
  void reset() {
    W_.clear();
    u_.resize(0);
    Nmat_.resize(n_, 0);
    Bmat_.resize(n_, 0);
    Ls_.resize(0, 0);
    y_ = y0_;
    changes_ = 0;
  }

  int wsize() const { return static_cast<int>(W_.size()); }

  double slack(int row) const { return qp_.G.row(row).dot(y_) - qp_.h[row]; }

  // row-wise tolerance: mixed row scales (e.g. big-M boxes next to unit
  // cuts) must not inflate a shared threshold
  double row_tol(int row) const { return 1e-10 * (1.0 + std::abs(qp_.h[row])); }

  int most_violated() const {
    int best = -1;
    double worst = 0.0;
    for (int i = qp_.n_eq; i < m_; ++i) {
      if (in_working_set(i)) continue;
      double s = slack(i);
      if (s >= -row_tol(i)) continue;
      if (s < worst) {
        worst = s;
        best = i;
      }
    }
    return best;
  }

  bool in_working_set(int row) const {
    return std::find(W_.begin(), W_.end(), row) != W_.end();
  }

  // Appends row p to the working set; returns false if its normal is
  // (numerically) dependent on the current working set.
  bool append(int p, double mult) {
    Vec npv = qp_.G.row(p).transpose();
    Vec bp = llt_.solve(npv);
    const int k = wsize();
    Vec scol(k);
    if (k) scol = Nmat_.leftCols(k).transpose() * bp;
    const double spp = npv.dot(bp);
    Vec l(k);
    if (k) l = Ls_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solve(scol);
    const double rem = spp - (k ? l.squaredNorm() : 0.0);
    if (rem <= 1e-13 * std::max(spp, 1e-30)) return false;
    Nmat_.conservativeResize(Eigen::NoChange, k + 1);
    Bmat_.conservativeResize(Eigen::NoChange, k + 1);
    Nmat_.col(k) = npv;
    Bmat_.col(k) = bp;
    Ls_.conservativeResize(k + 1, k + 1);
    if (k) {
      Ls_.row(k).head(k) = l.transpose();
      Ls_.col(k).head(k).setZero();
    }
    Ls_(k, k) = std::sqrt(rem);
    W_.push_back(p);
    u_.conservativeResize(k + 1);
    u_[k] = mult;
    ++changes_;
    return true;
  }

  void drop(int idx) {
    const int k = wsize();
    for (int j = idx; j + 1 < k; ++j) {
      W_[j] = W_[j + 1];
      Nmat_.col(j) = Nmat_.col(j + 1);
      Bmat_.col(j) = Bmat_.col(j + 1);
      u_[j] = u_[j + 1];
    }
    W_.pop_back();
    Nmat_.conservativeResize(Eigen::NoChange, k - 1);
    Bmat_.conservativeResize(Eigen::NoChange, k - 1);
    u_.conservativeResize(k - 1);
    rebuild_chol();
    ++changes_;
  }

  void rebuild_chol() {
    const int k = wsize();
    Mat S = Nmat_.leftCols(k).transpose() * Bmat_.leftCols(k);
    Eigen::LLT<Mat> llt(S);
    Ls_ = llt.matrixL();
  }

  void step_data(const Vec& npv, Vec& bp, Vec& r, Vec& z) const {
    bp = llt_.solve(npv);
    const int k = wsize();
    if (k) {
      Vec rhs = Nmat_.leftCols(k).transpose() * bp;
      r = Ls_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solve(rhs);
      r = Ls_.topLeftCorner(k, k).triangularView<Eigen::Lower>().transpose().solve(r);
      z = bp - Bmat_.leftCols(k) * r;
    } else {
      r.resize(0);
      z = bp;
    }
  }

  // Equality phase: only equalities are in W, so no dual blocking applies.
  bool drive_equality(int p, ReducedQpResult& res) {
    Vec npv = qp_.G.row(p).transpose();
    Vec bp, r, z;
    step_data(npv, bp, r, z);
    const double denom = npv.dot(z);
    const double sp = slack(p);
    if (denom <= 1e-12 * std::max(1.0, npv.norm() * bp.norm())) {
      if (std::abs(sp) > 10.0 * row_tol(p)) {
        res.status = QpStatus::infeasible;
        return false;
      }
      return true;  // dependent but consistent; multiplier stays zero
    }
    const double t = -sp / denom;
    y_ += t * z;
    if (wsize()) u_ -= t * r;
    append(p, t);
    return true;
  }

  bool drive_inequality(int p, ReducedQpResult& res) {
    double up = 0.0;
    const Vec npv = qp_.G.row(p).transpose();
    const int inner_cap = 2 * m_ + 10;
    for (int inner = 0; inner < inner_cap; ++inner) {
      Vec bp, r, z;
      step_data(npv, bp, r, z);
      const double denom = npv.dot(z);
      const double sp = slack(p);
      double t2 = kInf;
      if (denom > 1e-12 * std::max(1.0, npv.norm() * bp.norm())) t2 = -sp / denom;
      // dual blocking: inequality members whose multiplier would cross zero
      double t1 = kInf;
      int blocker = -1;
      for (int idx = 0; idx < wsize(); ++idx) {
        if (W_[idx] < qp_.n_eq) continue;
        if (idx < r.size() && r[idx] > 1e-13) {
          const double cand = u_[idx] / r[idx];
          bool better;
          if (blocker < 0) {
            better = true;
          } else {
            const double tie = 1e-12 * (1.0 + std::min(std::abs(cand), std::abs(t1)));
            if (cand < t1 - tie) better = true;
            else if (cand <= t1 + tie && W_[idx] < W_[blocker]) better = true;  // lowest index
            else better = false;
          }
          if (better) {
            t1 = cand;
            blocker = idx;
          }
        }
      }
      const double t = std::min(t1, t2);
      if (t == kInf) {
        res.status = QpStatus::infeasible;  // dual ray: no feasible point
        return false;
      }
      if (t > 0.0) {
        if (z.size() && t2 < kInf) y_ += t * z;
        if (wsize()) u_ -= t * r.head(wsize());
        up += t;
      }
      if (t2 <= t1) {
        append(p, up);
        return true;
      }
      drop(blocker);
    }
    res.status = QpStatus::iteration_limit;
    return false;
  }

  // Warm start: factor the hinted working set, drop rows with negative
  // multipliers, and hand the resulting dual-feasible state to the main
  // loop. A hint equal to the optimal active set costs one factorization
  // and zero working-set changes.
  bool prime_from(std::span<const int> hint) {
    std::vector<int> rows;
    rows.reserve(qp_.n_eq + hint.size());
    for (int i = 0; i < qp_.n_eq; ++i) rows.push_back(i);
    for (int r : hint) {
      if (r >= qp_.n_eq && r < m_ && std::find(rows.begin(), rows.end(), r) == rows.end())
        rows.push_back(r);
    }
    for (int attempt = 0; attempt < 2 * static_cast<int>(hint.size()) + 2; ++attempt) {
      const int k = static_cast<int>(rows.size());
      if (k == 0) {
        W_.clear();
        u_.resize(0);
        Nmat_.resize(n_, 0);
        Bmat_.resize(n_, 0);
        Ls_.resize(0, 0);
        y_ = y0_;
        changes_ = 0;
        return true;
      }
      Mat N(n_, k);
      for (int j = 0; j < k; ++j) N.col(j) = qp_.G.row(rows[j]).transpose();
      Mat B = llt_.solve(N);
      Mat S = N.transpose() * B;
      Eigen::LLT<Mat> slt(S);
      if (slt.info() != Eigen::Success) return false;  // dependent hint rows
      Vec rhs(k);
      for (int j = 0; j < k; ++j) rhs[j] = qp_.h[rows[j]] - qp_.G.row(rows[j]).dot(y0_);
      Vec u = slt.solve(rhs);
      int worst = -1;
      double most_neg = -1e-11;
      for (int j = 0; j < k; ++j) {
        if (rows[j] < qp_.n_eq) continue;
        if (u[j] < most_neg) {
          most_neg = u[j];
          worst = j;
        }
      }
      if (worst >= 0) {
        rows.erase(rows.begin() + worst);
        continue;
      }
      W_ = rows;
      u_ = u;
      y_ = y0_ + B * u;
      Nmat_ = std::move(N);
      Bmat_ = std::move(B);
      Ls_ = slt.matrixL();
      changes_ = 0;
      return true;
    }
    return false;
  }

  void finish(ReducedQpResult& res) {
    // one round of iterative refinement on the final KKT system
    const int k = wsize();
    if (k) {
      for (int pass = 0; pass < 2; ++pass) {
        Vec r1 = qp_.P * y_ + qp_.q - Nmat_.leftCols(k) * u_;
        Vec r2(k);
        for (int j = 0; j < k; ++j) r2[j] = qp_.G.row(W_[j]).dot(y_) - qp_.h[W_[j]];
        Vec pr1 = llt_.solve(r1);
        Vec rhs = Nmat_.leftCols(k).transpose() * pr1 - r2;
        Vec du = Ls_.triangularView<Eigen::Lower>().solve(rhs);
        du = Ls_.triangularView<Eigen::Lower>().transpose().solve(du);
        Vec dy = llt_.solve(Nmat_.leftCols(k) * du - r1);
        y_ += dy;
        u_ += du;
      }
    } else {
      y_ = llt_.solve(-qp_.q);
    }
    res.status = QpStatus::optimal;
    res.y = y_;
    res.mult = Vec::Zero(m_);
    for (int j = 0; j < k; ++j) res.mult[W_[j]] = std::max(u_[j], W_[j] < qp_.n_eq ? -kInf : 0.0);
    res.active = W_;
    std::sort(res.active.begin(), res.active.end());
    res.changes = changes_;
  }

  const ReducedQp& qp_;
  const Eigen::LLT<Mat>& llt_;
  int n_{0}, m_{0};
  Vec y0_, y_, u_;
  std::vector<int> W_;
  Mat Nmat_, Bmat_;
  Mat Ls_;
  int changes_{0};
};

/// Working-set iteration for QPs whose reduced Hessian may be indefinite
/// away from the optimal active set. Solves equality-constrained
/// subproblems by LU on the KKT system and certifies positive curvature on
/// the final working set; a detected direction of nonpositive curvature is
/// reported, never regularized.
inline ReducedQpResult solve_eqp_iteration(const ReducedQp& qp, std::span<const int> hint) {
  ReducedQpResult res;
  const int n = static_cast<int>(qp.P.rows());
  const int m = static_cast<int>(qp.G.rows());
  auto row_tol = [&](int i) { return 1e-10 * (1.0 + std::abs(qp.h[i])); };

  std::vector<int> W;
  auto try_push = [&](int row) {
    Mat N(n, W.size() + 1);
    for (std::size_t j = 0; j < W.size(); ++j) N.col(j) = qp.G.row(W[j]).transpose();
    N.col(W.size()) = qp.G.row(row).transpose();
    Eigen::ColPivHouseholderQR<Mat> qr(N);
    qr.setThreshold(1e-11);
    if (qr.rank() == static_cast<int>(W.size()) + 1) {
      W.push_back(row);
      return true;
    }
    return false;
  };
  for (int i = 0; i < qp.n_eq; ++i) {
    if (!try_push(i)) {
      res.status = QpStatus::infeasible;
      return res;
    }
  }
  for (int r : hint) {
    if (r >= qp.n_eq && r < m) try_push(r);
  }

  std::set<std::vector<int>> seen;
  Vec y, u;
  const int cap = 4 * m + 50;
  for (int iter = 0; iter < cap; ++iter) {
    const int k = static_cast<int>(W.size());
    Mat kkt = Mat::Zero(n + k, n + k);
    kkt.topLeftCorner(n, n) = qp.P;
    Vec rhs(n + k);
    rhs.head(n) = -qp.q;
    for (int j = 0; j < k; ++j) {
      kkt.block(n + j, 0, 1, n) = qp.G.row(W[j]);
      kkt.block(0, n + j, n, 1) = -qp.G.row(W[j]).transpose();
      rhs[n + j] = qp.h[W[j]];
    }
    Eigen::FullPivLU<Mat> lu(kkt);
    if (!lu.isInvertible()) {
      res.status = QpStatus::nonconvex_detected;
      return res;
    }
    Vec sol = lu.solve(rhs);
    y = sol.head(n);
    u = sol.tail(k);

    // curvature certificate on the working-set nullspace (Gw has full row
    // rank by construction, so QR of its transpose yields the basis)
    Mat Z;
    if (k) {
      Mat Gwt(n, k);
      for (int j = 0; j < k; ++j) Gwt.col(j) = qp.G.row(W[j]).transpose();
      Eigen::HouseholderQR<Mat> zqr(Gwt);
      Mat Q = zqr.householderQ();
      Z = Q.rightCols(n - k);
    } else {
      Z = Mat::Identity(n, n);
    }
    if (Z.cols() > 0) {
      Mat T = Z.transpose() * qp.P * Z;
      Eigen::LLT<Mat> tll(0.5 * (T + T.transpose()));
      if (tll.info() != Eigen::Success) {
        res.status = QpStatus::nonconvex_detected;
        return res;
      }
    }

    int worst_row = -1;
    double worst = 0.0;
    for (int i = qp.n_eq; i < m; ++i) {
      if (std::find(W.begin(), W.end(), i) != W.end()) continue;
      double s = qp.G.row(i).dot(y) - qp.h[i];
      if (s >= -row_tol(i)) continue;
      if (s < worst) {
        worst = s;
        worst_row = i;
      }
    }
    if (worst_row >= 0) {
      if (!try_push(worst_row)) {
        res.status = QpStatus::infeasible;
        return res;
      }
      if (!seen.insert(W).second) {
        res.status = QpStatus::iteration_limit;
        return res;
      }
      continue;
    }
    int drop_idx = -1;
    double most_neg = -1e-11;
    for (int j = 0; j < k; ++j) {
      if (W[j] < qp.n_eq) continue;
      if (u[j] < most_neg) {
        most_neg = u[j];
        drop_idx = j;
      }
    }
    if (drop_idx >= 0) {
      W.erase(W.begin() + drop_idx);
      if (!seen.insert(W).second) {
        res.status = QpStatus::iteration_limit;
        return res;
      }
      continue;
    }
    res.status = QpStatus::optimal;
    res.y = y;
    res.mult = Vec::Zero(m);
    for (int j = 0; j < k; ++j) res.mult[W[j]] = (W[j] < qp.n_eq) ? u[j] : std::max(u[j], 0.0);
    res.active = W;
    std::sort(res.active.begin(), res.active.end());
    res.changes = iter;
    return res;
  }
  res.status = QpStatus::iteration_limit;
  return res;
}

}  // namespace detail

/// Solves the reduced QP. `hint` (row indices) primes the working set: a
/// hint that is exactly the optimal active set is verified with one
/// factorization and zero working-set changes.
inline ReducedQpResult solve_reduced_qp(const ReducedQp& qp, std::span<const int> hint = {}) {
  if (qp.P.rows() != qp.P.cols() || qp.P.rows() != qp.q.size())
    throw std::invalid_argument("solve_reduced_qp: dimension mismatch");
  Eigen::LLT<Mat> llt(qp.P);
  if (llt.info() != Eigen::Success) {
    return detail::solve_eqp_iteration(qp, hint);
  }
  detail::DualActiveSet solver(qp, llt);
  return solver.solve(hint);
}

/// Dense QP  min 1/2 d'H d + g'd  s.t.  E d = e,  C d >= c.
struct DenseQp {
  Mat H;
  Vec g;
  Mat E;
  Vec e;
  Mat C;
  Vec c;
};

struct DenseQpSolution {
  QpStatus status{QpStatus::optimal};
  Vec d;
  Vec lam;                  // equality multipliers
  Vec mu;                   // inequality multipliers, >= 0
  std::vector<int> active;  // active inequality rows
  int changes{0};
};

/// Nullspace elimination of the equality block (QR of E') followed by the
/// reduced active-set solve. Throws if the equality rows are rank
/// deficient (LICQ violation).
inline DenseQpSolution solve_dense_qp(const DenseQp& qp, std::span<const int> hint = {}) {
  const int n = static_cast<int>(qp.H.rows());
  const int me = static_cast<int>(qp.E.rows());
  const int mi = static_cast<int>(qp.C.rows());

  Mat Z;
  Vec d_part;
  Eigen::HouseholderQR<Mat> qr;
  if (me > 0) {
    qr.compute(qp.E.transpose());
    Mat R1 = qr.matrixQR().topRows(me).triangularView<Eigen::Upper>();
    for (int i = 0; i < me; ++i) {
      if (std::abs(R1(i, i)) < 1e-11 * (1.0 + std::abs(R1(0, 0))))
        throw std::runtime_error("solve_dense_qp: equality rows rank deficient (LICQ)");
    }
    Mat Q = qr.householderQ();
    Z = Q.rightCols(n - me);
    Vec ctop = R1.transpose().triangularView<Eigen::Lower>().solve(qp.e);
    d_part = Q.leftCols(me) * ctop;
  } else {
    Z = Mat::Identity(n, n);
    d_part = Vec::Zero(n);
  }

  ReducedQp red;
  red.P = Z.transpose() * qp.H * Z;
  red.P = 0.5 * (red.P + red.P.transpose()).eval();
  red.q = Z.transpose() * (qp.H * d_part + qp.g);
  red.G = qp.C * Z;
  red.h = qp.c - qp.C * d_part;
  red.n_eq = 0;

  ReducedQpResult rr = solve_reduced_qp(red, hint);
  DenseQpSolution sol;
  sol.status = rr.status;
  sol.changes = rr.changes;
  if (rr.status != QpStatus::optimal) return sol;

  sol.d = d_part + Z * rr.y;
  sol.mu = rr.mult;
  sol.active = rr.active;
  if (me > 0) {
    Vec rhs = qp.H * sol.d + qp.g;
    if (mi > 0) rhs -= qp.C.transpose() * sol.mu;
    // E' lam = rhs  =>  Q R lam = rhs
    Vec qtr = qr.householderQ().transpose() * rhs;
    Mat R1 = qr.matrixQR().topRows(me).triangularView<Eigen::Upper>();
    sol.lam = R1.triangularView<Eigen::Upper>().solve(qtr.head(me));
  } else {
    sol.lam.resize(0);
  }
  return sol;
}

/// Floors the eigenvalues of a symmetric block at eps (full-space
/// regularization: eigendecompose, clamp, reassemble).
inline Mat eigenvalue_floor(const Mat& block, double eps) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (block + block.transpose()));
  Vec d = es.eigenvalues();
  bool touched = false;
  for (int i = 0; i < d.size(); ++i) {
    if (d[i] < eps) {
      d[i] = eps;
      touched = true;
    }
  }
  if (!touched) return block;
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace enmpc

#endif  // ENMPC_QP_HPP_
