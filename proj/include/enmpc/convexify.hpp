// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_CONVEXIFY_HPP_
#define ENMPC_CONVEXIFY_HPP_

#include "enmpc/ocp.hpp"
#include "enmpc/qp.hpp"
#include "enmpc/sop.hpp"

#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

namespace enmpc {

/// Linearization data at the optimal steady state, plus the strictly
/// active sets (mu above threshold on enabled rows; terminal equalities
/// always count as active).
struct SteadyLinearization {
  Mat A, B;  // discrete dynamics sensitivities
  Mat C;     // path jacobian, mh x (nx+nu)
  Mat D;     // terminal jacobian, mt x nx
  std::vector<int> active_path;
  std::vector<int> active_terminal;

  Mat C_active() const {
    Mat Ca(static_cast<Eigen::Index>(active_path.size()), C.cols());
    for (std::size_t i = 0; i < active_path.size(); ++i) Ca.row(static_cast<Eigen::Index>(i)) = C.row(active_path[i]);
    return Ca;
  }
  Mat D_active() const {
    Mat Da(static_cast<Eigen::Index>(active_terminal.size()), D.cols());
    for (std::size_t i = 0; i < active_terminal.size(); ++i) Da.row(static_cast<Eigen::Index>(i)) = D.row(active_terminal[i]);
    return Da;
  }
};

inline SteadyLinearization steady_linearization(const SopProblem& sop, const Function& terminal_g,
                                                const std::vector<RowKind>& terminal_kinds,
                                                const SteadyState& ss,
                                                double activity_tol = 1e-8) {
  SteadyLinearization lin;
  const int nx = sop.dynamics.nx;
  const int nu = sop.dynamics.nu;
  Vec xu(nx + nu);
  xu << ss.x, ss.u;
  Mat J = sop.dynamics.map.jacobian(xu);
  lin.A = J.leftCols(nx);
  lin.B = J.rightCols(nu);
  Vec in(nx + nu + sop.np);
  in << ss.x, ss.u, sop.p_steady;
  if (sop.path_h.n_out() > 0) {
    lin.C = sop.path_h.jacobian(in).leftCols(nx + nu);
  } else {
    lin.C.resize(0, nx + nu);
  }
  std::vector<char> enabled = sop.h_enabled;
  if (enabled.empty()) enabled.assign(sop.path_h.n_out(), 1);
  for (int i = 0; i < sop.path_h.n_out(); ++i) {
    if (enabled[i] && ss.mu[i] > activity_tol) lin.active_path.push_back(i);
  }
  if (terminal_g.n_out() > 0) {
    lin.D = terminal_g.jacobian(ss.x);
    for (int i = 0; i < terminal_g.n_out(); ++i) {
      if (terminal_kinds[i] == RowKind::Equality) lin.active_terminal.push_back(i);
    }
  } else {
    lin.D.resize(0, nx);
  }
  return lin;
}

/// H(dP) = [A'dP A - dP, A'dP B; B'dP A, B'dP B]. Equals the Hessian of
/// Lambda(x) - Lambda(f(x,u)) at the steady state for the quadratic
/// storage Lambda(x) = -1/2 (x-x_s)' dP (x-x_s).
inline Mat rotation_operator(const Mat& dP, const Mat& A, const Mat& B) {
  const int nx = static_cast<int>(A.rows());
  const int nu = static_cast<int>(B.cols());
  Mat out(nx + nu, nx + nu);
  Mat dPA = dP * A;
  Mat dPB = dP * B;
  out.topLeftCorner(nx, nx) = A.transpose() * dPA - dP;
  out.topRightCorner(nx, nu) = A.transpose() * dPB;
  out.bottomLeftCorner(nu, nx) = B.transpose() * dPA;
  out.bottomRightCorner(nu, nu) = B.transpose() * dPB;
  return 0.5 * (out + out.transpose()).eval();
}

struct SdpCertificate;

struct ConvexifyOptions {
  double rho1{1e-2};
  double rho2{1e-2};
  int eta{-1};         // -1: 1 iff any strictly active constraint, else 0
  double target{1e-8}; // LMI violation target for the cutting-plane loop
  int max_rounds{3000};
  double alpha_min{1e-6};
  bool include_terminal_pair{true};  // off: stage-only pre-solve (terminal synthesis)
  const SdpCertificate* warm_start{nullptr};  // prior solve in the same basis
};

/// Everything needed to re-verify the convexification independently of the
/// solver path. Matrices live in reduced coordinates (cyclic states
/// removed); the embedded full-size blocks are carried by ConvexHessian.
struct SdpCertificate {
  Mat H, Hf, A, B, C_act, D_act;
  Mat dP, F, G;
  double alpha{1.0};
  double beta{0.0};
  double rho1{0.0}, rho2{0.0};
  int eta{0};
  Mat M, Mf;  // normalized: M = (alpha H + H(dP) + eta C'FC)/alpha, Mf analogous
  double stage_min_margin{0.0}, stage_max_margin{0.0};
  double term_min_margin{0.0}, term_max_margin{0.0};
  double target{0.0};
  std::vector<int> reduced_states;
  std::vector<int> active_path, active_terminal;
  Vec scale;  // per-coordinate basis scaling of the reduced (x,u) space
};

struct ConvexHessian {
  Mat M;   // (nx+nu) x (nx+nu), zero rows on cyclic coordinates
  Mat Mf;  // nx x nx
  SdpCertificate cert;
};

struct CertificateMargins {
  double stage_min, stage_max, term_min, term_max;
  double min_eig_M, min_eig_Mf;
  double consistency;  // max deviation between stored M and (S1/alpha) etc.
  bool ok(double tol = 1e-6) const {
    return stage_min >= -tol && stage_max >= -tol && term_min >= -tol && term_max >= -tol &&
           min_eig_M >= 1e-8 && min_eig_Mf >= 1e-8 && consistency <= 1e-9;
  }
};

/// Recomputes the four eigenvalue bounds of the convexification from the
/// stored certificate data (independent of the solver's own residuals).
inline CertificateMargins verify_certificate(const SdpCertificate& c) {
  Mat S1 = c.alpha * c.H + rotation_operator(c.dP, c.A, c.B);
  if (c.eta && c.C_act.rows()) S1 += c.C_act.transpose() * c.F * c.C_act;
  Mat S2 = c.alpha * c.Hf - c.dP;
  if (c.eta && c.D_act.rows()) S2 -= c.D_act.transpose() * c.G * c.D_act;
  Eigen::SelfAdjointEigenSolver<Mat> e1(S1), e2(S2);
  CertificateMargins m;
  m.stage_min = e1.eigenvalues().minCoeff() - 1.0;
  m.stage_max = c.beta - e1.eigenvalues().maxCoeff();
  m.term_min = e2.eigenvalues().minCoeff() - 1.0;
  m.term_max = c.beta - e2.eigenvalues().maxCoeff();
  Eigen::SelfAdjointEigenSolver<Mat> em(c.M), emf(c.Mf);
  m.min_eig_M = em.eigenvalues().minCoeff();
  m.min_eig_Mf = emf.eigenvalues().minCoeff();
  m.consistency = std::max((c.M - S1 / c.alpha).cwiseAbs().maxCoeff(),
                           (c.Mf - S2 / c.alpha).cwiseAbs().maxCoeff());
  return m;
}

namespace detail {

inline int vech_size(int s) { return s * (s + 1) / 2; }

inline Mat vech_to_sym(const Eigen::Ref<const Vec>& th, int s) {
  Mat S(s, s);
  int at = 0;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i <= j; ++i) {
      S(i, j) = th[at];
      S(j, i) = th[at];
      ++at;
    }
  return S;
}

// coefficients of v'S v as a linear form in vech(S)
inline Vec sym_quad_coeffs(const Vec& v) {
  const int s = static_cast<int>(v.size());
  Vec c(vech_size(s));
  int at = 0;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i <= j; ++i) c[at++] = (i == j) ? v[i] * v[i] : 2.0 * v[i] * v[j];
  return c;
}

// subgradient of ||S||_F as a linear form in vech(S), evaluated at S
inline Vec frob_subgrad(const Mat& S) {
  const int s = static_cast<int>(S.rows());
  const double nrm = S.norm();
  Vec g = Vec::Zero(vech_size(s));
  if (nrm < 1e-300) return g;
  int at = 0;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i <= j; ++i) g[at++] = ((i == j) ? S(i, j) : 2.0 * S(i, j)) / nrm;
  return g;
}

}  // namespace detail

/// Offline convexification: solves the small SDP
///
///   min beta + rho1 ||F|| + rho2 ||G||
///   s.t. I <= alpha H + H(dP) + eta C'FC <= beta I
///        I <= alpha Hf - dP  - eta D'GD  <= beta I,   alpha > 0,
///
/// by an exchange/cutting-plane scheme on eigenvector certificates: each
/// round adds the linear cuts v'(.)v >= 1 (or <= beta) for the violating
/// unit eigenvectors and re-solves the master over (dP, F, G, alpha, beta).
/// Frobenius norms enter through epigraph variables with subgradient cuts.
/// The returned blocks are the constraint matrices divided by alpha, so
/// the reduced Hessian matches H exactly.
///
/// Cyclic states (cost-free invariant coordinates) are removed before the
/// SDP and the blocks are embedded back with zero rows; the structural
/// prerequisites for that reduction are checked.
inline ConvexHessian solve_convexification(const Mat& H_full, const Mat& Hf_full,
                                           const SteadyLinearization& lin,
                                           const ConvexifyOptions& opts = {},
                                           const std::vector<int>& cyclic_states = {}) {
  const int nx = static_cast<int>(lin.A.rows());
  const int nu = static_cast<int>(lin.B.cols());

  std::vector<int> keep_x;
  for (int i = 0; i < nx; ++i) {
    if (std::find(cyclic_states.begin(), cyclic_states.end(), i) == cyclic_states.end())
      keep_x.push_back(i);
  }
  std::vector<int> keep_xu = keep_x;
  for (int i = 0; i < nu; ++i) keep_xu.push_back(nx + i);
  const int nz = static_cast<int>(keep_x.size());
  const int nzu = static_cast<int>(keep_xu.size());

  // structural prerequisites of the cyclic reduction
  const double h_mag = 1.0 + H_full.cwiseAbs().maxCoeff();
  for (int s : cyclic_states) {
    for (int j = 0; j < nx + nu; ++j) {
      if (std::abs(H_full(s, j)) > 1e-9 * h_mag)
        throw std::runtime_error("solve_convexification: cyclic state carries curvature");
    }
    for (int i : keep_x) {
      if (std::abs(lin.A(i, s)) > 1e-12)
        throw std::runtime_error("solve_convexification: cyclic state influences the dynamics");
    }
    if (std::abs(lin.A(s, s) - 1.0) > 1e-12)
      throw std::runtime_error("solve_convexification: cyclic state is not an integrator");
    for (int r : lin.active_path) {
      if (std::abs(lin.C(r, s)) > 1e-12)
        throw std::runtime_error("solve_convexification: cyclic state enters an active row");
    }
  }

  auto slice = [](const Mat& Min, const std::vector<int>& rows, const std::vector<int>& cols) {
    Mat out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols.size(); ++j)
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = Min(rows[i], cols[j]);
    return out;
  };

  SdpCertificate cert;
  Mat H_red = slice(H_full, keep_xu, keep_xu);
  Mat Hf_red = slice(Hf_full, keep_x, keep_x);

  // per-coordinate scaling: curvature scales of a physical model can span
  // many orders of magnitude (power in torque units vs unit tracking
  // weights), which a cutting-plane master cannot survive. The SDP is
  // solved in the scaled basis xi_i = x_i / d_i, where it transforms
  // exactly (dP -> D dP D, F and alpha invariant); the certificate lives
  // in that basis and records it.
  Vec d(nzu);
  {
    double hmax = 1e-300;
    for (int i = 0; i < nzu; ++i) hmax = std::max(hmax, std::abs(H_red(i, i)));
    for (int i = 0; i < nzu; ++i) d[i] = std::sqrt(std::max(std::abs(H_red(i, i)), 1e-4 * hmax));
  }
  cert.scale = d;
  cert.H.resize(nzu, nzu);
  for (int i = 0; i < nzu; ++i)
    for (int j = 0; j < nzu; ++j) cert.H(i, j) = H_red(i, j) / (d[i] * d[j]);
  cert.Hf.resize(nz, nz);
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nz; ++j) cert.Hf(i, j) = Hf_red(i, j) / (d[i] * d[j]);
  cert.A.resize(nz, nz);
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nz; ++j) cert.A(i, j) = lin.A(keep_x[i], keep_x[j]) * d[i] / d[j];
  cert.B.resize(nz, nu);
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nu; ++j) cert.B(i, j) = lin.B(keep_x[i], j) * d[i] / d[nz + j];
  {
    Mat Ca = lin.C_active();
    cert.C_act.resize(Ca.rows(), nzu);
    for (Eigen::Index r = 0; r < Ca.rows(); ++r)
      for (int j = 0; j < nzu; ++j) cert.C_act(r, j) = Ca(r, keep_xu[j]) * d[j];
    Mat Da = lin.D_active();
    cert.D_act.resize(Da.rows(), nz);
    for (Eigen::Index r = 0; r < Da.rows(); ++r)
      for (int j = 0; j < nz; ++j) cert.D_act(r, j) = Da(r, keep_x[j]) * d[j];
  }
  cert.rho1 = opts.rho1;
  cert.rho2 = opts.rho2;
  cert.reduced_states = keep_x;
  cert.active_path = lin.active_path;
  cert.active_terminal = lin.active_terminal;
  cert.target = opts.target;
  const int na = static_cast<int>(cert.C_act.rows());
  const int nt = static_cast<int>(cert.D_act.rows());
  cert.eta = (opts.eta >= 0) ? opts.eta : ((na + nt) > 0 ? 1 : 0);

  // variable layout: vech(dP) | vech(F) | vech(G) | alpha | beta | sF | sG
  const bool with_terminal = opts.include_terminal_pair;
  const int vp = detail::vech_size(nz);
  const int vf = cert.eta ? detail::vech_size(na) : 0;
  const int vg = (cert.eta && with_terminal) ? detail::vech_size(nt) : 0;
  const int ia = vp + vf + vg;
  const int ib = ia + 1;
  const int isf = ib + 1;
  const int isg = isf + 1;
  const int nv = isg + 1;

  // precomputed rotation-operator images of the vech basis
  std::vector<Mat> hof(vp);
  {
    int at = 0;
    for (int j = 0; j < nz; ++j)
      for (int i = 0; i <= j; ++i) {
        Mat P = Mat::Zero(nz, nz);
        P(i, j) = 1.0;
        P(j, i) = 1.0;
        hof[at++] = rotation_operator(P, cert.A, cert.B);
      }
  }

  auto assemble = [&](const Vec& th, Mat& S1, Mat& S2) {
    Mat dP = detail::vech_to_sym(th.head(vp), nz);
    S1 = th[ia] * cert.H + rotation_operator(dP, cert.A, cert.B);
    if (cert.eta && na)
      S1 += cert.C_act.transpose() * detail::vech_to_sym(th.segment(vp, vf), na) * cert.C_act;
    S2 = th[ia] * cert.Hf - dP;
    if (cert.eta && nt)
      S2 -= cert.D_act.transpose() * detail::vech_to_sym(th.segment(vp + vf, vg), nt) * cert.D_act;
  };

  auto stage_cut_coeffs = [&](const Vec& v) {
    Vec coeff = Vec::Zero(nv);
    coeff[ia] = v.dot(cert.H * v);
    for (int i = 0; i < vp; ++i) coeff[i] = v.dot(hof[i] * v);
    if (cert.eta && na) coeff.segment(vp, vf) = detail::sym_quad_coeffs(cert.C_act * v);
    return coeff;
  };
  auto term_cut_coeffs = [&](const Vec& v) {
    Vec coeff = Vec::Zero(nv);
    coeff[ia] = v.dot(cert.Hf * v);
    coeff.head(vp) = -detail::sym_quad_coeffs(v);
    if (cert.eta && nt) coeff.segment(vp + vf, vg) = -detail::sym_quad_coeffs(cert.D_act * v);
    return coeff;
  };

  // Bundle loop with a trust region. Phase 1 drives the worst LMI violation
  // (an explicit relaxation variable in the master) to the target; phase 2
  // polishes beta + rho1||F|| + rho2||G|| while candidate points that lose
  // certified feasibility are rejected as null steps.
  const int is_relax = nv;  // relaxation variable appended to the layout
  const int nv_all = nv + 1;

  auto pad = [&](Vec coeff, double relax_coeff) {
    Vec out(nv_all);
    out.head(nv) = coeff;
    out[is_relax] = relax_coeff;
    return out;
  };

  std::vector<Vec> cut_rows;     // relaxable LMI cuts, coeff' theta + s >= rhs
  std::vector<double> cut_rhs;
  std::vector<Vec> hard_rows;    // epigraph cuts and boxes, never relaxed
  std::vector<double> hard_rhs;
  auto add_cut = [&](const Vec& coeff, double rhs) {
    cut_rows.push_back(pad(coeff, 1.0));
    cut_rhs.push_back(rhs);
  };
  auto add_hard = [&](const Vec& coeff, double rhs) {
    hard_rows.push_back(pad(coeff, 0.0));
    hard_rhs.push_back(rhs);
  };
  auto box = [&](int idx, double lo, double hi) {
    Vec e = Vec::Zero(nv);
    e[idx] = 1.0;
    add_hard(e, lo);
    add_hard(-e, -hi);
  };
  for (int i = 0; i < vp; ++i) box(i, -1e8, 1e8);
  for (int i = 0; i < vf + vg; ++i) box(vp + i, -1e8, 1e8);
  box(ia, opts.alpha_min, 1e7);
  box(ib, 0.0, 1e10);
  box(isf, 0.0, 2e8);
  box(isg, 0.0, 2e8);
  {
    Vec e = Vec::Zero(nv_all);
    e[is_relax] = 1.0;
    hard_rows.push_back(e);
    hard_rhs.push_back(0.0);  // s >= 0
  }

  // true violation of the unrelaxed constraints at a point
  struct Violation {
    double worst;
    std::string name;
  };
  auto evaluate = [&](const Vec& th) {
    Mat S1, S2;
    assemble(th, S1, S2);
    Eigen::SelfAdjointEigenSolver<Mat> e1(S1), e2(S2);
    Violation v{0.0, "none"};
    auto track = [&](double viol, const char* name) {
      if (viol > v.worst) {
        v.worst = viol;
        v.name = name;
      }
    };
    track(1.0 - e1.eigenvalues().minCoeff(), "stage lower bound (7b)");
    track(e1.eigenvalues().maxCoeff() - th[ib], "stage upper bound (7c)");
    if (with_terminal) {
      track(1.0 - e2.eigenvalues().minCoeff(), "terminal lower bound (7d)");
      track(e2.eigenvalues().maxCoeff() - th[ib], "terminal upper bound (7e)");
    }
    return v;
  };
  auto add_violated_cuts = [&](const Vec& th, double add_tol) {
    Mat S1, S2;
    assemble(th, S1, S2);
    Eigen::SelfAdjointEigenSolver<Mat> e1(S1), e2(S2);
    int added = 0;
    for (int i = 0; i < nzu; ++i) {
      if (e1.eigenvalues()[i] < 1.0 - add_tol) {
        add_cut(stage_cut_coeffs(e1.eigenvectors().col(i)), 1.0);
        ++added;
      }
      if (e1.eigenvalues()[i] > th[ib] + add_tol) {
        Vec coeff = -stage_cut_coeffs(e1.eigenvectors().col(i));
        coeff[ib] += 1.0;
        add_cut(coeff, 0.0);
        ++added;
      }
    }
    if (with_terminal) {
      for (int i = 0; i < nz; ++i) {
        if (e2.eigenvalues()[i] < 1.0 - add_tol) {
          add_cut(term_cut_coeffs(e2.eigenvectors().col(i)), 1.0);
          ++added;
        }
        if (e2.eigenvalues()[i] > th[ib] + add_tol) {
          Vec coeff = -term_cut_coeffs(e2.eigenvectors().col(i));
          coeff[ib] += 1.0;
          add_cut(coeff, 0.0);
          ++added;
        }
      }
    }
    return added;
  };
  auto norm_epigraph_cuts = [&](const Vec& th) {
    if (cert.eta && na) {
      Mat Fm = detail::vech_to_sym(th.segment(vp, vf), na);
      if (Fm.norm() > th[isf] + 1e-12) {
        Vec coeff = Vec::Zero(nv);
        coeff.segment(vp, vf) = -detail::frob_subgrad(Fm);
        coeff[isf] = 1.0;
        add_hard(coeff, 0.0);
      }
    }
    if (cert.eta && vg > 0) {
      Mat Gm = detail::vech_to_sym(th.segment(vp + vf, vg), nt);
      if (Gm.norm() > th[isg] + 1e-12) {
        Vec coeff = Vec::Zero(nv);
        coeff.segment(vp + vf, vg) = -detail::frob_subgrad(Gm);
        coeff[isg] = 1.0;
        add_hard(coeff, 0.0);
      }
    }
  };

  // center: warm start from a prior certificate in the same scaled basis
  // when given (e.g. the stage-only pre-solve), else zero rotation
  Vec center = Vec::Zero(nv_all);
  center[ia] = 1.0;
  if (opts.warm_start && opts.warm_start->dP.rows() == nz) {
    const SdpCertificate& w = *opts.warm_start;
    int at2 = 0;
    for (int j = 0; j < nz; ++j)
      for (int i = 0; i <= j; ++i) center[at2++] = w.dP(i, j);
    if (cert.eta && na && w.F.rows() == na) {
      for (int j = 0; j < na; ++j)
        for (int i = 0; i <= j; ++i) center[at2++] = w.F(i, j);
      center[isf] = w.F.norm();
    }
    center[ia] = std::max(w.alpha, opts.alpha_min);
  }
  {
    Mat S1, S2;
    assemble(center.head(nv), S1, S2);
    Eigen::SelfAdjointEigenSolver<Mat> e1(S1), e2(S2);
    center[ib] = std::max({e1.eigenvalues().maxCoeff(),
                           with_terminal ? e2.eigenvalues().maxCoeff() : 0.0, 1.0});
  }
  add_violated_cuts(center.head(nv), 0.0);
  Violation center_viol = evaluate(center.head(nv));
  center[is_relax] = center_viol.worst;

  std::vector<int> master_hint;
  double radius = 16.0;
  bool feasible = center_viol.worst <= opts.target;
  int phase = feasible ? 2 : 1;
  int polish_rounds = 0;
  const int max_polish = 60;

  auto objective_of = [&](const Vec& th) {
    return th[ib] + opts.rho1 * th[isf] + opts.rho2 * th[isg];
  };

  for (int round = 0; round < opts.max_rounds; ++round) {
    // master over (theta, s) around the center with a trust region
    Vec c_obj = Vec::Zero(nv_all);
    if (phase == 1) {
      c_obj[is_relax] = 1.0;
      c_obj[ib] = 1e-8;
    } else {
      c_obj[ib] = 1.0;
      c_obj[isf] = opts.rho1;
      c_obj[isg] = opts.rho2;
    }
    // proximal weight keeps the unconstrained master minimizer within a
    // couple of orders of the trust ball (pure LP masters are numerically
    // fragile against mixed row scales)
    const double sigma =
        std::max(1e-12, c_obj.cwiseAbs().maxCoeff() /
                            (100.0 * radius * (1.0 + center.cwiseAbs().maxCoeff())));

    DenseQp master;
    master.H = sigma * Mat::Identity(nv_all, nv_all);
    master.g = c_obj - sigma * center;
    master.E.resize(0, nv_all);
    master.e.resize(0);
    const int extra = (phase == 2) ? 1 : 0;
    const int m = static_cast<int>(cut_rows.size() + hard_rows.size()) + 2 * nv_all + extra;
    master.C.resize(m, nv_all);
    master.c.resize(m);
    int at = 0;
    for (std::size_t i = 0; i < cut_rows.size(); ++i, ++at) {
      master.C.row(at) = cut_rows[i].transpose();
      master.c[at] = cut_rhs[i];
    }
    for (std::size_t i = 0; i < hard_rows.size(); ++i, ++at) {
      master.C.row(at) = hard_rows[i].transpose();
      master.c[at] = hard_rhs[i];
    }
    for (int i = 0; i < nv_all; ++i) {  // trust region around the center
      const double width = radius * (1.0 + std::abs(center[i]));
      Vec e = Vec::Zero(nv_all);
      e[i] = 1.0;
      master.C.row(at) = e.transpose();
      master.c[at] = center[i] - width;
      ++at;
      master.C.row(at) = -e.transpose();
      master.c[at] = -(center[i] + width);
      ++at;
    }
    if (phase == 2) {  // feasibility is certified: cap the relaxation at the target
      Vec e = Vec::Zero(nv_all);
      e[is_relax] = -1.0;
      master.C.row(at) = e.transpose();
      master.c[at] = -opts.target;
      ++at;
    }
    DenseQpSolution sol = solve_dense_qp(master);
    if (sol.status != QpStatus::optimal) {
      if (phase == 2) break;  // keep the certified center; polish is best-effort
      throw std::runtime_error("solve_convexification: master subproblem failed (" +
                               std::string(to_string(sol.status)) + ")");
    }
    Vec cand = sol.d;

    Violation cand_viol = evaluate(cand.head(nv));
    add_violated_cuts(cand.head(nv), std::max(opts.target * 0.1, cand_viol.worst * 1e-9));
    norm_epigraph_cuts(cand.head(nv));

    if (std::getenv("ENMPC_CONVEXIFY_TRACE")) {
      std::fprintf(stderr,
                   "[convexify] round %d phase %d radius=%.3g alpha=%.6g beta=%.6g "
                   "viol=%.3e center=%.3e obj=%.6g rows=%zu\n",
                   round, phase, radius, cand[ia], cand[ib], cand_viol.worst,
                   center_viol.worst, objective_of(cand), cut_rows.size());
    }

    if (phase == 1) {
      const double predicted = std::max(cand[is_relax], 0.0);  // model violation
      const double model_dec = center_viol.worst - predicted;
      const double actual_dec = center_viol.worst - cand_viol.worst;
      double saturation = 0.0;  // did the step hit the trust-region wall?
      for (int i = 0; i < nv_all; ++i) {
        saturation = std::max(
            saturation, std::abs(cand[i] - center[i]) / (radius * (1.0 + std::abs(center[i]))));
      }
      if (actual_dec > 1e-14 * (1.0 + center_viol.worst)) {
        center = cand;  // serious step: any true improvement is kept
        center[is_relax] = cand_viol.worst;
        center_viol = cand_viol;
        if (model_dec > 0 && actual_dec >= 0.1 * model_dec) radius = std::min(radius * 3.0, 1e7);
        else if (saturation >= 0.8) radius = std::min(radius * 2.0, 1e7);
      } else {
        radius = std::max(radius * 0.5, 1e-10);  // null step: keep cuts, shrink
      }
      if (center_viol.worst <= opts.target) {
        phase = 2;
        radius = std::max(radius, 1.0);
      } else if (radius <= 1e-9 && model_dec <= opts.target) {
        break;  // the cut model itself cannot go lower: infeasible
      }
    } else {
      const bool better = objective_of(cand) <=
                          objective_of(center) - 1e-10 * (1.0 + std::abs(objective_of(center)));
      if (cand_viol.worst <= opts.target && better) {
        center = cand;
        center[is_relax] = 0.0;
        center_viol = cand_viol;
        radius = std::min(radius * 1.5, 1e5);
      } else {
        radius = std::max(radius * 0.5, 1e-9);
      }
      ++polish_rounds;
      const bool stalled = radius <= 1e-8 * (1.0 + center.cwiseAbs().maxCoeff());
      if (polish_rounds >= max_polish || stalled) break;
    }
  }

  if (center_viol.worst > opts.target) {
    if (std::getenv("ENMPC_CONVEXIFY_TRACE")) {
      Mat S1, S2;
      assemble(center.head(nv), S1, S2);
      Eigen::SelfAdjointEigenSolver<Mat> e1(S1);
      Vec v = e1.eigenvectors().col(0);
      Vec coeff = stage_cut_coeffs(v);
      std::fprintf(stderr, "[convexify] blocked eigenvector (lambda=%.6g):\n  v = ", e1.eigenvalues()[0]);
      for (int i = 0; i < v.size(); ++i) std::fprintf(stderr, "%.4g ", v[i]);
      std::fprintf(stderr, "\n  cut coeffs: alpha=%.4g |dP part|=%.4g |F part|=%.4g\n",
                   coeff[ia], coeff.head(vp).cwiseAbs().maxCoeff(),
                   vf ? coeff.segment(vp, vf).cwiseAbs().maxCoeff() : 0.0);
    }
    std::ostringstream os;
    os << "solve_convexification: infeasible within iteration budget, most violated: "
       << center_viol.name << " by " << center_viol.worst;
    throw std::runtime_error(os.str());
  }
  Vec theta = center.head(nv);

  cert.dP = detail::vech_to_sym(theta.head(vp), nz);
  cert.F = (cert.eta && na) ? detail::vech_to_sym(theta.segment(vp, vf), na) : Mat::Zero(na, na);
  cert.G =
      (cert.eta && nt) ? detail::vech_to_sym(theta.segment(vp + vf, vg), nt) : Mat::Zero(nt, nt);
  cert.alpha = theta[ia];
  cert.beta = theta[ib];
  {
    Mat S1, S2;
    assemble(theta, S1, S2);
    cert.M = S1 / cert.alpha;
    cert.Mf = S2 / cert.alpha;
    Eigen::SelfAdjointEigenSolver<Mat> e1(S1), e2(S2);
    cert.stage_min_margin = e1.eigenvalues().minCoeff() - 1.0;
    cert.stage_max_margin = cert.beta - e1.eigenvalues().maxCoeff();
    cert.term_min_margin = e2.eigenvalues().minCoeff() - 1.0;
    cert.term_max_margin = cert.beta - e2.eigenvalues().maxCoeff();
  }

  ConvexHessian out;
  out.cert = cert;
  out.M = Mat::Zero(nx + nu, nx + nu);
  out.Mf = Mat::Zero(nx, nx);
  // map back to physical coordinates: M_orig = D M_scaled D
  for (int i = 0; i < nzu; ++i)
    for (int j = 0; j < nzu; ++j) out.M(keep_xu[i], keep_xu[j]) = d[i] * d[j] * cert.M(i, j);
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nz; ++j) out.Mf(keep_x[i], keep_x[j]) = d[i] * d[j] * cert.Mf(i, j);
  return out;
}

struct ReducedHessianCheckResult {
  double rel_discrepancy;  // ||Z'(M - H)Z|| / ||Z'H Z||
  double range_residual;   // ||Z'(M - H)Z0|| against the defect-free subspace
};

/// Verifies the reduced-Hessian equality on a horizon-N embedding: Y stacks
/// the Jacobians of the initial, dynamic, strictly active path and active
/// terminal constraints at steady state; Z spans null(Y). Also checked is
/// the telescoping mechanism behind the equality: the modification M - H is
/// annihilated between null(Y) and the larger defect-free subspace null(Y
/// without the initial rows), which is what makes the first primal steps of
/// the exact and convexified Hessians coincide. Throws if Y loses row rank
/// (LICQ violation).
inline ReducedHessianCheckResult reduced_hessian_check(const SteadyLinearization& lin,
                                                       const Mat& M, const Mat& Mf, const Mat& H,
                                                       const Mat& Hf, int N) {
  const int nx = static_cast<int>(lin.A.rows());
  const int nu = static_cast<int>(lin.B.cols());
  const int nxu = nx + nu;
  const int nw = N * nxu + nx;
  const int na = static_cast<int>(lin.active_path.size());
  const int ntr = static_cast<int>(lin.active_terminal.size());
  Mat Ca = lin.C_active();
  // stage-0 active rows without input part are contained in the span of
  // the initial block; drop them (the nullspace is unchanged) so genuine
  // rank loss still surfaces as an error below
  std::vector<int> act0;
  for (int r = 0; r < na; ++r) {
    if (Ca.row(r).tail(nu).cwiseAbs().maxCoeff() > 0.0) act0.push_back(r);
  }
  const int rows = nx + N * nx + static_cast<int>(act0.size()) + (N - 1) * na + ntr;

  Mat Y = Mat::Zero(rows, nw);
  Y.topLeftCorner(nx, nx) = Mat::Identity(nx, nx);
  int at = nx;
  for (int k = 0; k < N; ++k) {
    Y.block(at, k * nxu, nx, nx) = -lin.A;
    Y.block(at, k * nxu + nx, nx, nu) = -lin.B;
    Y.block(at, (k + 1) * nxu, nx, nx) = Mat::Identity(nx, nx);
    at += nx;
  }
  for (int r : act0) {
    Y.block(at, 0, 1, nxu) = Ca.row(r);
    ++at;
  }
  for (int k = 1; k < N; ++k) {
    for (int r = 0; r < na; ++r) Y.block(at + r, k * nxu, 1, nxu) = Ca.row(r);
    at += na;
  }
  Mat Da = lin.D_active();
  for (int r = 0; r < ntr; ++r) Y.block(at + r, N * nxu, 1, nx) = Da.row(r);

  Eigen::ColPivHouseholderQR<Mat> qr(Y.transpose());
  qr.setThreshold(1e-10);
  if (static_cast<int>(qr.rank()) < rows)
    throw std::runtime_error("reduced_hessian_check: constraint Jacobian rank deficient (LICQ)");
  Mat Q = qr.householderQ();
  Mat Z = Q.rightCols(nw - rows);

  // same stack without the initial rows: particular QP solutions with zero
  // dynamics defects live in its nullspace
  Mat Y0 = Y.bottomRows(rows - nx);
  Eigen::HouseholderQR<Mat> qr0(Y0.transpose());
  Mat Z0 = Mat(qr0.householderQ()).rightCols(nw - (rows - nx));

  Mat Delta = Mat::Zero(nw, nw);
  Mat Hbig = Mat::Zero(nw, nw);
  for (int k = 0; k < N; ++k) {
    Delta.block(k * nxu, k * nxu, nxu, nxu) = M - H;
    Hbig.block(k * nxu, k * nxu, nxu, nxu) = H;
  }
  Delta.block(N * nxu, N * nxu, nx, nx) = Mf - Hf;
  Hbig.block(N * nxu, N * nxu, nx, nx) = Hf;

  ReducedHessianCheckResult res;
  Mat red = Z.transpose() * Delta * Z;
  Mat redH = Z.transpose() * Hbig * Z;
  res.rel_discrepancy = red.norm() / std::max(redH.norm(), 1e-30);
  Mat cross = Z.transpose() * Delta * Z0;
  res.range_residual = cross.norm() / std::max(1.0, Delta.norm());
  return res;
}

}  // namespace enmpc

#endif  // ENMPC_CONVEXIFY_HPP_
