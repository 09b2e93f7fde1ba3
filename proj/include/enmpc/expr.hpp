// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_EXPR_HPP_
#define ENMPC_EXPR_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace enmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown when an operation is evaluated outside its smooth domain
/// (division by zero, tan at an odd multiple of pi/2, ...). Carries the
/// offending node index so model bugs can be located in the DAG.
struct DomainError : std::runtime_error {
  DomainError(const std::string& what, int node_index)
      : std::runtime_error(what + " (node " + std::to_string(node_index) + ")"), node(node_index) {}
  int node;
};

namespace detail {

enum class Op : std::uint8_t { Const, Var, Add, Sub, Mul, Div, Neg, Sin, Cos, Tan, Exp, Pow };

struct Node {
  Op op{Op::Const};
  std::int32_t a{-1};
  std::int32_t b{-1};
  double c{0.0};  // constant value (Const), flat input index (Var), exponent (Pow)
};

inline bool node_eq(const Node& x, const Node& y) {
  return x.op == y.op && x.a == y.a && x.b == y.b &&
         std::memcmp(&x.c, &y.c, sizeof(double)) == 0;
}

struct NodeHash {
  std::size_t operator()(const Node& n) const {
    std::uint64_t bits;
    std::memcpy(&bits, &n.c, sizeof(bits));
    std::size_t h = static_cast<std::size_t>(n.op);
    h = h * 1000003u ^ static_cast<std::size_t>(n.a + 1);
    h = h * 1000003u ^ static_cast<std::size_t>(n.b + 1);
    h = h * 1000003u ^ static_cast<std::size_t>(bits ^ (bits >> 32));
    return h;
  }
};
struct NodeEq {
  bool operator()(const Node& x, const Node& y) const { return node_eq(x, y); }
};

}  // namespace detail

class GraphBuilder;

/// Handle to a node of a GraphBuilder expression DAG. Supports the usual
/// arithmetic operators; free functions sin/cos/tan/exp/pow build the
/// remaining smooth primitives.
class Sym {
 public:
  Sym() = default;
  Sym(GraphBuilder* g, int id) : g_(g), id_(id) {}
  GraphBuilder* builder() const { return g_; }
  int id() const { return id_; }

 private:
  GraphBuilder* g_{nullptr};
  int id_{-1};
};

/// Mutable expression DAG under construction. Nodes are hash-consed and
/// constant subexpressions are folded on insertion; no algebraic rewriting
/// beyond that is performed.
class GraphBuilder {
 public:
  Sym constant(double v) { return Sym(this, add_node({detail::Op::Const, -1, -1, v})); }

  /// Declares an ordered input group (e.g. "x" with dimension n_x) and
  /// returns one symbol per component. Groups stack in declaration order.
  std::vector<Sym> inputs(const std::string& name, int dim) {
    std::vector<Sym> out;
    out.reserve(dim);
    for (int i = 0; i < dim; ++i) {
      out.emplace_back(this, add_node({detail::Op::Var, -1, -1, double(n_in_ + i)}));
    }
    groups_.emplace_back(name, dim);
    n_in_ += dim;
    return out;
  }

  int num_inputs() const { return n_in_; }
  const std::vector<std::pair<std::string, int>>& groups() const { return groups_; }
  const std::vector<detail::Node>& nodes() const { return nodes_; }

  Sym add(Sym a, Sym b) { return binary(detail::Op::Add, a, b); }
  Sym sub(Sym a, Sym b) { return binary(detail::Op::Sub, a, b); }
  Sym mul(Sym a, Sym b) { return binary(detail::Op::Mul, a, b); }
  Sym div(Sym a, Sym b) { return binary(detail::Op::Div, a, b); }
  Sym neg(Sym a) { return unary(detail::Op::Neg, a); }
  Sym sin(Sym a) { return unary(detail::Op::Sin, a); }
  Sym cos(Sym a) { return unary(detail::Op::Cos, a); }
  Sym tan(Sym a) { return unary(detail::Op::Tan, a); }
  Sym exp(Sym a) { return unary(detail::Op::Exp, a); }
  Sym pow(Sym a, double p) {
    const detail::Node& na = nodes_[a.id()];
    if (na.op == detail::Op::Const) return constant(std::pow(na.c, p));
    if (p == 0.0) return constant(1.0);
    if (p == 1.0) return a;
    return Sym(this, add_node({detail::Op::Pow, a.id(), -1, p}));
  }

 private:
  friend class Function;

  bool is_const(int id, double v) const {
    const detail::Node& n = nodes_[id];
    std::uint64_t x, y;
    std::memcpy(&x, &n.c, 8);
    std::memcpy(&y, &v, 8);
    return n.op == detail::Op::Const && x == y;
  }

  Sym binary(detail::Op op, Sym a, Sym b) {
    const detail::Node& na = nodes_[a.id()];
    const detail::Node& nb = nodes_[b.id()];
    if (na.op == detail::Op::Const && nb.op == detail::Op::Const) {
      switch (op) {
        case detail::Op::Add: return constant(na.c + nb.c);
        case detail::Op::Sub: return constant(na.c - nb.c);
        case detail::Op::Mul: return constant(na.c * nb.c);
        case detail::Op::Div:
          if (nb.c == 0.0) throw DomainError("division by constant zero", b.id());
          return constant(na.c / nb.c);
        default: break;
      }
    }
    // neutral-element peepholes keep unrolled integrator graphs small
    switch (op) {
      case detail::Op::Add:
        if (is_const(a.id(), 0.0)) return b;
        if (is_const(b.id(), 0.0)) return a;
        break;
      case detail::Op::Sub:
        if (is_const(b.id(), 0.0)) return a;
        if (is_const(a.id(), 0.0)) return neg(b);
        break;
      case detail::Op::Mul:
        if (is_const(a.id(), 1.0)) return b;
        if (is_const(b.id(), 1.0)) return a;
        if (is_const(a.id(), 0.0) || is_const(b.id(), 0.0)) return constant(0.0);
        break;
      case detail::Op::Div:
        if (is_const(b.id(), 1.0)) return a;
        break;
      default: break;
    }
    return Sym(this, add_node({op, a.id(), b.id(), 0.0}));
  }

  Sym unary(detail::Op op, Sym a) {
    const detail::Node& na = nodes_[a.id()];
    if (na.op == detail::Op::Const) {
      switch (op) {
        case detail::Op::Neg: return constant(-na.c);
        case detail::Op::Sin: return constant(std::sin(na.c));
        case detail::Op::Cos: return constant(std::cos(na.c));
        case detail::Op::Tan: return constant(std::tan(na.c));
        case detail::Op::Exp: return constant(std::exp(na.c));
        default: break;
      }
    }
    if (op == detail::Op::Neg && na.op == detail::Op::Neg) return Sym(this, na.a);
    return Sym(this, add_node({op, a.id(), -1, 0.0}));
  }

  int add_node(detail::Node n) {
    auto it = cse_.find(n);
    if (it != cse_.end()) return it->second;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(n);
    cse_.emplace(n, id);
    return id;
  }

  std::vector<detail::Node> nodes_;
  std::unordered_map<detail::Node, int, detail::NodeHash, detail::NodeEq> cse_;
  std::vector<std::pair<std::string, int>> groups_;
  int n_in_{0};
};

inline Sym operator+(Sym a, Sym b) { return a.builder()->add(a, b); }
inline Sym operator-(Sym a, Sym b) { return a.builder()->sub(a, b); }
inline Sym operator*(Sym a, Sym b) { return a.builder()->mul(a, b); }
inline Sym operator/(Sym a, Sym b) { return a.builder()->div(a, b); }
inline Sym operator-(Sym a) { return a.builder()->neg(a); }
inline Sym operator+(Sym a, double b) { return a + a.builder()->constant(b); }
inline Sym operator+(double a, Sym b) { return b.builder()->constant(a) + b; }
inline Sym operator-(Sym a, double b) { return a - a.builder()->constant(b); }
inline Sym operator-(double a, Sym b) { return b.builder()->constant(a) - b; }
inline Sym operator*(Sym a, double b) { return a * a.builder()->constant(b); }
inline Sym operator*(double a, Sym b) { return b.builder()->constant(a) * b; }
inline Sym operator/(Sym a, double b) { return a / a.builder()->constant(b); }
inline Sym operator/(double a, Sym b) { return b.builder()->constant(a) / b; }
inline Sym sin(Sym a) { return a.builder()->sin(a); }
inline Sym cos(Sym a) { return a.builder()->cos(a); }
inline Sym tan(Sym a) { return a.builder()->tan(a); }
inline Sym exp(Sym a) { return a.builder()->exp(a); }
inline Sym pow(Sym a, double p) { return a.builder()->pow(a, p); }
inline Sym sq(Sym a) { return a * a; }

/// Scratch buffers for Function evaluation. Each concurrent evaluation
/// owns its workspace; the Function itself is immutable and shareable.
struct EvalWorkspace {
  Vec val;
  Mat dot;   // forward tangents, one column per input direction
  Vec bar;   // reverse adjoints
  Mat bdot;  // forward tangents of the adjoints
};

/// Immutable multivariate vector function represented as a flat expression
/// DAG in topological order. Provides exact values, Jacobians, and
/// weight-contracted Hessians sum_i w_i * hess(f_i).
class Function {
 public:
  Function() = default;

  /// Freezes `outputs` of a builder graph. Unreachable nodes are dropped;
  /// node order is preserved (hence stays topological).
  Function(const GraphBuilder& gb, const std::vector<Sym>& outputs) {
    n_in_ = gb.num_inputs();
    groups_ = gb.groups();
    const auto& src = gb.nodes();
    std::vector<int> keep(src.size(), -1);
    std::vector<char> mark(src.size(), 0);
    std::vector<int> stack;
    for (const Sym& s : outputs) {
      if (s.builder() != &gb) throw std::logic_error("Function: output from foreign builder");
      stack.push_back(s.id());
    }
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      if (mark[id]) continue;
      mark[id] = 1;
      if (src[id].a >= 0) stack.push_back(src[id].a);
      if (src[id].b >= 0) stack.push_back(src[id].b);
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (!mark[i]) continue;
      keep[i] = static_cast<int>(nodes_.size());
      detail::Node n = src[i];
      if (n.a >= 0) n.a = keep[n.a];
      if (n.b >= 0) n.b = keep[n.b];
      nodes_.push_back(n);
    }
    outputs_.reserve(outputs.size());
    for (const Sym& s : outputs) outputs_.push_back(keep[s.id()]);
  }

  int n_in() const { return n_in_; }
  int n_out() const { return static_cast<int>(outputs_.size()); }
  std::size_t n_nodes() const { return nodes_.size(); }
  const std::vector<std::pair<std::string, int>>& input_groups() const { return groups_; }

  /// Splices this function into another builder graph, substituting `args`
  /// for its inputs. Used to compose models (integrator unrolling, cost
  /// rotation) while keeping derivatives exact.
  std::vector<Sym> inline_into(GraphBuilder& gb, const std::vector<Sym>& args) const {
    if (static_cast<int>(args.size()) != n_in_)
      throw std::invalid_argument("inline_into: argument count mismatch");
    std::vector<int> map(nodes_.size(), -1);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const detail::Node& n = nodes_[i];
      switch (n.op) {
        case detail::Op::Const: map[i] = gb.constant(n.c).id(); break;
        case detail::Op::Var: map[i] = args[static_cast<int>(n.c)].id(); break;
        default: {
          Sym a(&gb, map[n.a]);
          if (n.b >= 0) {
            map[i] = gb.binary(n.op, a, Sym(&gb, map[n.b])).id();
          } else if (n.op == detail::Op::Pow) {
            map[i] = gb.pow(a, n.c).id();
          } else {
            map[i] = gb.unary(n.op, a).id();
          }
        }
      }
    }
    std::vector<Sym> out;
    out.reserve(outputs_.size());
    for (int o : outputs_) out.emplace_back(&gb, map[o]);
    return out;
  }

  void eval(const Eigen::Ref<const Vec>& x, Eigen::Ref<Vec> y, EvalWorkspace& ws) const {
    check_input(x);
    forward_values(x, ws);
    for (int i = 0; i < n_out(); ++i) y[i] = ws.val[outputs_[i]];
  }

  Vec eval(const Eigen::Ref<const Vec>& x) const {
    EvalWorkspace ws;
    Vec y(n_out());
    eval(x, y, ws);
    return y;
  }

  /// Exact Jacobian d out / d in, one forward sweep with a full tangent block.
  void jacobian(const Eigen::Ref<const Vec>& x, Mat& J, EvalWorkspace& ws) const {
    check_input(x);
    forward_values_and_tangents(x, ws);
    J.resize(n_out(), n_in_);
    for (int i = 0; i < n_out(); ++i) J.row(i) = ws.dot.row(outputs_[i]);
  }

  Mat jacobian(const Eigen::Ref<const Vec>& x) const {
    EvalWorkspace ws;
    Mat J;
    jacobian(x, J, ws);
    return J;
  }

  /// Value + Jacobian in one sweep (the hot path of relinearization).
  void eval_with_jacobian(const Eigen::Ref<const Vec>& x, Eigen::Ref<Vec> y, Mat& J,
                          EvalWorkspace& ws) const {
    check_input(x);
    forward_values_and_tangents(x, ws);
    J.resize(n_out(), n_in_);
    for (int i = 0; i < n_out(); ++i) {
      y[i] = ws.val[outputs_[i]];
      J.row(i) = ws.dot.row(outputs_[i]);
    }
  }

  /// sum_i w_i * hess(f_i)(x), exact, via forward-over-reverse. The raw
  /// result is symmetric up to roundoff; `asym` (if given) receives the
  /// max absolute asymmetry before symmetrization.
  void weighted_hessian(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& w, Mat& H,
                        EvalWorkspace& ws, double* asym = nullptr) const {
    check_input(x);
    if (w.size() != n_out()) throw std::invalid_argument("weighted_hessian: weight dimension");
    forward_values_and_tangents(x, ws);
    const int nn = static_cast<int>(nodes_.size());
    ws.bar.setZero(nn);
    ws.bdot.setZero(nn, n_in_);
    for (int i = 0; i < n_out(); ++i) ws.bar[outputs_[i]] += w[i];
    reverse_sweep(ws);
    H.setZero(n_in_, n_in_);  // inputs absent from the graph keep zero rows
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == detail::Op::Var) H.row(static_cast<int>(nodes_[i].c)) = ws.bdot.row(i);
    }
    double a = (H - H.transpose()).cwiseAbs().maxCoeff();
    if (asym) *asym = a;
    H = 0.5 * (H + H.transpose()).eval();
  }

  Mat weighted_hessian(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& w) const {
    EvalWorkspace ws;
    Mat H;
    weighted_hessian(x, w, H, ws);
    return H;
  }

  /// Gradient of w'f(x) (reverse sweep only).
  void weighted_gradient(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& w,
                         Eigen::Ref<Vec> g, EvalWorkspace& ws) const {
    check_input(x);
    forward_values(x, ws);
    const int nn = static_cast<int>(nodes_.size());
    ws.bar.setZero(nn);
    for (int i = 0; i < n_out(); ++i) ws.bar[outputs_[i]] += w[i];
    reverse_values_only(ws);
    g.setZero();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == detail::Op::Var) g[static_cast<int>(nodes_[i].c)] = ws.bar[i];
    }
  }

 private:
  void check_input(const Eigen::Ref<const Vec>& x) const {
    if (x.size() != n_in_)
      throw std::invalid_argument("Function: expected input of dimension " +
                                  std::to_string(n_in_) + ", got " + std::to_string(x.size()));
  }

  void forward_values(const Eigen::Ref<const Vec>& x, EvalWorkspace& ws) const {
    const int nn = static_cast<int>(nodes_.size());
    ws.val.resize(nn);
    for (int i = 0; i < nn; ++i) {
      const detail::Node& n = nodes_[i];
      double v = 0;
      switch (n.op) {
        case detail::Op::Const: v = n.c; break;
        case detail::Op::Var: v = x[static_cast<int>(n.c)]; break;
        case detail::Op::Add: v = ws.val[n.a] + ws.val[n.b]; break;
        case detail::Op::Sub: v = ws.val[n.a] - ws.val[n.b]; break;
        case detail::Op::Mul: v = ws.val[n.a] * ws.val[n.b]; break;
        case detail::Op::Div:
          if (std::abs(ws.val[n.b]) < kDivTol) throw DomainError("division by zero", i);
          v = ws.val[n.a] / ws.val[n.b];
          break;
        case detail::Op::Neg: v = -ws.val[n.a]; break;
        case detail::Op::Sin: v = std::sin(ws.val[n.a]); break;
        case detail::Op::Cos: v = std::cos(ws.val[n.a]); break;
        case detail::Op::Tan:
          if (std::abs(std::cos(ws.val[n.a])) < kTanTol)
            throw DomainError("tan evaluated at a pole", i);
          v = std::tan(ws.val[n.a]);
          break;
        case detail::Op::Exp: v = std::exp(ws.val[n.a]); break;
        case detail::Op::Pow: {
          double base = ws.val[n.a];
          if (base < 0.0 && n.c != std::rint(n.c))
            throw DomainError("non-integer power of negative base", i);
          if (base == 0.0 && n.c < 0.0) throw DomainError("negative power of zero", i);
          v = std::pow(base, n.c);
          break;
        }
      }
      ws.val[i] = v;
    }
  }

  void forward_values_and_tangents(const Eigen::Ref<const Vec>& x, EvalWorkspace& ws) const {
    forward_values(x, ws);
    const int nn = static_cast<int>(nodes_.size());
    ws.dot.setZero(nn, n_in_);
    for (int i = 0; i < nn; ++i) {
      const detail::Node& n = nodes_[i];
      auto d = ws.dot.row(i);
      switch (n.op) {
        case detail::Op::Const: break;
        case detail::Op::Var: d[static_cast<int>(n.c)] = 1.0; break;
        case detail::Op::Add: d = ws.dot.row(n.a) + ws.dot.row(n.b); break;
        case detail::Op::Sub: d = ws.dot.row(n.a) - ws.dot.row(n.b); break;
        case detail::Op::Mul:
          d = ws.val[n.b] * ws.dot.row(n.a) + ws.val[n.a] * ws.dot.row(n.b);
          break;
        case detail::Op::Div:
          d = (ws.dot.row(n.a) - ws.val[i] * ws.dot.row(n.b)) / ws.val[n.b];
          break;
        case detail::Op::Neg: d = -ws.dot.row(n.a); break;
        case detail::Op::Sin: d = std::cos(ws.val[n.a]) * ws.dot.row(n.a); break;
        case detail::Op::Cos: d = -std::sin(ws.val[n.a]) * ws.dot.row(n.a); break;
        case detail::Op::Tan: d = (1.0 + ws.val[i] * ws.val[i]) * ws.dot.row(n.a); break;
        case detail::Op::Exp: d = ws.val[i] * ws.dot.row(n.a); break;
        case detail::Op::Pow:
          d = (n.c * std::pow(ws.val[n.a], n.c - 1.0)) * ws.dot.row(n.a);
          break;
      }
    }
  }

  // Adjoint sweep plus its exact directional derivative: bar[] accumulates
  // d(w'f)/d(node), bdot[] the forward tangents of bar[]. Rows of bdot at
  // the Var nodes assemble the weighted Hessian.
  void reverse_sweep(EvalWorkspace& ws) const {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      const detail::Node& n = nodes_[i];
      const double vb = ws.bar[i];
      const auto vbd = ws.bdot.row(i);
      switch (n.op) {
        case detail::Op::Const:
        case detail::Op::Var: break;
        case detail::Op::Add:
          ws.bar[n.a] += vb;
          ws.bdot.row(n.a) += vbd;
          ws.bar[n.b] += vb;
          ws.bdot.row(n.b) += vbd;
          break;
        case detail::Op::Sub:
          ws.bar[n.a] += vb;
          ws.bdot.row(n.a) += vbd;
          ws.bar[n.b] -= vb;
          ws.bdot.row(n.b) -= vbd;
          break;
        case detail::Op::Mul:
          ws.bar[n.a] += vb * ws.val[n.b];
          ws.bdot.row(n.a) += ws.val[n.b] * vbd + vb * ws.dot.row(n.b);
          ws.bar[n.b] += vb * ws.val[n.a];
          ws.bdot.row(n.b) += ws.val[n.a] * vbd + vb * ws.dot.row(n.a);
          break;
        case detail::Op::Div: {
          const double inv = 1.0 / ws.val[n.b];
          const double v = ws.val[i];  // a/b
          // d(a) gets vb/b ; d(b) gets -vb*v/b
          ws.bar[n.a] += vb * inv;
          ws.bdot.row(n.a) += inv * vbd - (vb * inv * inv) * ws.dot.row(n.b);
          ws.bar[n.b] -= vb * v * inv;
          ws.bdot.row(n.b) -= (v * inv) * vbd + (vb * inv) * (ws.dot.row(n.a) - v * ws.dot.row(n.b)) * inv +
                              vb * v * (-inv * inv) * ws.dot.row(n.b);
          break;
        }
        case detail::Op::Neg:
          ws.bar[n.a] -= vb;
          ws.bdot.row(n.a) -= vbd;
          break;
        case detail::Op::Sin: {
          const double ca = std::cos(ws.val[n.a]);
          const double sa = std::sin(ws.val[n.a]);
          ws.bar[n.a] += vb * ca;
          ws.bdot.row(n.a) += ca * vbd - (vb * sa) * ws.dot.row(n.a);
          break;
        }
        case detail::Op::Cos: {
          const double ca = std::cos(ws.val[n.a]);
          const double sa = std::sin(ws.val[n.a]);
          ws.bar[n.a] -= vb * sa;
          ws.bdot.row(n.a) -= sa * vbd + (vb * ca) * ws.dot.row(n.a);
          break;
        }
        case detail::Op::Tan: {
          const double t = ws.val[i];
          const double sec2 = 1.0 + t * t;
          ws.bar[n.a] += vb * sec2;
          ws.bdot.row(n.a) += sec2 * vbd + (vb * 2.0 * t * sec2) * ws.dot.row(n.a);
          break;
        }
        case detail::Op::Exp: {
          const double v = ws.val[i];
          ws.bar[n.a] += vb * v;
          ws.bdot.row(n.a) += v * vbd + (vb * v) * ws.dot.row(n.a);
          break;
        }
        case detail::Op::Pow: {
          const double a = ws.val[n.a];
          const double d1 = n.c * std::pow(a, n.c - 1.0);
          const double d2 = n.c * (n.c - 1.0) * std::pow(a, n.c - 2.0);
          ws.bar[n.a] += vb * d1;
          ws.bdot.row(n.a) += d1 * vbd + (vb * d2) * ws.dot.row(n.a);
          break;
        }
      }
    }
  }

  void reverse_values_only(EvalWorkspace& ws) const {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      const detail::Node& n = nodes_[i];
      const double vb = ws.bar[i];
      if (vb == 0.0) continue;
      switch (n.op) {
        case detail::Op::Const:
        case detail::Op::Var: break;
        case detail::Op::Add: ws.bar[n.a] += vb; ws.bar[n.b] += vb; break;
        case detail::Op::Sub: ws.bar[n.a] += vb; ws.bar[n.b] -= vb; break;
        case detail::Op::Mul: ws.bar[n.a] += vb * ws.val[n.b]; ws.bar[n.b] += vb * ws.val[n.a]; break;
        case detail::Op::Div: {
          const double inv = 1.0 / ws.val[n.b];
          ws.bar[n.a] += vb * inv;
          ws.bar[n.b] -= vb * ws.val[i] * inv;
          break;
        }
        case detail::Op::Neg: ws.bar[n.a] -= vb; break;
        case detail::Op::Sin: ws.bar[n.a] += vb * std::cos(ws.val[n.a]); break;
        case detail::Op::Cos: ws.bar[n.a] -= vb * std::sin(ws.val[n.a]); break;
        case detail::Op::Tan: ws.bar[n.a] += vb * (1.0 + ws.val[i] * ws.val[i]); break;
        case detail::Op::Exp: ws.bar[n.a] += vb * ws.val[i]; break;
        case detail::Op::Pow: ws.bar[n.a] += vb * n.c * std::pow(ws.val[n.a], n.c - 1.0); break;
      }
    }
  }

  static constexpr double kDivTol = 1e-300;
  static constexpr double kTanTol = 1e-12;

  std::vector<detail::Node> nodes_;
  std::vector<int> outputs_;
  std::vector<std::pair<std::string, int>> groups_;
  int n_in_{0};
};

}  // namespace enmpc

#endif  // ENMPC_EXPR_HPP_
