#include "discon/numerics.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace discon {

namespace {

void check_finite(std::string_view op, const Matrix& m) {
  // x * 0 is 0 for finite x and NaN otherwise; the sum vectorizes cleanly.
  if (m.size() != 0 && !((m.array() * 0.0).sum() == 0.0)) {
    throw NumericError("non-finite output in op '" + std::string(op) + "'");
  }
}

[[noreturn]] void shape_mismatch(std::string_view op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                   shape_string(b));
}

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw std::invalid_argument("Var is not bound to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw std::invalid_argument("Vars belong to different graphs");
  return graph_of(a);
}

// b broadcasts over rows of a when it is a single row.
bool broadcastable(const Matrix& a, const Matrix& b) {
  return (a.rows() == b.rows() && a.cols() == b.cols()) || (b.rows() == 1 && a.cols() == b.cols());
}

}  // namespace

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

const Matrix& Var::value() const { return graph_of(*this).value(*this); }
bool Var::requires_grad() const { return graph_of(*this).requires_grad(*this); }

const Matrix& GradientMap::operator[](Var v) const {
  auto it = grads_.find(v.id);
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node");
  return it->second;
}

bool Graph::GradSink::wants(std::size_t parent) const {
  return graph_.nodes_[static_cast<std::size_t>(parents_[parent])].requires_grad;
}

Matrix& Graph::GradSink::grad(std::size_t parent) {
  const auto id = static_cast<std::size_t>(parents_[parent]);
  if (!graph_.has_grad_[id]) {
    const Matrix& v = graph_.nodes_[id].value();
    graph_.grads_[id] = Matrix::Zero(v.rows(), v.cols());
    graph_.has_grad_[id] = 1;
  }
  return graph_.grads_[id];
}

Matrix* Graph::GradSink::claim(std::size_t parent) {
  const auto id = static_cast<std::size_t>(parents_[parent]);
  if (graph_.has_grad_[id]) return nullptr;
  graph_.has_grad_[id] = 1;
  return &graph_.grads_[id];
}

void Graph::check_var(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::invalid_argument("Var does not belong to this graph");
  }
}

Var Graph::push(Node node) {
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Matrix value) {
  check_finite("constant", value);
  Node n;
  n.op = "constant";
  n.owned = std::move(value);
  n.is_leaf = true;
  return push(std::move(n));
}

Var Graph::variable(Matrix value) {
  check_finite("variable", value);
  Node n;
  n.op = "variable";
  n.owned = std::move(value);
  n.is_leaf = true;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::parameter(const Matrix& value, bool requires_grad) {
  Node n;
  n.op = "parameter";
  n.external = &value;
  n.is_leaf = true;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Graph::record(std::string_view op, Matrix value, std::initializer_list<Var> parents,
                  BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Graph::record(std::string_view op, Matrix value, const std::vector<Var>& parents,
                  BackwardFn backward) {
  check_finite(op, value);
  Node n;
  n.op = op;
  n.owned = std::move(value);
  n.parents.reserve(parents.size());
  for (Var p : parents) {
    check_var(p);
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Matrix& Graph::value(Var v) const {
  check_var(v);
  return nodes_[static_cast<std::size_t>(v.id)].value();
}

bool Graph::requires_grad(Var v) const {
  check_var(v);
  return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
}

std::string_view Graph::op_name(Var v) const {
  check_var(v);
  return nodes_[static_cast<std::size_t>(v.id)].op;
}

GradientMap Graph::backward(Var loss) {
  check_var(loss);
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(lv));
  }
  grads_.assign(nodes_.size(), Matrix());
  has_grad_.assign(nodes_.size(), 0);
  const auto root = static_cast<std::size_t>(loss.id);
  grads_[root] = Matrix::Ones(1, 1);
  has_grad_[root] = 1;

  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!has_grad_[i] || !n.backward) continue;
    check_finite(n.op, grads_[i]);
    GradSink sink(*this, n.parents);
    n.backward(grads_[i], sink);
    if (!n.is_leaf) {
      grads_[i] = Matrix();
      has_grad_[i] = 0;
    }
  }

  GradientMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.is_leaf || !n.requires_grad) continue;
    if (has_grad_[i]) {
      out.grads_.emplace(static_cast<int>(i), std::move(grads_[i]));
    } else {
      out.grads_.emplace(static_cast<int>(i), Matrix::Zero(n.value().rows(), n.value().cols()));
    }
  }
  grads_.clear();
  has_grad_.clear();
  consumed_ = true;
  return out;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av, bv);
  Matrix out = av * bv;
  return g.record("matmul", std::move(out), {a, b}, [a, b](const Matrix& go, Graph::GradSink& s) {
    if (s.wants(0)) s.add(0, go * b.value().transpose());
    if (s.wants(1)) s.add(1, a.value().transpose() * go);
  });
}

namespace {

Var add_impl(std::string_view op, Var a, Var b, double sign) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!broadcastable(av, bv)) shape_mismatch(op, av, bv);
  Matrix out = av;
  if (bv.rows() == av.rows()) {
    out += sign * bv;
  } else {
    out.rowwise() += sign * bv.row(0);
  }
  const bool bcast = bv.rows() != av.rows();
  return g.record(op, std::move(out), {a, b}, [bcast, sign](const Matrix& go, Graph::GradSink& s) {
    s.add(0, go);
    if (s.wants(1)) {
      if (bcast) {
        s.add(1, sign * go.colwise().sum());
      } else {
        s.add(1, sign * go);
      }
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return add_impl("add", a, b, 1.0); }
Var sub(Var a, Var b) { return add_impl("sub", a, b, -1.0); }

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!broadcastable(av, bv)) shape_mismatch("mul", av, bv);
  const bool bcast = bv.rows() != av.rows();
  Matrix out(av.rows(), av.cols());
  if (bcast) {
    out = av.array().rowwise() * bv.row(0).array();
  } else {
    out = av.cwiseProduct(bv);
  }
  return g.record("mul", std::move(out), {a, b}, [a, b, bcast](const Matrix& go, Graph::GradSink& s) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (s.wants(0)) {
      if (bcast) {
        s.grad(0).array() += go.array().rowwise() * bv.row(0).array();
      } else {
        s.add(0, go.cwiseProduct(bv));
      }
    }
    if (s.wants(1)) {
      if (bcast) {
        s.add(1, go.cwiseProduct(av).colwise().sum());
      } else {
        s.add(1, go.cwiseProduct(av));
      }
    }
  });
}

Var scale(Var a, double factor) {
  Graph& g = graph_of(a);
  Matrix out = a.value() * factor;
  return g.record("scale", std::move(out), {a}, [factor](const Matrix& go, Graph::GradSink& s) {
    s.add(0, go * factor);
  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  Matrix out = a.value().transpose();
  return g.record("transpose", std::move(out), {a}, [](const Matrix& go, Graph::GradSink& s) {
    s.add(0, go.transpose());
  });
}

namespace {

Var gather_impl(std::string_view op, Var a, std::span<const int> rows) {
  Graph& g = graph_of(a);
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows()) {
      throw std::out_of_range(std::string(op) + ": row index " + std::to_string(rows[i]) +
                              " out of range for " + shape_string(av));
    }
    out.row(static_cast<Index>(i)) = av.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return g.record(op, std::move(out), {a},
                  [idx = std::move(idx)](const Matrix& go, Graph::GradSink& s) {
                    if (!s.wants(0)) return;
                    Matrix& ga = s.grad(0);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      ga.row(idx[i]) += go.row(static_cast<Index>(i));
                    }
                  });
}

}  // namespace

Var gather_rows(Var a, std::span<const int> rows) { return gather_impl("gather_rows", a, rows); }
Var embedding(Var table, std::span<const int> ids) { return gather_impl("embedding", table, ids); }

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph& g = graph_of(parts.front());
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (Var p : parts) {
    graph_of(parts.front(), p);
    if (p.cols() != cols) shape_mismatch("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index r = 0;
  for (Var p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return g.record("concat_rows", std::move(out), parts,
                  [offsets = std::move(offsets)](const Matrix& go, Graph::GradSink& s) {
                    for (std::size_t i = 0; i < offsets.size(); ++i) {
                      if (!s.wants(i)) continue;
                      Matrix& gi = s.grad(i);
                      gi += go.middleRows(offsets[i], gi.rows());
                    }
                  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Graph& g = graph_of(parts.front());
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (Var p : parts) {
    graph_of(parts.front(), p);
    if (p.rows() != rows) shape_mismatch("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index c = 0;
  for (Var p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return g.record("concat_cols", std::move(out), parts,
                  [offsets = std::move(offsets)](const Matrix& go, Graph::GradSink& s) {
                    for (std::size_t i = 0; i < offsets.size(); ++i) {
                      if (!s.wants(i)) continue;
                      Matrix& gi = s.grad(i);
                      gi += go.middleCols(offsets[i], gi.cols());
                    }
                  });
}

Var slice_cols(Var a, Index start, Index count) {
  Graph& g = graph_of(a);
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + shape_string(av));
  }
  Matrix out = av.middleCols(start, count);
  return g.record("slice_cols", std::move(out), {a},
                  [start, count](const Matrix& go, Graph::GradSink& s) {
                    if (s.wants(0)) s.grad(0).middleCols(start, count) += go;
                  });
}

std::vector<Var> split_cols(Var a, Index parts) {
  if (parts <= 0 || a.cols() % parts != 0) {
    throw ShapeError("split_cols: cannot split " + shape_string(a.value()) + " into " +
                     std::to_string(parts) + " parts");
  }
  const Index w = a.cols() / parts;
  std::vector<Var> out;
  for (Index i = 0; i < parts; ++i) out.push_back(slice_cols(a, i * w, w));
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Var softmax(Var a) {
  Graph& g = graph_of(a);
  Matrix out = softmax_rows(a.value());
  Matrix y = out;
  return g.record("softmax", std::move(out), {a},
                  [y = std::move(y)](const Matrix& go, Graph::GradSink& s) {
                    if (!s.wants(0)) return;
                    const Eigen::VectorXd dot = go.cwiseProduct(y).rowwise().sum();
                    Matrix gx = go;
                    gx.colwise() -= dot;
                    s.add(0, gx.cwiseProduct(y));
                  });
}

namespace {

// Returns normalized rows and the per-row inverse standard deviations.
std::pair<Matrix, Eigen::VectorXd> normalize_rows(const Matrix& x, double eps) {
  const Index n = x.cols();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const auto centered = x.row(r).array() - mu;
    const double var = centered.square().sum() / static_cast<double>(n);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  return {std::move(xhat), std::move(inv_std)};
}

Matrix layer_norm_input_grad(const Matrix& dxhat, const Matrix& xhat, const Eigen::VectorXd& inv_std) {
  const double n = static_cast<double>(xhat.cols());
  Matrix dx(xhat.rows(), xhat.cols());
  for (Index r = 0; r < xhat.rows(); ++r) {
    const double m1 = dxhat.row(r).sum() / n;
    const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
    dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

}  // namespace

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Matrix& xv = x.value();
  if (gamma.rows() != 1 || gamma.cols() != xv.cols()) shape_mismatch("layer_norm", xv, gamma.value());
  if (beta.rows() != 1 || beta.cols() != xv.cols()) shape_mismatch("layer_norm", xv, beta.value());
  auto [xhat, inv_std] = normalize_rows(xv, eps);
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return g.record("layer_norm", std::move(out), {x, gamma, beta},
                  [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      const Matrix& go, Graph::GradSink& s) {
                    if (s.wants(0)) {
                      const Matrix dxhat = go.array().rowwise() * gamma.value().row(0).array();
                      s.add(0, layer_norm_input_grad(dxhat, xhat, inv_std));
                    }
                    if (s.wants(1)) s.add(1, go.cwiseProduct(xhat).colwise().sum());
                    if (s.wants(2)) s.add(2, go.colwise().sum());
                  });
}

Var layer_norm(Var x, double eps) {
  Graph& g = graph_of(x);
  auto [xhat, inv_std] = normalize_rows(x.value(), eps);
  Matrix out = xhat;
  return g.record("layer_norm", std::move(out), {x},
                  [xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      const Matrix& go, Graph::GradSink& s) {
                    if (s.wants(0)) s.add(0, layer_norm_input_grad(go, xhat, inv_std));
                  });
}

Var gelu(Var a) {
  Graph& g = graph_of(a);
  const Matrix& av = a.value();
  Matrix out = av.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); });
  return g.record("gelu", std::move(out), {a}, [a](const Matrix& go, Graph::GradSink& s) {
    if (!s.wants(0)) return;
    const Matrix d = a.value().unaryExpr([](double x) {
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
    });
    s.add(0, go.cwiseProduct(d));
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record("sum", std::move(out), {a}, [](const Matrix& go, Graph::GradSink& s) {
    if (s.wants(0)) s.grad(0).array() += go(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty input");
  Graph& g = graph_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return g.record("mean", std::move(out), {a}, [n](const Matrix& go, Graph::GradSink& s) {
    if (s.wants(0)) s.grad(0).array() += go(0, 0) / n;
  });
}

Var mse(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_mismatch("mse", av, bv);
  if (av.size() == 0) throw ShapeError("mse: empty input");
  const double n = static_cast<double>(av.size());
  Matrix diff = av - bv;
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return g.record("mse", std::move(out), {a, b},
                  [diff = std::move(diff), n](const Matrix& go, Graph::GradSink& s) {
                    const double c = 2.0 * go(0, 0) / n;
                    if (s.wants(0)) s.add(0, c * diff);
                    if (s.wants(1)) s.add(1, -(c * diff));
                  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Graph& g = graph_of(logits);
  const Matrix& lv = logits.value();
  if (static_cast<Index>(targets.size()) != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(lv));
  }
  if (lv.rows() == 0) throw ShapeError("cross_entropy: empty input");
  Matrix probs = softmax_rows(lv);
  double total = 0.0;
  for (Index r = 0; r < lv.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= lv.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                              std::to_string(lv.cols()) + ")");
    }
    const double m = lv.row(r).maxCoeff();
    const double lse = m + std::log((lv.row(r).array() - m).exp().sum());
    total += lse - lv(r, t);
  }
  const double n = static_cast<double>(lv.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  std::vector<int> tgt(targets.begin(), targets.end());
  return g.record("cross_entropy", std::move(out), {logits},
                  [probs = std::move(probs), tgt = std::move(tgt), n](const Matrix& go,
                                                                      Graph::GradSink& s) {
                    if (!s.wants(0)) return;
                    Matrix d = probs;
                    for (std::size_t r = 0; r < tgt.size(); ++r) d(static_cast<Index>(r), tgt[r]) -= 1.0;
                    s.add(0, (go(0, 0) / n) * d);
                  });
}

Matrix causal_mask(Index seq_len) {
  Matrix m = Matrix::Zero(seq_len, seq_len);
  for (Index i = 0; i < seq_len; ++i) {
    for (Index j = i + 1; j < seq_len; ++j) m(i, j) = kMaskedLogit;
  }
  return m;
}

Var attention(Var q, Var k, Var v, Index seq_len, Index heads, const Matrix& mask) {
  Graph& g = graph_of(q, k);
  graph_of(q, v);
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  if (qv.rows() != kv.rows() || qv.cols() != kv.cols()) shape_mismatch("attention", qv, kv);
  if (qv.rows() != vv.rows() || qv.cols() != vv.cols()) shape_mismatch("attention", qv, vv);
  if (seq_len <= 0 || qv.rows() % seq_len != 0) {
    throw ShapeError("attention: " + std::to_string(qv.rows()) + " rows not divisible by seq_len " +
                     std::to_string(seq_len));
  }
  if (heads <= 0 || qv.cols() % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(qv.cols()) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const bool masked = mask.size() != 0;
  if (masked && (mask.rows() != seq_len || mask.cols() != seq_len)) {
    throw ShapeError("attention: mask " + shape_string(mask) + " does not match seq_len " +
                     std::to_string(seq_len));
  }
  const Index batch = qv.rows() / seq_len;
  const Index dh = qv.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(qv.rows(), qv.cols());
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
      const auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
      const auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
      Matrix scores = (qb * kb.transpose()) * inv_sqrt;
      if (masked) scores += mask;
      Matrix p = softmax_rows(scores);
      out.block(b * seq_len, h * dh, seq_len, dh).noalias() = p * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return g.record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, seq_len, heads, batch, dh, inv_sqrt, probs = std::move(probs)](
          const Matrix& go, Graph::GradSink& s) {
        const Matrix& qv = q.value();
        const Matrix& kv = k.value();
        const Matrix& vv = v.value();
        const bool wq = s.wants(0);
        const bool wk = s.wants(1);
        const bool wv = s.wants(2);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto gob = go.block(b * seq_len, h * dh, seq_len, dh);
            if (wv) s.grad(2).block(b * seq_len, h * dh, seq_len, dh).noalias() += p.transpose() * gob;
            if (!wq && !wk) continue;
            const Matrix dp = gob * vv.block(b * seq_len, h * dh, seq_len, dh).transpose();
            const Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix ds = dp;
            ds.colwise() -= dot;
            ds = ds.cwiseProduct(p) * inv_sqrt;
            if (wq) {
              s.grad(0).block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                  ds * kv.block(b * seq_len, h * dh, seq_len, dh);
            }
            if (wk) {
              s.grad(1).block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                  ds.transpose() * qv.block(b * seq_len, h * dh, seq_len, dh);
            }
          }
        }
      });
}

}  // namespace discon
