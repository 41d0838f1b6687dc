#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph is a tape: every op appends a node holding its forward value and,
// when any input requires a gradient, a closure that pushes the output
// gradient back to its parents. Nodes are created in topological order, so
// backward() simply walks the tape in reverse.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace discon {

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorR = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixR<double>;
using RowVector = RowVectorR<double>;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Matrix& m);

class Graph;

// Handle to a node on a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  bool requires_grad() const;
};

class GradientMap {
 public:
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  const Matrix& operator[](Var v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Graph;
  std::unordered_map<int, Matrix> grads_;
};

class Graph {
 public:
  // Receives the gradient of the node being processed and accumulates into
  // the gradients of its parents.
  class GradSink {
   public:
    bool wants(std::size_t parent) const;
    Matrix& grad(std::size_t parent);
    // Accumulates g; the first contribution is assigned, skipping a zero fill.
    // g must not reference the parent's gradient buffer.
    template <typename Derived>
    void add(std::size_t parent, const Eigen::MatrixBase<Derived>& g) {
      if (!wants(parent)) return;
      if (Matrix* fresh = claim(parent)) {
        fresh->noalias() = g;
      } else {
        grad(parent).noalias() += g;
      }
    }

   private:
    friend class Graph;
    Matrix* claim(std::size_t parent);
    GradSink(Graph& g, std::span<const int> parents) : graph_(g), parents_(parents) {}
    Graph& graph_;
    std::span<const int> parents_;
  };

  using BackwardFn = std::function<void(const Matrix& out_grad, GradSink& sink)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  // Leaf viewing externally owned storage; `value` must outlive the graph.
  Var parameter(const Matrix& value, bool requires_grad);

  // Appends an op node. `backward` is dropped when no parent requires grad.
  Var record(std::string_view op, Matrix value, std::initializer_list<Var> parents,
             BackwardFn backward);
  Var record(std::string_view op, Matrix value, const std::vector<Var>& parents,
             BackwardFn backward);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  std::string_view op_name(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Gradients of a scalar loss w.r.t. every requires_grad leaf. Consumes the graph.
  GradientMap backward(Var loss);

 private:
  struct Node {
    std::string_view op;
    Matrix owned;
    const Matrix* external = nullptr;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<int> parents;
    BackwardFn backward;
    const Matrix& value() const { return external != nullptr ? *external : owned; }
  };

  void check_var(Var v) const;
  Var push(Node node);

  std::deque<Node> nodes_;
  std::vector<Matrix> grads_;
  std::vector<char> has_grad_;
  bool consumed_ = false;
};

// Differentiable ops. Inputs must live on the same graph. Row-broadcasting
// ops accept a 1 x k right operand against an n x k left operand.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);
Var gather_rows(Var a, std::span<const int> rows);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Index start, Index count);
std::vector<Var> split_cols(Var a, Index parts);
Var softmax(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var layer_norm(Var x, double eps = 1e-6);
Var gelu(Var a);
Var embedding(Var table, std::span<const int> ids);
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);
Var cross_entropy(Var logits, std::span<const int> targets);

// Multi-head scaled dot-product attention over `batch` independent sequences
// packed as rows [batch * seq_len, width]. `mask` is seq_len x seq_len and
// additive (0 to keep, a large negative value to block), or empty for full
// attention.
Var attention(Var q, Var k, Var v, Index seq_len, Index heads, const Matrix& mask);

// Row-wise softmax without a graph; shared by samplers.
Matrix softmax_rows(const Matrix& logits);

// Additive causal mask: position i may see j <= i.
Matrix causal_mask(Index seq_len);

inline constexpr double kMaskedLogit = -1e30;

}  // namespace discon
