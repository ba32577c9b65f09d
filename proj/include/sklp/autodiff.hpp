#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every intermediate produced by the op functions below.
// Values are computed eagerly; `backward` walks the tape in reverse and
// accumulates adjoints into every node that requires a gradient. Leaves
// bound to external storage (model parameters) are referenced, not copied,
// so the storage must outlive the graph.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sklp::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, Var)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var constant(Matrix value, std::string label = "const");
  /// Leaf that reads `*storage` in place. With `track` it collects a gradient.
  Var leaf(const Matrix* storage, std::string label, bool track = true);

  /// Records the output of an op. `backward` may be empty when no input
  /// requires a gradient.
  Var emit(Matrix value, std::initializer_list<Var> inputs, Backward backward, const char* op);
  Var emit(Matrix value, const std::vector<Var>& inputs, Backward backward, const char* op);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const std::string& label(Var v) const { return nodes_[v.id].label; }
  std::size_t size() const { return nodes_.size(); }

  /// Adjoint buffer of `v`, zero-initialised on first access.
  Matrix& grad(Var v);
  /// Adjoint of `v` after backward; zeros when nothing flowed into it.
  Matrix grad_or_zero(Var v) const;

  /// Seeds d(scalar)/d(scalar) = 1 and propagates.
  void backward(Var scalar);

  /// Label of the first node holding a NaN or Inf, if any.
  std::optional<std::string> first_non_finite() const;

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    std::string label;
  };
  std::vector<Node> nodes_;
};

// ---- ops -----------------------------------------------------------------

Var matmul(Graph& g, Var a, Var b);
/// a · bᵀ
Var matmul_nt(Graph& g, Var a, Var b);
Var add(Graph& g, Var a, Var b);
/// Adds a 1×n row to every row of a.
Var add_row(Graph& g, Var a, Var row);
Var scale(Graph& g, Var a, double s);
Var gelu(Graph& g, Var a);
/// Row-wise layer normalisation with 1×n gain and bias.
Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise softmax. Columns whose `key_valid` flag is 0 get probability 0.
Var softmax_rows(Graph& g, Var x, std::span<const char> key_valid = {});
Var slice_cols(Graph& g, Var a, Eigen::Index begin, Eigen::Index count);
Var concat_cols(Graph& g, const std::vector<Var>& parts);
Var slice_rows(Graph& g, Var a, Eigen::Index begin, Eigen::Index count);
Var concat_rows(Graph& g, const std::vector<Var>& parts);
Var gather_rows(Graph& g, Var table, std::span<const int> rows);
Var mean_rows(Graph& g, Var a);
Var l2_normalize_rows(Graph& g, Var a);
/// Mean over rows of −log softmax(logits_r)[target_r].
Var cross_entropy_rows(Graph& g, Var logits, std::span<const int> targets);
/// Mean binary cross-entropy of an n×1 logit column against 0/1 labels.
Var bce_with_logits(Graph& g, Var logits, std::span<const double> labels);
/// Σ w_k · s_k over 1×1 inputs.
Var weighted_sum(Graph& g, const std::vector<Var>& scalars, const std::vector<double>& weights);
/// ½‖a‖²_F
Var half_squared_norm(Graph& g, Var a);

}  // namespace sklp::ad
