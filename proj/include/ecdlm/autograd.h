#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ecdlm/routing.h"

namespace ecdlm::ad {

using Matrix = RowMatrix;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(); }
};

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Wengert list for reverse-mode differentiation. Nodes are appended in
// evaluation order; backward() walks them in reverse.
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  Var constant(Matrix value);
  Var parameter(Parameter& p);

  // Appends a node computed from `inputs`. The backward closure reads
  // grad(self) and accumulates into the inputs that need gradients.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  Matrix& grad(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  double scalar(Var v) const { return value(v)(0, 0); }

  // Seeds d(root)/d(root) = seed and propagates to every parameter leaf.
  void backward(Var root, double seed = 1.0);

  // Multiply-add FLOPs (x2) of the matmul and attention products recorded.
  std::uint64_t matmul_flops() const { return flops_; }
  void add_flops(std::uint64_t f) { flops_ += f; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::uint64_t flops_ = 0;
};

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var mul(Tape& t, Var a, Var b);
Var silu(Tape& t, Var a);

// Rows of `table` at `index` (embedding lookup, token gather).
Var gather_rows(Tape& t, Var table, std::vector<int> index);
// Output has n_rows rows; row index[i] receives src row i (accumulating).
Var scatter_rows(Tape& t, Var src, std::vector<int> index, Eigen::Index n_rows);
// Multiplies row i of x by w(i, 0).
Var row_scale(Tape& t, Var x, Var w);

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
Var row_softmax(Tape& t, Var x);

// Picks x(row, col) for each (row, col) pair into a column vector.
Var gather_elements(Tape& t, Var x, std::vector<std::pair<int, int>> at);
// Softmax within consecutive segments of a column vector; offsets has
// n_segments + 1 entries.
Var segment_softmax(Tape& t, Var x, std::vector<int> offsets);

// Multi-head scaled dot-product attention over n_seq sequences of length
// seq_len stacked row-wise. Non-causal unless `causal` is set.
Var attention(Tape& t, Var q, Var k, Var v, int n_seq, int seq_len, int n_heads,
              bool causal = false);

// Mean over the listed rows of -log softmax(logits)[row, target].
Var masked_cross_entropy(Tape& t, Var logits, std::vector<int> rows, std::vector<int> targets);

// 1 x cols row of column means.
Var column_mean(Tape& t, Var x);
// Scalar sum(x .* weights) for a constant weight matrix.
Var dot_constant(Tape& t, Var x, Matrix weights);

}  // namespace ecdlm::ad
