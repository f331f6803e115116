#include "ecdlm/autograd.h"

#include <cmath>
#include <limits>
#include <memory>

#include "ecdlm/error.h"

namespace ecdlm::ad {

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
  Parameter* target = &p;
  nodes_.push_back(Node{p.value, Matrix(),
                        [target](Tape& t, Var self) { target->grad += t.grad(self); }, true});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (Var v : inputs) needs = needs || needs_grad(v);
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root, double seed) {
  if (value(root).size() != 1) {
    throw Error(ErrorKind::kInvalidInput, "backward root must be a scalar");
  }
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  if (!needs_grad(root)) return;
  grad(root)(0, 0) = seed;
  for (int i = root.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.backward) n.backward(*this, Var{i});
  }
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorKind::kInvalidInput, what);
}

std::uint64_t product_flops(Eigen::Index m, Eigen::Index k, Eigen::Index n) {
  return 2ULL * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
         static_cast<std::uint64_t>(n);
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  require(A.cols() == B.rows(), "matmul shape mismatch");
  t.add_flops(product_flops(A.rows(), A.cols(), B.cols()));
  Matrix out;
  out.noalias() = A * B;
  return t.push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  require(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
          "add shape mismatch");
  return t.push(t.value(a) + t.value(b), {a, b}, [a, b](Tape& t, Var self) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(self);
    if (t.needs_grad(b)) t.grad(b) += t.grad(self);
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.push(t.value(a) * s, {a}, [a, s](Tape& t, Var self) { t.grad(a) += s * t.grad(self); });
}

Var mul(Tape& t, Var a, Var b) {
  require(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
          "mul shape mismatch");
  return t.push(t.value(a).cwiseProduct(t.value(b)), {a, b}, [a, b](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(t.value(b));
    if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(t.value(a));
  });
}

Var silu(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Matrix out = x.cwiseProduct(sig);
  return t.push(std::move(out), {a}, [a, sig = std::move(sig)](Tape& t, Var self) {
    const auto x = t.value(a).array();
    const auto s = sig.array();
    t.grad(a).array() += t.grad(self).array() * s * (1.0 + x * (1.0 - s));
  });
}

Var gather_rows(Tape& t, Var table, std::vector<int> index) {
  const Matrix& T = t.value(table);
  Matrix out(static_cast<Eigen::Index>(index.size()), T.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < T.rows(), "gather index out of range");
    out.row(static_cast<Eigen::Index>(i)) = T.row(index[i]);
  }
  return t.push(std::move(out), {table}, [table, index = std::move(index)](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < index.size(); ++i) gt.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var scatter_rows(Tape& t, Var src, std::vector<int> index, Eigen::Index n_rows) {
  const Matrix& S = t.value(src);
  require(static_cast<Eigen::Index>(index.size()) == S.rows(), "scatter index length mismatch");
  Matrix out = Matrix::Zero(n_rows, S.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < n_rows, "scatter index out of range");
    out.row(index[i]) += S.row(static_cast<Eigen::Index>(i));
  }
  return t.push(std::move(out), {src}, [src, index = std::move(index)](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gs = t.grad(src);
    for (std::size_t i = 0; i < index.size(); ++i) gs.row(static_cast<Eigen::Index>(i)) += g.row(index[i]);
  });
}

Var row_scale(Tape& t, Var x, Var w) {
  const Matrix& X = t.value(x);
  const Matrix& W = t.value(w);
  require(W.rows() == X.rows() && W.cols() == 1, "row_scale weight must be rows x 1");
  Matrix out = X.array().colwise() * W.col(0).array();
  return t.push(std::move(out), {x, w}, [x, w](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(x)) t.grad(x).array() += g.array().colwise() * t.value(w).col(0).array();
    if (t.needs_grad(w)) t.grad(w).col(0) += g.cwiseProduct(t.value(x)).rowwise().sum();
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& X = t.value(x);
  const Matrix& G = t.value(gain);
  const Matrix& B = t.value(bias);
  require(G.rows() == 1 && G.cols() == X.cols() && B.rows() == 1 && B.cols() == X.cols(),
          "layer_norm parameter shape mismatch");
  const Eigen::Index d = X.cols();
  auto xhat = std::make_shared<Matrix>(X.rows(), d);
  auto rstd = std::make_shared<Eigen::VectorXd>(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double mean = X.row(i).mean();
    const double var = (X.row(i).array() - mean).square().mean();
    (*rstd)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (X.row(i).array() - mean) * (*rstd)(i);
  }
  Matrix out = (xhat->array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  return t.push(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, rstd](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(gain)) t.grad(gain).row(0) += g.cwiseProduct(*xhat).colwise().sum();
    if (t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
    if (t.needs_grad(x)) {
      const Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
      Matrix& gx = t.grad(x);
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
        gx.row(i).array() +=
            (*rstd)(i) * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
      }
    }
  });
}

Var row_softmax(Tape& t, Var x) {
  const Matrix& X = t.value(x);
  Matrix p(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    p.row(i) = (X.row(i).array() - X.row(i).maxCoeff()).exp();
    p.row(i) /= p.row(i).sum();
  }
  Var out = t.push(std::move(p), {x}, [x](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    const Matrix& P = t.value(self);
    const Eigen::VectorXd dot = g.cwiseProduct(P).rowwise().sum();
    t.grad(x).array() += P.array() * (g.colwise() - dot).array();
  });
  return out;
}

Var gather_elements(Tape& t, Var x, std::vector<std::pair<int, int>> at) {
  const Matrix& X = t.value(x);
  Matrix out(static_cast<Eigen::Index>(at.size()), 1);
  for (std::size_t i = 0; i < at.size(); ++i) {
    require(at[i].first >= 0 && at[i].first < X.rows() && at[i].second >= 0 &&
                at[i].second < X.cols(),
            "gather_elements index out of range");
    out(static_cast<Eigen::Index>(i), 0) = X(at[i].first, at[i].second);
  }
  return t.push(std::move(out), {x}, [x, at = std::move(at)](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (std::size_t i = 0; i < at.size(); ++i) {
      gx(at[i].first, at[i].second) += g(static_cast<Eigen::Index>(i), 0);
    }
  });
}

Var segment_softmax(Tape& t, Var x, std::vector<int> offsets) {
  const Matrix& X = t.value(x);
  require(X.cols() == 1 && !offsets.empty() && offsets.back() == X.rows(),
          "segment_softmax offsets do not cover the input");
  Matrix p(X.rows(), 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const int b = offsets[s], e = offsets[s + 1];
    if (b == e) continue;
    const double m = X.col(0).segment(b, e - b).maxCoeff();
    double z = 0.0;
    for (int i = b; i < e; ++i) z += (p(i, 0) = std::exp(X(i, 0) - m));
    for (int i = b; i < e; ++i) p(i, 0) /= z;
  }
  return t.push(std::move(p), {x}, [x, offsets = std::move(offsets)](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    const Matrix& P = t.value(self);
    Matrix& gx = t.grad(x);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const int b = offsets[s], e = offsets[s + 1];
      double dot = 0.0;
      for (int i = b; i < e; ++i) dot += g(i, 0) * P(i, 0);
      for (int i = b; i < e; ++i) gx(i, 0) += P(i, 0) * (g(i, 0) - dot);
    }
  });
}

Var attention(Tape& t, Var q, Var k, Var v, int n_seq, int seq_len, int n_heads, bool causal) {
  const Matrix& Q = t.value(q);
  const Matrix& K = t.value(k);
  const Matrix& V = t.value(v);
  require(Q.rows() == static_cast<Eigen::Index>(n_seq) * seq_len && K.rows() == Q.rows() &&
              V.rows() == Q.rows() && K.cols() == Q.cols() && V.cols() == Q.cols(),
          "attention shape mismatch");
  require(n_heads > 0 && Q.cols() % n_heads == 0, "hidden size not divisible by heads");
  const int dh = static_cast<int>(Q.cols()) / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index L = seq_len;

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(n_seq) * n_heads);
  Matrix out(Q.rows(), Q.cols());
  for (int s = 0; s < n_seq; ++s) {
    for (int h = 0; h < n_heads; ++h) {
      const auto Qh = Q.block(s * L, h * dh, L, dh);
      const auto Kh = K.block(s * L, h * dh, L, dh);
      const auto Vh = V.block(s * L, h * dh, L, dh);
      Matrix S = (Qh * Kh.transpose()) * inv_sqrt;
      if (causal) {
        for (Eigen::Index i = 0; i < L; ++i) {
          for (Eigen::Index j = i + 1; j < L; ++j) S(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
      for (Eigen::Index i = 0; i < L; ++i) {
        S.row(i) = (S.row(i).array() - S.row(i).maxCoeff()).exp();
        S.row(i) /= S.row(i).sum();
      }
      out.block(s * L, h * dh, L, dh).noalias() = S * Vh;
      (*probs)[static_cast<std::size_t>(s * n_heads + h)] = std::move(S);
    }
  }
  t.add_flops(2 * product_flops(L, dh, L) * static_cast<std::uint64_t>(n_seq * n_heads));

  return t.push(std::move(out), {q, k, v},
                [q, k, v, n_seq, n_heads, dh, L, inv_sqrt, probs](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    const Matrix& Q = t.value(q);
    const Matrix& K = t.value(k);
    const Matrix& V = t.value(v);
    for (int s = 0; s < n_seq; ++s) {
      for (int h = 0; h < n_heads; ++h) {
        const Matrix& P = (*probs)[static_cast<std::size_t>(s * n_heads + h)];
        const auto G = g.block(s * L, h * dh, L, dh);
        if (t.needs_grad(v)) t.grad(v).block(s * L, h * dh, L, dh).noalias() += P.transpose() * G;
        if (!t.needs_grad(q) && !t.needs_grad(k)) continue;
        const Matrix dP = G * V.block(s * L, h * dh, L, dh).transpose();
        const Eigen::VectorXd dot = dP.cwiseProduct(P).rowwise().sum();
        const Matrix dS = (P.array() * (dP.colwise() - dot).array()).matrix() * inv_sqrt;
        if (t.needs_grad(q)) {
          t.grad(q).block(s * L, h * dh, L, dh).noalias() += dS * K.block(s * L, h * dh, L, dh);
        }
        if (t.needs_grad(k)) {
          t.grad(k).block(s * L, h * dh, L, dh).noalias() +=
              dS.transpose() * Q.block(s * L, h * dh, L, dh);
        }
      }
    }
  });
}

Var masked_cross_entropy(Tape& t, Var logits, std::vector<int> rows, std::vector<int> targets) {
  if (rows.empty()) throw Error(ErrorKind::kUndefinedLoss, "no masked positions to score");
  require(rows.size() == targets.size(), "rows and targets differ in length");
  const Matrix& X = t.value(logits);
  auto probs = std::make_shared<Matrix>(static_cast<Eigen::Index>(rows.size()), X.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < X.rows() && targets[i] >= 0 && targets[i] < X.cols(),
            "cross-entropy index out of range");
    const auto row = X.row(rows[i]);
    const double m = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - m).exp();
    const double z = e.sum();
    total += std::log(z) + m - row(targets[i]);
    probs->row(static_cast<Eigen::Index>(i)) = e / z;
  }
  const double n = static_cast<double>(rows.size());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), {logits},
                [logits, rows = std::move(rows), targets = std::move(targets), probs, n](
                    Tape& t, Var self) {
    const double g = t.grad(self)(0, 0) / n;
    Matrix& gx = t.grad(logits);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      gx.row(rows[i]) += g * probs->row(static_cast<Eigen::Index>(i));
      gx(rows[i], targets[i]) -= g;
    }
  });
}

Var column_mean(Tape& t, Var x) {
  const Matrix& X = t.value(x);
  const double n = static_cast<double>(X.rows());
  Matrix out = X.colwise().mean();
  return t.push(std::move(out), {x}, [x, n](Tape& t, Var self) {
    t.grad(x).rowwise() += t.grad(self).row(0) / n;
  });
}

Var dot_constant(Tape& t, Var x, Matrix weights) {
  const Matrix& X = t.value(x);
  require(X.rows() == weights.rows() && X.cols() == weights.cols(), "dot_constant shape mismatch");
  Matrix out(1, 1);
  out(0, 0) = X.cwiseProduct(weights).sum();
  return t.push(std::move(out), {x}, [x, w = std::move(weights)](Tape& t, Var self) {
    t.grad(x) += t.grad(self)(0, 0) * w;
  });
}

}  // namespace ecdlm::ad
