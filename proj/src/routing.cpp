#include "ecdlm/routing.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ecdlm/error.h"

namespace ecdlm {

ScoreMatrix::ScoreMatrix(RowMatrix scores) : scores_(std::move(scores)) {
  if (scores_.rows() < 1 || scores_.cols() < 1) {
    throw Error(ErrorKind::kInvalidInput, "score matrix needs N >= 1 and E >= 1");
  }
  if (!scores_.allFinite()) {
    throw Error(ErrorKind::kInvalidInput, "score matrix contains non-finite entries");
  }
}

namespace {

RowMatrix from_row_major(std::size_t n, std::size_t e, const std::vector<double>& values) {
  if (values.size() != n * e) {
    throw Error(ErrorKind::kInvalidInput, "score buffer size does not match N x E");
  }
  RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(e));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

// Indices of the `count` largest values of `value(i)` over [0, n), ordered by
// descending value and ascending index on ties.
template <typename ValueFn>
std::vector<std::size_t> top_indices(std::size_t n, std::size_t count, ValueFn value) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    const double va = value(a);
    const double vb = value(b);
    return va > vb || (va == vb && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                    better);
  idx.resize(count);
  return idx;
}

void finalize(RoutingAssignment& a, std::size_t n_tokens, std::size_t n_experts) {
  std::sort(a.pairs.begin(), a.pairs.end(), [](const RoutedPair& x, const RoutedPair& y) {
    return x.token != y.token ? x.token < y.token : x.expert < y.expert;
  });
  a.per_expert_load.assign(n_experts, 0);
  std::vector<bool> covered(n_tokens, false);
  for (const auto& p : a.pairs) {
    ++a.per_expert_load[p.expert];
    covered[p.token] = true;
  }
  if (a.requested_load.empty()) a.requested_load = a.per_expert_load;
  a.dropped_tokens.clear();
  for (std::size_t i = 0; i < n_tokens; ++i) {
    if (!covered[i]) a.dropped_tokens.push_back(i);
  }
}

std::string format_real(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

ScoreMatrix::ScoreMatrix(std::size_t n_tokens, std::size_t n_experts, std::vector<double> row_major)
    : ScoreMatrix(from_row_major(n_tokens, n_experts, row_major)) {}

void TcConfig::validate(std::size_t n_experts) const {
  if (k < 1 || static_cast<std::size_t>(k) > n_experts) {
    throw Error(ErrorKind::kInvalidConfig,
                "top-k must satisfy 1 <= k <= E (k=" + std::to_string(k) +
                    ", E=" + std::to_string(n_experts) + ")");
  }
  if (capacity_factor && !(*capacity_factor >= 1.0)) {
    throw Error(ErrorKind::kInvalidConfig, "capacity factor must be >= 1");
  }
  if (balance == BalanceMode::kAuxLoss && !(aux_alpha > 0.0)) {
    throw Error(ErrorKind::kInvalidConfig, "aux-loss alpha must be > 0");
  }
  if (balance == BalanceMode::kLossFreeBias && !(bias_update_rate > 0.0)) {
    throw Error(ErrorKind::kInvalidConfig, "bias update rate must be > 0");
  }
}

std::string TcConfig::tag() const {
  std::string t = "tc(k=" + std::to_string(k);
  t += capacity_factor ? ",cf=" + format_real(*capacity_factor) : ",dropless";
  switch (balance) {
    case BalanceMode::kNone: break;
    case BalanceMode::kAuxLoss: t += ",aux=" + format_real(aux_alpha); break;
    case BalanceMode::kLossFreeBias: t += ",bias=" + format_real(bias_update_rate); break;
  }
  return t + ")";
}

void EcConfig::validate(std::size_t n_tokens) const {
  if (capacity < 1 || static_cast<std::size_t>(capacity) > n_tokens) {
    throw Error(ErrorKind::kInvalidConfig,
                "expert capacity must satisfy 1 <= c <= N (c=" + std::to_string(capacity) +
                    ", N=" + std::to_string(n_tokens) + ")");
  }
}

std::string EcConfig::tag() const { return "ec(c=" + std::to_string(capacity) + ")"; }

std::vector<std::size_t> RoutingAssignment::tokens_of_expert(std::size_t expert) const {
  std::vector<std::size_t> tokens;
  for (const auto& p : pairs) {
    if (p.expert == expert) tokens.push_back(p.token);
  }
  return tokens;
}

BiasState BiasState::zeros(std::size_t n_experts, double update_rate) {
  return BiasState{std::vector<double>(n_experts, 0.0), update_rate};
}

int tc_expert_capacity(int k, std::size_t n_tokens, std::size_t n_experts, double cf) {
  if (k < 1 || n_tokens < 1 || n_experts < 1 || !(cf > 0.0)) {
    throw Error(ErrorKind::kInvalidConfig, "capacity arguments must be positive");
  }
  // Exact for integral CF*k*N/E; the tiny slack keeps 2.0000000000000004 at 2.
  const double raw = cf * static_cast<double>(k) * static_cast<double>(n_tokens) /
                     static_cast<double>(n_experts);
  return static_cast<int>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

RowMatrix router_probabilities(const ScoreMatrix& scores) {
  const RowMatrix& s = scores.matrix();
  RowMatrix p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

RoutingAssignment route_tc(const ScoreMatrix& scores, const TcConfig& cfg, const BiasState* bias) {
  const std::size_t n = scores.n_tokens();
  const std::size_t e = scores.n_experts();
  cfg.validate(e);
  const bool use_bias = cfg.balance == BalanceMode::kLossFreeBias;
  if (use_bias && (bias == nullptr || bias->biases.size() != e)) {
    throw Error(ErrorKind::kInvalidConfig, "loss-free-bias routing needs a bias vector of length E");
  }

  RoutingAssignment out;
  out.policy_tag = cfg.tag();
  out.pairs.reserve(n * static_cast<std::size_t>(cfg.k));
  for (std::size_t i = 0; i < n; ++i) {
    auto chosen = top_indices(e, static_cast<std::size_t>(cfg.k), [&](std::size_t j) {
      return scores(i, j) + (use_bias ? bias->biases[j] : 0.0);
    });
    for (std::size_t j : chosen) out.pairs.push_back({i, j, 0.0});
  }

  if (cfg.capacity_factor) {
    const int cap = tc_expert_capacity(cfg.k, n, e, *cfg.capacity_factor);
    std::vector<std::vector<std::size_t>> by_expert(e);
    for (const auto& p : out.pairs) by_expert[p.expert].push_back(p.token);
    out.requested_load.assign(e, 0);
    for (std::size_t j = 0; j < e; ++j) out.requested_load[j] = static_cast<int>(by_expert[j].size());
    std::vector<RoutedPair> kept;
    kept.reserve(out.pairs.size());
    for (std::size_t j = 0; j < e; ++j) {
      auto& tokens = by_expert[j];
      // Overflow priority: highest raw score first, lowest token index on ties.
      std::stable_sort(tokens.begin(), tokens.end(), [&](std::size_t a, std::size_t b) {
        return scores(a, j) > scores(b, j);
      });
      const std::size_t keep = std::min(tokens.size(), static_cast<std::size_t>(cap));
      for (std::size_t r = 0; r < keep; ++r) kept.push_back({tokens[r], j, 0.0});
    }
    out.pairs = std::move(kept);
    out.expert_capacity = cap;
  }

  finalize(out, n, e);
  return compute_gates(scores, std::move(out), RoutingPolicy::kTokenChoice);
}

RoutingAssignment route_ec(const ScoreMatrix& scores, const EcConfig& cfg) {
  const std::size_t n = scores.n_tokens();
  const std::size_t e = scores.n_experts();
  cfg.validate(n);

  RoutingAssignment out;
  out.policy_tag = cfg.tag();
  out.pairs.reserve(e * static_cast<std::size_t>(cfg.capacity));
  out.expert_capacity = cfg.capacity;
  for (std::size_t j = 0; j < e; ++j) {
    auto chosen = top_indices(n, static_cast<std::size_t>(cfg.capacity),
                              [&](std::size_t i) { return scores(i, j); });
    for (std::size_t i : chosen) out.pairs.push_back({i, j, 0.0});
  }
  finalize(out, n, e);
  return compute_gates(scores, std::move(out), RoutingPolicy::kExpertChoice);
}

RoutingAssignment compute_gates(const ScoreMatrix& scores, RoutingAssignment assignment,
                                RoutingPolicy policy) {
  const std::size_t n = scores.n_tokens();
  const std::size_t e = scores.n_experts();
  if (assignment.per_expert_load.size() != e) {
    throw Error(ErrorKind::kInvalidInput, "assignment expert count does not match scores");
  }
  for (const auto& p : assignment.pairs) {
    if (p.token >= n || p.expert >= e) {
      throw Error(ErrorKind::kInvalidInput, "assignment pair outside the score matrix");
    }
  }

  if (policy == RoutingPolicy::kExpertChoice) {
    const RowMatrix probs = router_probabilities(scores);
    for (auto& p : assignment.pairs) p.gate = probs(p.token, p.expert);
    return assignment;
  }

  // Pairs are grouped by token, so each token's selected experts are contiguous.
  auto& pairs = assignment.pairs;
  std::size_t begin = 0;
  while (begin < pairs.size()) {
    std::size_t end = begin;
    while (end < pairs.size() && pairs[end].token == pairs[begin].token) ++end;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t q = begin; q < end; ++q) m = std::max(m, scores(pairs[q].token, pairs[q].expert));
    double z = 0.0;
    for (std::size_t q = begin; q < end; ++q) {
      pairs[q].gate = std::exp(scores(pairs[q].token, pairs[q].expert) - m);
      z += pairs[q].gate;
    }
    for (std::size_t q = begin; q < end; ++q) pairs[q].gate /= z;
    begin = end;
  }
  return assignment;
}

RowMatrix combine_outputs(const RoutingAssignment& assignment, const ExpertOutputs& expert_outputs,
                          const RowMatrix& token_inputs) {
  const Eigen::Index d = token_inputs.cols();
  RowMatrix y = RowMatrix::Zero(token_inputs.rows(), d);
  for (const auto& p : assignment.pairs) {
    if (static_cast<Eigen::Index>(p.token) >= token_inputs.rows()) {
      throw Error(ErrorKind::kInvalidInput, "pair token index exceeds the token matrix");
    }
    auto eit = expert_outputs.find(p.expert);
    if (eit == expert_outputs.end()) {
      throw Error(ErrorKind::kInconsistentAssignment,
                  "no outputs for expert " + std::to_string(p.expert));
    }
    auto tit = eit->second.find(p.token);
    if (tit == eit->second.end()) {
      throw Error(ErrorKind::kInconsistentAssignment,
                  "expert " + std::to_string(p.expert) + " has no output for token " +
                      std::to_string(p.token));
    }
    if (static_cast<Eigen::Index>(tit->second.size()) != d) {
      throw Error(ErrorKind::kInvalidInput, "expert output width does not match inputs");
    }
    for (Eigen::Index c = 0; c < d; ++c) y(p.token, c) += p.gate * tit->second[c];
  }
  return y;
}

double aux_load_balance_loss(const ScoreMatrix& scores, const RoutingAssignment& assignment,
                             double alpha) {
  const std::size_t n = scores.n_tokens();
  const std::size_t e = scores.n_experts();
  if (assignment.per_expert_load.size() != e) {
    throw Error(ErrorKind::kInvalidInput, "assignment expert count does not match scores");
  }
  const RowMatrix probs = router_probabilities(scores);
  std::vector<double> f(e, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    scores.matrix().row(static_cast<Eigen::Index>(i)).maxCoeff(&best);  // first max wins
    f[static_cast<std::size_t>(best)] += 1.0 / static_cast<double>(n);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < e; ++j) {
    sum += f[j] * probs.col(static_cast<Eigen::Index>(j)).mean();
  }
  return alpha * static_cast<double>(e) * sum;
}

BiasState loss_free_bias_update(BiasState bias, const std::vector<int>& loads) {
  if (loads.size() != bias.biases.size()) {
    throw Error(ErrorKind::kInvalidInput, "load vector length does not match bias vector");
  }
  // Compare in integer arithmetic: loads[j]*E vs total, so "exactly at mean" is exact.
  const long long total = std::accumulate(loads.begin(), loads.end(), 0LL);
  const long long e = static_cast<long long>(loads.size());
  for (std::size_t j = 0; j < loads.size(); ++j) {
    const long long scaled = static_cast<long long>(loads[j]) * e;
    if (scaled > total) {
      bias.biases[j] -= bias.update_rate;
    } else if (scaled < total) {
      bias.biases[j] += bias.update_rate;
    }
  }
  return bias;
}

LoadStats load_stats(const RoutingAssignment& assignment, std::size_t n_tokens,
                     std::size_t n_experts) {
  if (assignment.per_expert_load.size() != n_experts) {
    throw Error(ErrorKind::kInvalidInput, "assignment expert count mismatch");
  }
  LoadStats s;
  s.loads = assignment.per_expert_load;
  s.drop_ratio = n_tokens == 0 ? 0.0
                               : static_cast<double>(assignment.dropped_tokens.size()) /
                                     static_cast<double>(n_tokens);
  const double mean = std::accumulate(s.loads.begin(), s.loads.end(), 0.0) /
                      static_cast<double>(n_experts);
  if (mean > 0.0) {
    s.max_over_mean = *std::max_element(s.loads.begin(), s.loads.end()) / mean;
  }
  double var = 0.0;
  for (int l : s.loads) var += (l - mean) * (l - mean);
  s.load_std = std::sqrt(var / static_cast<double>(n_experts));
  return s;
}

ScoreMatrix example_6x3_scores() {
  return ScoreMatrix(6, 3,
                     {0.70, 0.20, 0.10,
                      0.20, 0.60, 0.20,
                      0.10, 0.80, 0.10,
                      0.30, 0.50, 0.20,
                      0.25, 0.45, 0.30,
                      0.10, 0.30, 0.60});
}

}  // namespace ecdlm
