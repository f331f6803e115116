#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ecdlm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Router affinities S (N tokens x E experts). Construction rejects empty
// shapes and non-finite entries, so every routing policy can assume both.
class ScoreMatrix {
 public:
  explicit ScoreMatrix(RowMatrix scores);
  ScoreMatrix(std::size_t n_tokens, std::size_t n_experts, std::vector<double> row_major);

  std::size_t n_tokens() const { return static_cast<std::size_t>(scores_.rows()); }
  std::size_t n_experts() const { return static_cast<std::size_t>(scores_.cols()); }
  double operator()(std::size_t token, std::size_t expert) const { return scores_(token, expert); }
  const RowMatrix& matrix() const { return scores_; }

 private:
  RowMatrix scores_;
};

enum class RoutingPolicy { kTokenChoice, kExpertChoice };

enum class BalanceMode { kNone, kAuxLoss, kLossFreeBias };

struct TcConfig {
  int k = 1;
  // Unset means dropless; otherwise each expert keeps at most ceil(CF*kN/E).
  std::optional<double> capacity_factor;
  BalanceMode balance = BalanceMode::kNone;
  double aux_alpha = 0.01;
  double bias_update_rate = 0.001;

  void validate(std::size_t n_experts) const;
  std::string tag() const;
};

struct EcConfig {
  int capacity = 1;

  void validate(std::size_t n_tokens) const;
  std::string tag() const;
};

struct RoutedPair {
  std::size_t token = 0;
  std::size_t expert = 0;
  double gate = 0.0;

  friend bool operator==(const RoutedPair&, const RoutedPair&) = default;
};

// Pairs are kept sorted by (token, expert); dropped_tokens is sorted.
struct RoutingAssignment {
  std::vector<RoutedPair> pairs;
  std::vector<int> per_expert_load;
  // Selections per expert before any capacity bound was applied.
  std::vector<int> requested_load;
  std::vector<std::size_t> dropped_tokens;
  std::string policy_tag;
  // Fixed per-expert buffer size (c for EC, the CF bound for TC); 0 when
  // unbounded.
  int expert_capacity = 0;

  // Token indices selected by `expert`, ascending.
  std::vector<std::size_t> tokens_of_expert(std::size_t expert) const;
};

struct LoadStats {
  std::vector<int> loads;
  double drop_ratio = 0.0;
  double max_over_mean = 1.0;
  double load_std = 0.0;
};

struct BiasState {
  std::vector<double> biases;
  double update_rate = 0.001;

  static BiasState zeros(std::size_t n_experts, double update_rate);
};

// Each token picks its top-k experts (biases shift the selection only).
// Ties resolve to the lowest expert index.
RoutingAssignment route_tc(const ScoreMatrix& scores, const TcConfig& cfg,
                           const BiasState* bias = nullptr);

// Each expert picks its top-c tokens; ties resolve to the lowest token index.
RoutingAssignment route_ec(const ScoreMatrix& scores, const EcConfig& cfg);

// TC gates: softmax over the surviving selected scores of each token.
// EC gates: per-token softmax over all E experts, not renormalized across the
// experts that happened to select the token.
RoutingAssignment compute_gates(const ScoreMatrix& scores, RoutingAssignment assignment,
                                RoutingPolicy policy);

// expert -> (token -> output vector). Only assigned pairs are read.
using ExpertOutputs = std::map<std::size_t, std::map<std::size_t, std::vector<double>>>;

RowMatrix combine_outputs(const RoutingAssignment& assignment, const ExpertOutputs& expert_outputs,
                          const RowMatrix& token_inputs);

int tc_expert_capacity(int k, std::size_t n_tokens, std::size_t n_experts, double cf);

// Switch-style balance loss: alpha * E * sum_j f_j * P_j.
double aux_load_balance_loss(const ScoreMatrix& scores, const RoutingAssignment& assignment,
                             double alpha);

BiasState loss_free_bias_update(BiasState bias, const std::vector<int>& loads);

LoadStats load_stats(const RoutingAssignment& assignment, std::size_t n_tokens,
                     std::size_t n_experts);

// 6 tokens x 3 experts whose row-wise argmax counts are 1/4/1: the standard
// demo of TC imbalance against EC's uniform c=2 loads.
ScoreMatrix example_6x3_scores();

// Row-wise softmax of the raw scores.
RowMatrix router_probabilities(const ScoreMatrix& scores);

}  // namespace ecdlm
