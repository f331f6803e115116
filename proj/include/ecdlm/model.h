#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ecdlm/analysis.h"
#include "ecdlm/autograd.h"
#include "ecdlm/corpus.h"
#include "ecdlm/routing.h"
#include "ecdlm/scheduler.h"

namespace ecdlm {

struct RoutingConfig {
  RoutingPolicy policy = RoutingPolicy::kExpertChoice;
  TcConfig tc;
  // Static EC capacity is capacity_from_k(ec_k, L, E) unless a schedule is set,
  // in which case k follows the schedule at each sequence's mask ratio.
  double ec_k = 2.0;
  std::optional<CapacitySchedule> schedule;

  std::string tag() const;
};

struct ModelConfig {
  int n_layers = 2;
  int hidden_dim = 64;
  int n_heads = 4;
  int n_experts = 8;
  int expert_ffn_dim = 32;
  int n_shared_experts = 1;
  int shared_ffn_dim = 64;
  int vocab_size = 64;  // includes the mask token, which is the last id
  int max_seq_len = 64;
  double init_std = 0.05;
  RoutingConfig routing;

  int mask_token_id() const { return vocab_size - 1; }
  void validate() const;
};

// A batch of masked sequences laid out row-wise: row s*L + i is position i of
// sequence s.
struct Batch {
  int n_seq = 0;
  int seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<double> mask_ratio;  // one per sequence
  std::vector<int> target_rows;
  std::vector<int> targets;

  static Batch from_masked(const std::vector<MaskedSequence>& seqs);
};

// Routing decisions of one forward pass, indexed [layer][sequence].
struct RoutingTrace {
  std::vector<std::vector<RoutingAssignment>> assignments;
  std::vector<std::vector<int>> capacities;  // EC capacity; 0 under TC

  long total_pairs() const;
  LoadStats layer_stats(int layer, int seq_len, int n_experts) const;
  // Mean over sequences of the realized effective top-k (c*E/L for EC).
  double realized_k(int seq_len, int n_experts) const;
};

struct ForwardOptions {
  const RoutingTrace* frozen = nullptr;  // reuse these selections verbatim
  bool causal = false;
  bool zero_routed = false;  // drop every routed-expert contribution
};

struct ForwardOutput {
  ad::Var logits;    // (n_seq * L) x vocab
  ad::Var aux_loss;  // alpha-scaled, summed over layers; invalid unless TC aux mode
  RoutingTrace routing;
};

class DiffusionModel {
 public:
  DiffusionModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  void set_routing(RoutingConfig routing);

  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }
  ad::Parameter& parameter(const std::string& name);

  std::vector<BiasState>& router_bias() { return router_bias_; }
  const std::vector<BiasState>& router_bias() const { return router_bias_; }

  ForwardOutput forward(ad::Tape& tape, const Batch& batch, const ForwardOptions& options = {});

  // Training objective: masked cross-entropy plus the aux term when enabled.
  ad::Var loss(ad::Tape& tape, const ForwardOutput& out, const Batch& batch);

  void zero_grad();
  // FNV-1a over parameter names and bytes.
  std::uint64_t checksum() const;
  std::size_t parameter_count() const;

 private:
  struct LayerParams {
    int ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, router;
    std::vector<int> expert_w1, expert_w3, expert_w2;
    std::vector<int> shared_w1, shared_w3, shared_w2;
  };

  int add_param(const std::string& name, int rows, int cols, double std, Rng& rng);
  int add_const_param(const std::string& name, int rows, int cols, double value);
  RoutingAssignment route_sequence(const ScoreMatrix& scores, int layer, double mask_ratio,
                                   int* capacity) const;

  ModelConfig config_;
  std::vector<ad::Parameter> params_;
  std::vector<LayerParams> layers_;
  int tok_emb_ = -1, pos_emb_ = -1, lnf_gain_ = -1, lnf_bias_ = -1, head_ = -1;
  std::vector<BiasState> router_bias_;
};

// --- Evaluation ------------------------------------------------------------

// Realized-r evaluation: for each of the 4 bins, draws a masked count whose
// ratio falls in the bin, masks, and reports the token-weighted mean loss.
// Deterministic in `seed`, so repeated evaluations see identical masks.
std::vector<LossRecord> evaluate_per_bin(DiffusionModel& model, const Dataset& eval,
                                         int n_samples_per_bin, std::uint64_t seed,
                                         int batch_size = 16);

// Token-weighted mean over the records of evaluate_per_bin.
double pooled_loss(const std::vector<LossRecord>& records);

// --- Generation ------------------------------------------------------------

struct DenoiseSchedule {
  int n_steps = 8;
  // Fraction of free positions still masked after reaching step t (gamma(T)=1,
  // gamma(0)=0). Defaults to t / T.
  std::function<double(int t, int n_steps)> gamma;

  double at(int t) const;
};

// Iterative unmasking: starts with every non-prompt position masked and, at
// each step, commits the most confident predictions until the masked count
// matches round(gamma(t-1) * L_free). `on_step` sees the sequence after each step.
Sequence generate(DiffusionModel& model, const Sequence& prompt, int length,
                  const DenoiseSchedule& schedule,
                  const std::function<void(int t, const Sequence&)>& on_step = nullptr);

// --- Gradient check --------------------------------------------------------

struct GradCheckReport {
  int coordinates = 0;
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<std::string> groups_covered;
};

// Central differences against the analytic gradient with the routing
// selection frozen at its unperturbed value. Throws kGradientCheckFailed when
// any coordinate exceeds `tolerance`.
GradCheckReport grad_check(DiffusionModel& model, const Batch& batch, double epsilon = 1e-5,
                           int n_coordinates = 240, std::uint64_t seed = 0,
                           double tolerance = 1e-4);

// --- Retrofit --------------------------------------------------------------

// Swaps the TC selection rule for EC at matched compute (c from the TC top-k)
// and keeps every parameter tensor. Throws kInvalidInput on a non-TC model.
DiffusionModel retrofit_router(const DiffusionModel& model,
                               std::optional<CapacitySchedule> schedule = std::nullopt);

}  // namespace ecdlm
