#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ecdlm/analysis.h"
#include "ecdlm/routing.h"

namespace ecdlm {

struct ClusterConfig {
  int n_devices = 1;
  int n_experts = 1;
  std::vector<int> expert_device;  // expert -> device

  // Experts [j*E/G, (j+1)*E/G) live on device j. Requires G | E.
  static ClusterConfig contiguous(int n_experts, int n_devices);
  void validate() const;
};

// Analytic device time: the slowest device sets the step. Its expert term
// counts token slots processed, which with pad_to_capacity is the full buffer
// of every capacity-bounded expert (static shapes), otherwise the post-drop
// load. The dispatch term counts selections the device received before
// overflow was discarded. With dispatch_cost = 0 and no padding this is
//   dense + fixed + per_token * max_device(sum of expert loads).
struct StepCostModel {
  double per_token_expert_cost = 1e-6;
  double dispatch_cost = 2.5e-7;
  double fixed_overhead = 0.0;
  double dense_cost = 0.0;
  bool pad_to_capacity = true;
};

enum class ScoreDistribution { kUniform, kZipf, kTrainedDump };

struct WorkloadSpec {
  int n_tokens_per_step = 4096;
  ScoreDistribution distribution = ScoreDistribution::kZipf;
  double zipf_s = 1.2;
  // Used for kTrainedDump: rows are tokens, columns experts. Steps draw
  // n_tokens_per_step rows cyclically.
  std::shared_ptr<const RowMatrix> router_dump;
  int n_steps = 50;
  std::uint64_t seed = 0;
};

struct SimPolicy {
  RoutingPolicy policy = RoutingPolicy::kExpertChoice;
  TcConfig tc;
  double ec_k = 8.0;
  // Multiplies the log-popularity term of the scores; 0 leaves the workload
  // untouched. Stand-in for balance losses that change the load distribution.
  double skew_amplification = 0.0;

  std::string tag() const;
};

struct SimResult {
  std::string policy_tag;
  double mean_step_time = 0.0;
  double throughput_tflops = 0.0;
  double per_device_load_std = 0.0;
  double drop_ratio = 0.0;
};

double step_time(const RoutingAssignment& assignment, const ClusterConfig& cluster,
                 const StepCostModel& cost);

// Per-device routed tokens (post-capacity) for one assignment.
std::vector<int> device_loads(const RoutingAssignment& assignment, const ClusterConfig& cluster);

// Score matrix for one simulated step; depends only on (workload, step).
ScoreMatrix sample_scores(const WorkloadSpec& workload, int n_experts, int step,
                          double skew_amplification = 0.0);

SimResult simulate_policy(const SimPolicy& policy, const WorkloadSpec& workload,
                          const ClusterConfig& cluster, const StepCostModel& cost,
                          const ArchSpec& arch);

struct MemorySnapshot {
  std::vector<int> per_device_peak;
  double std_dev = 0.0;
};

MemorySnapshot memory_snapshot(const std::vector<RoutingAssignment>& stream,
                               const ClusterConfig& cluster);

struct PolicyReport {
  std::vector<SimResult> rows;  // descending throughput
  std::vector<std::string> violations;
};

PolicyReport compare_policies(const std::vector<SimPolicy>& policies, const WorkloadSpec& workload,
                              const ClusterConfig& cluster, const StepCostModel& cost,
                              const ArchSpec& arch);

// EC, TC cf 1.0/1.25/1.5 and TC dropless with aux loss, all at top-k `k`.
std::vector<SimPolicy> comparison_policies(int k);

}  // namespace ecdlm
