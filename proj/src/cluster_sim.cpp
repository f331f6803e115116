#include "ecdlm/cluster_sim.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

#include "ecdlm/error.h"
#include "ecdlm/rng.h"
#include "ecdlm/scheduler.h"

namespace ecdlm {

ClusterConfig ClusterConfig::contiguous(int n_experts, int n_devices) {
  if (n_devices < 1 || n_experts < 1 || n_experts % n_devices != 0) {
    throw Error(ErrorKind::kInvalidConfig, "contiguous mapping needs G >= 1 dividing E");
  }
  ClusterConfig c;
  c.n_devices = n_devices;
  c.n_experts = n_experts;
  const int per = n_experts / n_devices;
  c.expert_device.resize(static_cast<std::size_t>(n_experts));
  for (int j = 0; j < n_experts; ++j) c.expert_device[static_cast<std::size_t>(j)] = j / per;
  return c;
}

void ClusterConfig::validate() const {
  if (n_devices < 1 || n_experts < 1) {
    throw Error(ErrorKind::kInvalidConfig, "cluster needs at least one device and expert");
  }
  if (expert_device.size() != static_cast<std::size_t>(n_experts)) {
    throw Error(ErrorKind::kInvalidConfig, "every expert must be mapped to a device");
  }
  for (int d : expert_device) {
    if (d < 0 || d >= n_devices) throw Error(ErrorKind::kInvalidConfig, "expert mapped to unknown device");
  }
}

std::string SimPolicy::tag() const {
  std::string t;
  if (policy == RoutingPolicy::kExpertChoice) {
    std::ostringstream os;
    os << "ec(k=" << ec_k << ")";
    t = os.str();
  } else {
    t = tc.tag();
  }
  if (skew_amplification != 0.0) {
    std::ostringstream os;
    os << "+skew" << skew_amplification;
    t += os.str();
  }
  return t;
}

namespace {

void check_assignment(const RoutingAssignment& a, const ClusterConfig& cluster) {
  cluster.validate();
  if (a.per_expert_load.size() > static_cast<std::size_t>(cluster.n_experts)) {
    throw Error(ErrorKind::kInvalidConfig, "assignment references an unmapped expert");
  }
}

std::vector<int> per_device(const std::vector<int>& per_expert, const ClusterConfig& cluster) {
  std::vector<int> out(static_cast<std::size_t>(cluster.n_devices), 0);
  for (std::size_t j = 0; j < per_expert.size(); ++j) {
    out[static_cast<std::size_t>(cluster.expert_device[j])] += per_expert[j];
  }
  return out;
}

double population_std(const std::vector<int>& v) {
  if (v.empty()) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (int x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

std::vector<double> log_popularity(const WorkloadSpec& w, int n_experts) {
  std::vector<double> out(static_cast<std::size_t>(n_experts), 0.0);
  if (w.distribution != ScoreDistribution::kZipf) return out;
  if (!(w.zipf_s > 0.0)) throw Error(ErrorKind::kInvalidConfig, "zipf exponent must be positive");
  // Popularity ranks are scattered over experts so hot experts do not all
  // land on one device under the contiguous mapping.
  std::vector<int> rank(static_cast<std::size_t>(n_experts));
  std::iota(rank.begin(), rank.end(), 1);
  Rng perm = Rng(w.seed).split(0xfeedULL);
  for (int i = n_experts - 1; i > 0; --i) {
    std::swap(rank[static_cast<std::size_t>(i)],
              rank[perm.below(static_cast<std::uint64_t>(i) + 1)]);
  }
  for (int j = 0; j < n_experts; ++j) {
    out[static_cast<std::size_t>(j)] = -w.zipf_s * std::log(static_cast<double>(rank[static_cast<std::size_t>(j)]));
  }
  return out;
}

int sim_workers() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("ECDLM_SIM_WORKERS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

struct StepOutcome {
  double time = 0.0;
  double device_std = 0.0;
  double drop_ratio = 0.0;
};

}  // namespace

std::vector<int> device_loads(const RoutingAssignment& assignment, const ClusterConfig& cluster) {
  check_assignment(assignment, cluster);
  return per_device(assignment.per_expert_load, cluster);
}

double step_time(const RoutingAssignment& assignment, const ClusterConfig& cluster,
                 const StepCostModel& cost) {
  check_assignment(assignment, cluster);
  std::vector<int> slots = assignment.per_expert_load;
  if (cost.pad_to_capacity && assignment.expert_capacity > 0) {
    for (int& s : slots) s = std::max(s, assignment.expert_capacity);
  }
  const auto done = per_device(slots, cluster);
  const auto& requested =
      assignment.requested_load.empty() ? assignment.per_expert_load : assignment.requested_load;
  const auto received = per_device(requested, cluster);
  double worst = 0.0;
  for (std::size_t d = 0; d < done.size(); ++d) {
    worst = std::max(worst, cost.per_token_expert_cost * done[d] + cost.dispatch_cost * received[d]);
  }
  return cost.dense_cost + cost.fixed_overhead + worst;
}

ScoreMatrix sample_scores(const WorkloadSpec& workload, int n_experts, int step,
                          double skew_amplification) {
  const int n = workload.n_tokens_per_step;
  if (n < 1 || n_experts < 1) throw Error(ErrorKind::kInvalidConfig, "workload needs N, E >= 1");
  RowMatrix s(n, n_experts);
  if (workload.distribution == ScoreDistribution::kTrainedDump) {
    if (!workload.router_dump || workload.router_dump->rows() < 1 ||
        workload.router_dump->cols() != n_experts) {
      throw Error(ErrorKind::kInvalidConfig, "router dump missing or has the wrong expert count");
    }
    const auto& dump = *workload.router_dump;
    const Eigen::Index offset = static_cast<Eigen::Index>(step) * n;
    for (Eigen::Index i = 0; i < n; ++i) s.row(i) = dump.row((offset + i) % dump.rows());
    return ScoreMatrix(std::move(s));
  }
  const auto pop = log_popularity(workload, n_experts);
  // Gumbel noise over log-popularity: a token's top-1 expert is drawn with
  // probability proportional to its popularity weight.
  Rng rng = Rng(workload.seed).split(static_cast<std::uint64_t>(step) + 1);
  const double scale = 1.0 + skew_amplification;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n_experts; ++j) {
      s(i, j) = scale * pop[static_cast<std::size_t>(j)] + rng.gumbel();
    }
  }
  return ScoreMatrix(std::move(s));
}

SimResult simulate_policy(const SimPolicy& policy, const WorkloadSpec& workload,
                          const ClusterConfig& cluster, const StepCostModel& cost,
                          const ArchSpec& arch) {
  cluster.validate();
  if (workload.n_steps < 1) throw Error(ErrorKind::kInvalidConfig, "workload needs n_steps >= 1");
  const int e = cluster.n_experts;
  const std::size_t n = static_cast<std::size_t>(workload.n_tokens_per_step);

  auto route = [&](const ScoreMatrix& s, const BiasState* bias) {
    if (policy.policy == RoutingPolicy::kExpertChoice) {
      return route_ec(s, EcConfig{capacity_from_k(policy.ec_k, n, static_cast<std::size_t>(e))});
    }
    return route_tc(s, policy.tc, bias);
  };
  auto outcome = [&](const RoutingAssignment& a) {
    StepOutcome o;
    o.time = step_time(a, cluster, cost);
    o.device_std = population_std(per_device(a.per_expert_load, cluster));
    o.drop_ratio = static_cast<double>(a.dropped_tokens.size()) / static_cast<double>(n);
    return o;
  };

  std::vector<StepOutcome> steps(static_cast<std::size_t>(workload.n_steps));
  const bool stateful = policy.policy == RoutingPolicy::kTokenChoice &&
                        policy.tc.balance == BalanceMode::kLossFreeBias;
  if (stateful) {
    BiasState bias = BiasState::zeros(static_cast<std::size_t>(e), policy.tc.bias_update_rate);
    for (int t = 0; t < workload.n_steps; ++t) {
      const auto a = route(sample_scores(workload, e, t, policy.skew_amplification), &bias);
      steps[static_cast<std::size_t>(t)] = outcome(a);
      bias = loss_free_bias_update(std::move(bias), a.requested_load);
    }
  } else {
    // Steps are independent; each writes its own slot and the reduction below
    // runs in step order, so results do not depend on the worker count.
    const int workers = std::min(sim_workers(), workload.n_steps);
    auto run = [&](int first) {
      for (int t = first; t < workload.n_steps; t += workers) {
        steps[static_cast<std::size_t>(t)] =
            outcome(route(sample_scores(workload, e, t, policy.skew_amplification), nullptr));
      }
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
      for (auto& th : pool) th.join();
    }
  }

  SimResult r;
  r.policy_tag = policy.tag();
  for (const auto& s : steps) {
    r.mean_step_time += s.time;
    r.per_device_load_std += s.device_std;
    r.drop_ratio += s.drop_ratio;
  }
  const double count = static_cast<double>(steps.size());
  r.mean_step_time /= count;
  r.per_device_load_std /= count;
  r.drop_ratio /= count;
  // Nominal F_fwd for every policy: an upper bound for capacity-bounded TC.
  r.throughput_tflops = throughput(forward_flops(arch), r.mean_step_time, cluster.n_devices);
  return r;
}

MemorySnapshot memory_snapshot(const std::vector<RoutingAssignment>& stream,
                               const ClusterConfig& cluster) {
  cluster.validate();
  MemorySnapshot snap;
  snap.per_device_peak.assign(static_cast<std::size_t>(cluster.n_devices), 0);
  for (const auto& a : stream) {
    const auto loads = device_loads(a, cluster);
    for (std::size_t d = 0; d < loads.size(); ++d) {
      snap.per_device_peak[d] = std::max(snap.per_device_peak[d], loads[d]);
    }
  }
  snap.std_dev = population_std(snap.per_device_peak);
  return snap;
}

PolicyReport compare_policies(const std::vector<SimPolicy>& policies, const WorkloadSpec& workload,
                              const ClusterConfig& cluster, const StepCostModel& cost,
                              const ArchSpec& arch) {
  PolicyReport report;
  std::vector<std::pair<const SimPolicy*, SimResult>> runs;
  for (const auto& p : policies) runs.emplace_back(&p, simulate_policy(p, workload, cluster, cost, arch));

  // Bounded TC variants that differ only in CF must lose throughput as CF grows.
  using Family = std::tuple<int, int, double, double>;
  std::map<Family, std::vector<std::pair<double, const SimResult*>>> families;
  for (const auto& [p, r] : runs) {
    if (p->policy == RoutingPolicy::kTokenChoice && p->tc.capacity_factor) {
      families[{p->tc.k, static_cast<int>(p->tc.balance), p->tc.aux_alpha, p->skew_amplification}]
          .emplace_back(*p->tc.capacity_factor, &r);
    }
  }
  for (auto& [family, members] : families) {
    std::sort(members.begin(), members.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < members.size(); ++i) {
      if (!(members[i].second->throughput_tflops < members[i - 1].second->throughput_tflops)) {
        report.violations.push_back("throughput not decreasing in CF: " +
                                    members[i - 1].second->policy_tag + " -> " +
                                    members[i].second->policy_tag);
      }
    }
  }

  for (auto& [p, r] : runs) report.rows.push_back(r);
  std::stable_sort(report.rows.begin(), report.rows.end(), [](const SimResult& a, const SimResult& b) {
    return a.throughput_tflops > b.throughput_tflops;
  });
  return report;
}

std::vector<SimPolicy> comparison_policies(int k) {
  std::vector<SimPolicy> out;
  SimPolicy ec;
  ec.policy = RoutingPolicy::kExpertChoice;
  ec.ec_k = k;
  out.push_back(ec);
  for (double cf : {1.0, 1.25, 1.5}) {
    SimPolicy tc;
    tc.policy = RoutingPolicy::kTokenChoice;
    tc.tc.k = k;
    tc.tc.capacity_factor = cf;
    tc.tc.balance = BalanceMode::kAuxLoss;
    out.push_back(tc);
  }
  SimPolicy dropless;
  dropless.policy = RoutingPolicy::kTokenChoice;
  dropless.tc.k = k;
  dropless.tc.balance = BalanceMode::kAuxLoss;
  out.push_back(dropless);
  return out;
}

}  // namespace ecdlm
