#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

namespace ecdlm {

inline constexpr int kMaskBins = 4;

// Bin of a mask ratio: [0,.25), [.25,.5), [.5,.75), [.75,1].
int mask_ratio_bin(double r);

struct LossRecord {
  long step = 0;
  int bin = 0;
  double mean_loss = 0.0;
  long token_count = 0;
  double realized_k = 0.0;
  long realized_pairs = 0;
};

class LossTrace {
 public:
  LossTrace() = default;
  explicit LossTrace(std::vector<LossRecord> records, int bin_count = kMaskBins);

  const std::vector<LossRecord>& records() const { return records_; }
  int bin_count() const { return bin_count_; }
  LossTrace scaled(double factor) const;

 private:
  std::vector<LossRecord> records_;
  int bin_count_ = kMaskBins;
};

struct Stage {
  long start = 0;
  long end = 0;
  friend bool operator==(const Stage&, const Stage&) = default;
};

// Stages are half-open [start, end); the final stage also includes its end
// step so a trace sampled up to `end` keeps its last point.
struct StageSpec {
  std::vector<Stage> stages;
  bool contains(std::size_t stage, long step) const;
};

StageSpec geometric_stages(long start, long end);

struct ConvergenceCell {
  std::optional<double> eta;  // unset when the cell has < 3 points
  double r2 = 0.0;
  int n_points = 0;
};

struct ConvergenceReport {
  int bin_count = kMaskBins;
  StageSpec stages;
  std::vector<ConvergenceCell> cells;  // bin-major

  const ConvergenceCell& cell(int bin, std::size_t stage) const {
    return cells[static_cast<std::size_t>(bin) * stages.stages.size() + stage];
  }
};

// eta = -slope of an OLS fit of ln L_r(t) against t inside each stage window.
ConvergenceReport convergence_rate(const LossTrace& trace, const StageSpec& stages);

// Elementwise dyn/static; unset where either eta is missing or static eta is 0.
std::vector<std::vector<std::optional<double>>> eta_ratio(const ConvergenceReport& dyn,
                                                          const ConvergenceReport& stat);

struct ArchSpec {
  double batch = 1;
  double seq_len = 1;
  double n_layers = 1;
  double hidden = 1;
  double expert_ffn = 1;
  double shared_ffn = 0;
  double routed_k = 1;
  double n_experts = 1;
  double vocab = 1;
};

// Forward FLOPs with multiply-add = 2:
//   2*B*L*N_layers*d^2*[(4 + 2L/d) + 3*(k*d_ffn + shared_ffn)/d] + 2*B*L*d*V.
// Router projections are not counted.
double forward_flops(const ArchSpec& arch);

// TFLOP/s per device.
double throughput(double f_fwd, double t_step_seconds, int n_gpus);

// Sum of log10 p_l; -inf when any p_l is 0.
double all_layer_drop_log10(const std::vector<double>& per_layer_drop);
double all_layer_drop_prob(const std::vector<double>& per_layer_drop);

}  // namespace ecdlm
