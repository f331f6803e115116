#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ecdlm {

enum class SchedulerKind {
  kStatic,
  kLinear,
  kLinearReverse,
  kCosine,
  kCosineReverse,
  kGaussian,
  kGaussianReverse,
};

std::string_view to_string(SchedulerKind kind);
// Accepts the snake_case names above and their dashed/short aliases
// ("linear-rev", "cosine-reverse", ...).
std::optional<SchedulerKind> parse_scheduler_kind(std::string_view name);

inline constexpr double kDefaultGaussianSigma = 0.22;

// k(r) = clamp(k_min + (k_max - k_min) * s(r), k_min, k_max); `static`
// ignores the range and always returns k_static.
struct CapacitySchedule {
  SchedulerKind kind = SchedulerKind::kStatic;
  double k_min = 8.0;
  double k_max = 32.0;
  double sigma = kDefaultGaussianSigma;
  double k_static = 20.0;

  void validate() const;
};

double s_of_r(SchedulerKind kind, double r, double sigma = kDefaultGaussianSigma);
double k_of_r(const CapacitySchedule& schedule, double r);

// round-half-up(k * N / E), clamped to [1, N].
int capacity_from_k(double k, std::size_t n_tokens, std::size_t n_experts);

// Composite midpoint rule over r ~ Uniform(0, 1).
double expected_s(const CapacitySchedule& schedule, int resolution = 100000);
double expected_k(const CapacitySchedule& schedule, int resolution = 100000);

struct FlopsRow {
  SchedulerKind kind;
  double expected_s = 0.0;
  double expected_k = 0.0;
  double delta = 0.0;    // expected_k - baseline_k
  bool flagged = false;  // |delta| > 0.5% of the baseline
};

std::vector<FlopsRow> flops_equivalence_report(const std::vector<CapacitySchedule>& schedules,
                                               double baseline_k, int resolution = 100000);

// The six non-static schedulers plus the static baseline, in table order.
std::vector<CapacitySchedule> standard_schedules(double k_min, double k_max, double sigma,
                                                 double k_static);

}  // namespace ecdlm
