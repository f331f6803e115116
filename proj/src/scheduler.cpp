#include "ecdlm/scheduler.h"

#include <algorithm>
#include <cmath>

#include "ecdlm/error.h"

namespace ecdlm {

std::string_view to_string(SchedulerKind kind) {
  switch (kind) {
    case SchedulerKind::kStatic: return "static";
    case SchedulerKind::kLinear: return "linear";
    case SchedulerKind::kLinearReverse: return "linear_reverse";
    case SchedulerKind::kCosine: return "cosine";
    case SchedulerKind::kCosineReverse: return "cosine_reverse";
    case SchedulerKind::kGaussian: return "gaussian";
    case SchedulerKind::kGaussianReverse: return "gaussian_reverse";
  }
  return "unknown";
}

std::optional<SchedulerKind> parse_scheduler_kind(std::string_view name) {
  std::string n(name);
  std::replace(n.begin(), n.end(), '-', '_');
  if (n.size() > 4 && n.ends_with("_rev")) n += "erse";
  for (auto k : {SchedulerKind::kStatic, SchedulerKind::kLinear, SchedulerKind::kLinearReverse,
                 SchedulerKind::kCosine, SchedulerKind::kCosineReverse, SchedulerKind::kGaussian,
                 SchedulerKind::kGaussianReverse}) {
    if (n == to_string(k)) return k;
  }
  return std::nullopt;
}

void CapacitySchedule::validate() const {
  if (kind == SchedulerKind::kStatic) {
    if (!(k_static > 0.0)) throw Error(ErrorKind::kInvalidConfig, "k_static must be positive");
    return;
  }
  if (!(k_min > 0.0) || !(k_max > 0.0) || k_min > k_max) {
    throw Error(ErrorKind::kInvalidConfig, "schedule needs 0 < k_min <= k_max");
  }
  if (!(sigma > 0.0)) throw Error(ErrorKind::kInvalidConfig, "sigma must be positive");
}

namespace {

double normalized_gaussian(double r, double sigma) {
  const double two_var = 2.0 * sigma * sigma;
  const double g = std::exp(-(r - 0.5) * (r - 0.5) / two_var);
  const double g0 = std::exp(-0.25 / two_var);
  return (g - g0) / (1.0 - g0);
}

}  // namespace

double s_of_r(SchedulerKind kind, double r, double sigma) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw Error(ErrorKind::kInvalidInput, "mask ratio must lie in [0, 1]");
  }
  switch (kind) {
    case SchedulerKind::kStatic:
      throw Error(ErrorKind::kNotApplicable, "static schedule has no s(r)");
    case SchedulerKind::kLinear: return r;
    case SchedulerKind::kLinearReverse: return 1.0 - r;
    case SchedulerKind::kCosine: return 0.5 * (1.0 - std::cos(M_PI * r));
    case SchedulerKind::kCosineReverse: return 0.5 * (1.0 + std::cos(M_PI * r));
    case SchedulerKind::kGaussian:
      if (!(sigma > 0.0)) throw Error(ErrorKind::kInvalidConfig, "sigma must be positive");
      return normalized_gaussian(r, sigma);
    case SchedulerKind::kGaussianReverse:
      if (!(sigma > 0.0)) throw Error(ErrorKind::kInvalidConfig, "sigma must be positive");
      return 1.0 - normalized_gaussian(r, sigma);
  }
  throw Error(ErrorKind::kInvalidConfig, "unknown scheduler kind");
}

double k_of_r(const CapacitySchedule& schedule, double r) {
  if (schedule.kind == SchedulerKind::kStatic) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw Error(ErrorKind::kInvalidInput, "mask ratio must lie in [0, 1]");
    }
    return schedule.k_static;
  }
  const double s = s_of_r(schedule.kind, r, schedule.sigma);
  return std::clamp(schedule.k_min + (schedule.k_max - schedule.k_min) * s, schedule.k_min,
                    schedule.k_max);
}

int capacity_from_k(double k, std::size_t n_tokens, std::size_t n_experts) {
  if (!(k > 0.0) || n_tokens < 1 || n_experts < 1) {
    throw Error(ErrorKind::kInvalidConfig, "capacity_from_k needs positive inputs");
  }
  const double raw = k * static_cast<double>(n_tokens) / static_cast<double>(n_experts);
  const double rounded = std::floor(raw + 0.5);
  return static_cast<int>(std::clamp(rounded, 1.0, static_cast<double>(n_tokens)));
}

double expected_s(const CapacitySchedule& schedule, int resolution) {
  if (schedule.kind == SchedulerKind::kStatic) {
    // Position of the constant k inside [k_min, k_max].
    if (schedule.k_max == schedule.k_min) return 0.0;
    return (schedule.k_static - schedule.k_min) / (schedule.k_max - schedule.k_min);
  }
  const double h = 1.0 / resolution;
  double sum = 0.0;
  for (int i = 0; i < resolution; ++i) sum += s_of_r(schedule.kind, (i + 0.5) * h, schedule.sigma);
  return sum * h;
}

double expected_k(const CapacitySchedule& schedule, int resolution) {
  schedule.validate();
  if (resolution < 1000) {
    throw Error(ErrorKind::kInvalidConfig, "quadrature resolution must be >= 1000");
  }
  if (schedule.kind == SchedulerKind::kStatic) return schedule.k_static;
  const double h = 1.0 / resolution;
  double sum = 0.0;
  for (int i = 0; i < resolution; ++i) sum += k_of_r(schedule, (i + 0.5) * h);
  return sum * h;
}

std::vector<FlopsRow> flops_equivalence_report(const std::vector<CapacitySchedule>& schedules,
                                               double baseline_k, int resolution) {
  if (schedules.empty()) {
    throw Error(ErrorKind::kInvalidConfig, "flops report needs at least one schedule");
  }
  std::vector<FlopsRow> rows;
  rows.reserve(schedules.size());
  for (const auto& sch : schedules) {
    FlopsRow row{sch.kind};
    row.expected_k = expected_k(sch, resolution);
    row.expected_s = expected_s(sch, resolution);
    row.delta = row.expected_k - baseline_k;
    row.flagged = std::abs(row.delta) > 0.005 * baseline_k;
    rows.push_back(row);
  }
  return rows;
}

std::vector<CapacitySchedule> standard_schedules(double k_min, double k_max, double sigma,
                                                 double k_static) {
  std::vector<CapacitySchedule> out;
  for (auto k : {SchedulerKind::kStatic, SchedulerKind::kLinear, SchedulerKind::kLinearReverse,
                 SchedulerKind::kCosine, SchedulerKind::kCosineReverse, SchedulerKind::kGaussian,
                 SchedulerKind::kGaussianReverse}) {
    out.push_back(CapacitySchedule{k, k_min, k_max, sigma, k_static});
  }
  return out;
}

}  // namespace ecdlm
