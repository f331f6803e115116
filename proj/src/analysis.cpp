#include "ecdlm/analysis.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ecdlm/error.h"

namespace ecdlm {

int mask_ratio_bin(double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorKind::kInvalidInput, "mask ratio outside [0, 1]");
  return std::min(kMaskBins - 1, static_cast<int>(r * kMaskBins));
}

LossTrace::LossTrace(std::vector<LossRecord> records, int bin_count)
    : records_(std::move(records)), bin_count_(bin_count) {
  if (bin_count_ < 1) throw Error(ErrorKind::kInvalidInput, "bin count must be positive");
  std::map<int, long> last;
  for (const auto& r : records_) {
    if (r.bin < 0 || r.bin >= bin_count_) {
      throw Error(ErrorKind::kInvalidInput, "loss record bin out of range");
    }
    auto it = last.find(r.bin);
    if (it != last.end() && r.step <= it->second) {
      throw Error(ErrorKind::kInvalidInput,
                  "steps must increase strictly within bin " + std::to_string(r.bin));
    }
    last[r.bin] = r.step;
  }
}

LossTrace LossTrace::scaled(double factor) const {
  auto copy = records_;
  for (auto& r : copy) r.mean_loss *= factor;
  return LossTrace(std::move(copy), bin_count_);
}

bool StageSpec::contains(std::size_t stage, long step) const {
  const Stage& s = stages[stage];
  if (stage + 1 == stages.size()) return step >= s.start && step <= s.end;
  return step >= s.start && step < s.end;
}

StageSpec geometric_stages(long start, long end) {
  if (start <= 0 || start >= end) {
    throw Error(ErrorKind::kInvalidInput, "geometric stages need 0 < start < end");
  }
  StageSpec spec;
  for (long lo = start; lo < end; lo *= 2) spec.stages.push_back({lo, std::min(2 * lo, end)});
  return spec;
}

namespace {

struct Fit {
  double slope = 0.0;
  double r2 = 0.0;
};

// Centered OLS keeps the slope accurate when t is large relative to its spread.
Fit ols(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  Fit f;
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  if (syy == 0.0) {
    f.r2 = 1.0;
  } else {
    const double ss_res = std::max(0.0, syy - f.slope * sxy);
    f.r2 = 1.0 - ss_res / syy;
  }
  return f;
}

}  // namespace

ConvergenceReport convergence_rate(const LossTrace& trace, const StageSpec& stages) {
  ConvergenceReport report;
  report.bin_count = trace.bin_count();
  report.stages = stages;
  const std::size_t n_stages = stages.stages.size();
  report.cells.resize(static_cast<std::size_t>(trace.bin_count()) * n_stages);

  for (const auto& r : trace.records()) {
    if (!(r.mean_loss > 0.0) || !std::isfinite(r.mean_loss)) {
      throw Error(ErrorKind::kInvalidInput, "loss values must be positive and finite");
    }
  }

  for (int bin = 0; bin < trace.bin_count(); ++bin) {
    for (std::size_t s = 0; s < n_stages; ++s) {
      std::vector<double> t, log_loss;
      for (const auto& r : trace.records()) {
        if (r.bin == bin && stages.contains(s, r.step)) {
          t.push_back(static_cast<double>(r.step));
          log_loss.push_back(std::log(r.mean_loss));
        }
      }
      auto& cell = report.cells[static_cast<std::size_t>(bin) * n_stages + s];
      cell.n_points = static_cast<int>(t.size());
      if (t.size() < 3) continue;
      const Fit fit = ols(t, log_loss);
      // -0.0 would print as "-0"; a flat trace reports exactly 0.
      cell.eta = fit.slope == 0.0 ? 0.0 : -fit.slope;
      cell.r2 = fit.r2;
    }
  }
  return report;
}

std::vector<std::vector<std::optional<double>>> eta_ratio(const ConvergenceReport& dyn,
                                                          const ConvergenceReport& stat) {
  if (dyn.bin_count != stat.bin_count || dyn.stages.stages.size() != stat.stages.stages.size()) {
    throw Error(ErrorKind::kInvalidInput, "convergence reports have different shapes");
  }
  const std::size_t n_stages = dyn.stages.stages.size();
  std::vector<std::vector<std::optional<double>>> out(
      static_cast<std::size_t>(dyn.bin_count), std::vector<std::optional<double>>(n_stages));
  for (int b = 0; b < dyn.bin_count; ++b) {
    for (std::size_t s = 0; s < n_stages; ++s) {
      const auto& d = dyn.cell(b, s);
      const auto& st = stat.cell(b, s);
      if (d.eta && st.eta && *st.eta != 0.0) out[static_cast<std::size_t>(b)][s] = *d.eta / *st.eta;
    }
  }
  return out;
}

double forward_flops(const ArchSpec& a) {
  for (double v : {a.batch, a.seq_len, a.n_layers, a.hidden, a.vocab}) {
    if (!(v > 0.0)) throw Error(ErrorKind::kInvalidInput, "architecture fields must be positive");
  }
  if (a.routed_k < 0.0 || a.shared_ffn < 0.0 || a.expert_ffn < 0.0) {
    throw Error(ErrorKind::kInvalidInput, "architecture fields must be non-negative");
  }
  const double d = a.hidden;
  const double attention = 4.0 + 2.0 * a.seq_len / d;
  const double mlp = 3.0 * (a.routed_k * a.expert_ffn + a.shared_ffn) / d;
  const double body = 2.0 * a.batch * a.seq_len * a.n_layers * d * d * (attention + mlp);
  const double logits = 2.0 * a.batch * a.seq_len * d * a.vocab;
  return body + logits;
}

double throughput(double f_fwd, double t_step_seconds, int n_gpus) {
  if (!(t_step_seconds > 0.0) || n_gpus < 1) {
    throw Error(ErrorKind::kInvalidInput, "throughput needs t_step > 0 and n_gpus >= 1");
  }
  return f_fwd / (t_step_seconds * 1e12 * n_gpus);
}

double all_layer_drop_log10(const std::vector<double>& per_layer_drop) {
  double acc = 0.0;
  for (double p : per_layer_drop) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::kInvalidInput, "drop ratio outside [0, 1]");
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    acc += std::log10(p);
  }
  return acc;
}

double all_layer_drop_prob(const std::vector<double>& per_layer_drop) {
  return std::pow(10.0, all_layer_drop_log10(per_layer_drop));
}

}  // namespace ecdlm
