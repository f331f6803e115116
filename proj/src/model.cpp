#include "ecdlm/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "ecdlm/error.h"

namespace ecdlm {

using ad::Matrix;
using ad::Tape;
using ad::Var;

std::string RoutingConfig::tag() const {
  if (policy == RoutingPolicy::kTokenChoice) return tc.tag();
  std::ostringstream os;
  if (schedule) {
    os << "ec(" << to_string(schedule->kind);
    if (schedule->kind == SchedulerKind::kStatic) {
      os << ",k=" << schedule->k_static;
    } else {
      os << ",k=" << schedule->k_min << "-" << schedule->k_max;
    }
    os << ")";
  } else {
    os << "ec(k=" << ec_k << ")";
  }
  return os.str();
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw Error(ErrorKind::kInvalidConfig, std::string(what) + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(hidden_dim, "hidden_dim");
  positive(n_heads, "n_heads");
  positive(n_experts, "n_experts");
  positive(expert_ffn_dim, "expert_ffn_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (vocab_size < 2) throw Error(ErrorKind::kInvalidConfig, "vocab needs a data token and [MASK]");
  if (hidden_dim % n_heads != 0) {
    throw Error(ErrorKind::kInvalidConfig, "hidden_dim must be divisible by n_heads");
  }
  if (n_shared_experts < 0) throw Error(ErrorKind::kInvalidConfig, "n_shared_experts must be >= 0");
  if (n_shared_experts > 0) positive(shared_ffn_dim, "shared_ffn_dim");
  if (routing.policy == RoutingPolicy::kTokenChoice) {
    routing.tc.validate(static_cast<std::size_t>(n_experts));
  } else if (routing.schedule) {
    routing.schedule->validate();
  } else if (!(routing.ec_k > 0.0)) {
    throw Error(ErrorKind::kInvalidConfig, "ec_k must be positive");
  }
}

Batch Batch::from_masked(const std::vector<MaskedSequence>& seqs) {
  Batch b;
  b.n_seq = static_cast<int>(seqs.size());
  b.seq_len = seqs.empty() ? 0 : static_cast<int>(seqs.front().tokens.size());
  for (int s = 0; s < b.n_seq; ++s) {
    const auto& m = seqs[static_cast<std::size_t>(s)];
    if (static_cast<int>(m.tokens.size()) != b.seq_len) {
      throw Error(ErrorKind::kInvalidInput, "batch sequences must share one length");
    }
    b.tokens.insert(b.tokens.end(), m.tokens.begin(), m.tokens.end());
    for (int i = 0; i < b.seq_len; ++i) b.positions.push_back(i);
    b.mask_ratio.push_back(m.spec.mask_ratio);
    for (std::size_t q = 0; q < m.spec.masked_positions.size(); ++q) {
      b.target_rows.push_back(s * b.seq_len + m.spec.masked_positions[q]);
      b.targets.push_back(m.targets[q]);
    }
  }
  return b;
}

long RoutingTrace::total_pairs() const {
  long total = 0;
  for (const auto& layer : assignments) {
    for (const auto& a : layer) total += static_cast<long>(a.pairs.size());
  }
  return total;
}

LoadStats RoutingTrace::layer_stats(int layer, int seq_len, int n_experts) const {
  RoutingAssignment merged;
  merged.per_expert_load.assign(static_cast<std::size_t>(n_experts), 0);
  const auto& seqs = assignments[static_cast<std::size_t>(layer)];
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (int j = 0; j < n_experts; ++j) {
      merged.per_expert_load[static_cast<std::size_t>(j)] += seqs[s].per_expert_load[static_cast<std::size_t>(j)];
    }
    for (std::size_t tok : seqs[s].dropped_tokens) {
      merged.dropped_tokens.push_back(s * static_cast<std::size_t>(seq_len) + tok);
    }
  }
  return load_stats(merged, seqs.size() * static_cast<std::size_t>(seq_len),
                    static_cast<std::size_t>(n_experts));
}

double RoutingTrace::realized_k(int seq_len, int n_experts) const {
  if (assignments.empty() || assignments.front().empty()) return 0.0;
  double acc = 0.0;
  for (const auto& a : assignments.front()) {
    acc += static_cast<double>(a.pairs.size()) / seq_len;
  }
  (void)n_experts;
  return acc / static_cast<double>(assignments.front().size());
}

// --- DiffusionModel ----------------------------------------------------------

int DiffusionModel::add_param(const std::string& name, int rows, int cols, double std, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
  params_.emplace_back(name, std::move(m));
  return static_cast<int>(params_.size()) - 1;
}

int DiffusionModel::add_const_param(const std::string& name, int rows, int cols, double value) {
  params_.emplace_back(name, Matrix::Constant(rows, cols, value));
  return static_cast<int>(params_.size()) - 1;
}

DiffusionModel::DiffusionModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.hidden_dim;
  const double s = config_.init_std;
  const double out_s = s / std::sqrt(2.0 * config_.n_layers);
  tok_emb_ = add_param("tok_emb", config_.vocab_size, d, s, rng);
  pos_emb_ = add_param("pos_emb", config_.max_seq_len, d, s, rng);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams lp;
    lp.ln1_gain = add_const_param(p + "ln1.gain", 1, d, 1.0);
    lp.ln1_bias = add_const_param(p + "ln1.bias", 1, d, 0.0);
    lp.wq = add_param(p + "attn.wq", d, d, s, rng);
    lp.wk = add_param(p + "attn.wk", d, d, s, rng);
    lp.wv = add_param(p + "attn.wv", d, d, s, rng);
    lp.wo = add_param(p + "attn.wo", d, d, out_s, rng);
    lp.ln2_gain = add_const_param(p + "ln2.gain", 1, d, 1.0);
    lp.ln2_bias = add_const_param(p + "ln2.bias", 1, d, 0.0);
    lp.router = add_param(p + "router", d, config_.n_experts, s, rng);
    for (int j = 0; j < config_.n_experts; ++j) {
      const std::string e = p + "expert" + std::to_string(j) + ".";
      lp.expert_w1.push_back(add_param(e + "w1", d, config_.expert_ffn_dim, s, rng));
      lp.expert_w3.push_back(add_param(e + "w3", d, config_.expert_ffn_dim, s, rng));
      lp.expert_w2.push_back(add_param(e + "w2", config_.expert_ffn_dim, d, out_s, rng));
    }
    for (int j = 0; j < config_.n_shared_experts; ++j) {
      const std::string e = p + "shared" + std::to_string(j) + ".";
      lp.shared_w1.push_back(add_param(e + "w1", d, config_.shared_ffn_dim, s, rng));
      lp.shared_w3.push_back(add_param(e + "w3", d, config_.shared_ffn_dim, s, rng));
      lp.shared_w2.push_back(add_param(e + "w2", config_.shared_ffn_dim, d, out_s, rng));
    }
    layers_.push_back(std::move(lp));
  }
  lnf_gain_ = add_const_param("ln_f.gain", 1, d, 1.0);
  lnf_bias_ = add_const_param("ln_f.bias", 1, d, 0.0);
  head_ = add_param("head", d, config_.vocab_size, s, rng);
  router_bias_.assign(static_cast<std::size_t>(config_.n_layers),
                      BiasState::zeros(static_cast<std::size_t>(config_.n_experts),
                                       config_.routing.tc.bias_update_rate));
}

void DiffusionModel::set_routing(RoutingConfig routing) {
  ModelConfig next = config_;
  next.routing = std::move(routing);
  next.validate();
  config_ = std::move(next);
}

ad::Parameter& DiffusionModel::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error(ErrorKind::kInvalidInput, "unknown parameter " + name);
}

void DiffusionModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::uint64_t DiffusionModel::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params_) {
    feed(p.name.data(), p.name.size());
    feed(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  return h;
}

std::size_t DiffusionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

RoutingAssignment DiffusionModel::route_sequence(const ScoreMatrix& scores, int layer,
                                                 double mask_ratio, int* capacity) const {
  const auto& rc = config_.routing;
  if (rc.policy == RoutingPolicy::kTokenChoice) {
    *capacity = 0;
    return route_tc(scores, rc.tc, &router_bias_[static_cast<std::size_t>(layer)]);
  }
  const double k = rc.schedule ? k_of_r(*rc.schedule, mask_ratio) : rc.ec_k;
  *capacity = capacity_from_k(k, scores.n_tokens(), scores.n_experts());
  return route_ec(scores, EcConfig{*capacity});
}

namespace {

Var swiglu(Tape& t, Var x, Var w1, Var w3, Var w2) {
  return ad::matmul(t, ad::mul(t, ad::silu(t, ad::matmul(t, x, w1)), ad::matmul(t, x, w3)), w2);
}

}  // namespace

ForwardOutput DiffusionModel::forward(Tape& t, const Batch& batch, const ForwardOptions& options) {
  const int L = batch.seq_len;
  const int B = batch.n_seq;
  const int E = config_.n_experts;
  const Eigen::Index n_rows = static_cast<Eigen::Index>(B) * L;
  if (L < 1 || L > config_.max_seq_len || B < 1 ||
      static_cast<Eigen::Index>(batch.tokens.size()) != n_rows ||
      static_cast<Eigen::Index>(batch.positions.size()) != n_rows ||
      static_cast<int>(batch.mask_ratio.size()) != B) {
    throw Error(ErrorKind::kInvalidInput, "batch shape does not match the model");
  }
  for (int tok : batch.tokens) {
    if (tok < 0 || tok >= config_.vocab_size) throw Error(ErrorKind::kInvalidInput, "token id out of range");
  }
  for (int pos : batch.positions) {
    if (pos < 0 || pos >= config_.max_seq_len) throw Error(ErrorKind::kInvalidInput, "position out of range");
  }
  if (options.frozen && (options.frozen->assignments.size() != layers_.size())) {
    throw Error(ErrorKind::kInvalidInput, "frozen routing has the wrong layer count");
  }

  auto P = [&](int idx) { return t.parameter(params_[static_cast<std::size_t>(idx)]); };
  const bool tc = config_.routing.policy == RoutingPolicy::kTokenChoice;
  const bool aux = tc && config_.routing.tc.balance == BalanceMode::kAuxLoss;

  ForwardOutput out;
  Var x = ad::add(t, ad::gather_rows(t, P(tok_emb_), batch.tokens),
                  ad::gather_rows(t, P(pos_emb_), batch.positions));

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerParams& lp = layers_[l];

    Var h = ad::layer_norm(t, x, P(lp.ln1_gain), P(lp.ln1_bias));
    Var att = ad::attention(t, ad::matmul(t, h, P(lp.wq)), ad::matmul(t, h, P(lp.wk)),
                            ad::matmul(t, h, P(lp.wv)), B, L, config_.n_heads, options.causal);
    x = ad::add(t, x, ad::matmul(t, att, P(lp.wo)));

    Var xn = ad::layer_norm(t, x, P(lp.ln2_gain), P(lp.ln2_bias));
    Var logits = ad::matmul(t, xn, P(lp.router));
    const Matrix score_values = t.value(logits);

    std::vector<RoutingAssignment> seq_assign;
    std::vector<int> caps;
    for (int s = 0; s < B; ++s) {
      if (options.frozen) {
        seq_assign.push_back(options.frozen->assignments[l].at(static_cast<std::size_t>(s)));
        caps.push_back(options.frozen->capacities[l].at(static_cast<std::size_t>(s)));
        continue;
      }
      ScoreMatrix scores(Matrix(score_values.block(static_cast<Eigen::Index>(s) * L, 0, L, E)));
      int cap = 0;
      seq_assign.push_back(route_sequence(scores, static_cast<int>(l),
                                          batch.mask_ratio[static_cast<std::size_t>(s)], &cap));
      caps.push_back(cap);
    }

    // Global (row, expert) pairs in (row, expert) order; per-token pairs stay contiguous.
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> offsets{0};
    for (int s = 0; s < B; ++s) {
      const auto& a = seq_assign[static_cast<std::size_t>(s)];
      std::size_t q = 0;
      for (int i = 0; i < L; ++i) {
        while (q < a.pairs.size() && static_cast<int>(a.pairs[q].token) == i) {
          pairs.emplace_back(s * L + i, static_cast<int>(a.pairs[q].expert));
          ++q;
        }
        offsets.push_back(static_cast<int>(pairs.size()));
      }
    }

    Var moe = ad::scale(t, xn, 0.0);
    if (!options.zero_routed && !pairs.empty()) {
      Var gates = tc ? ad::segment_softmax(t, ad::gather_elements(t, logits, pairs), offsets)
                     : ad::gather_elements(t, ad::row_softmax(t, logits), pairs);
      std::vector<std::vector<int>> rows_of(static_cast<std::size_t>(E));
      std::vector<std::vector<int>> gate_idx(static_cast<std::size_t>(E));
      for (std::size_t q = 0; q < pairs.size(); ++q) {
        rows_of[static_cast<std::size_t>(pairs[q].second)].push_back(pairs[q].first);
        gate_idx[static_cast<std::size_t>(pairs[q].second)].push_back(static_cast<int>(q));
      }
      for (int j = 0; j < E; ++j) {
        auto& rows = rows_of[static_cast<std::size_t>(j)];
        if (rows.empty()) continue;
        Var xs = ad::gather_rows(t, xn, rows);
        Var y = swiglu(t, xs, P(lp.expert_w1[static_cast<std::size_t>(j)]),
                       P(lp.expert_w3[static_cast<std::size_t>(j)]),
                       P(lp.expert_w2[static_cast<std::size_t>(j)]));
        Var g = ad::gather_rows(t, gates, gate_idx[static_cast<std::size_t>(j)]);
        moe = ad::add(t, moe, ad::scatter_rows(t, ad::row_scale(t, y, g), std::move(rows), n_rows));
      }
    }
    for (std::size_t j = 0; j < lp.shared_w1.size(); ++j) {
      moe = ad::add(t, moe, swiglu(t, xn, P(lp.shared_w1[j]), P(lp.shared_w3[j]), P(lp.shared_w2[j])));
    }
    x = ad::add(t, x, moe);

    if (aux) {
      Matrix f = Matrix::Zero(1, E);
      for (Eigen::Index i = 0; i < n_rows; ++i) {
        Eigen::Index best = 0;
        score_values.row(i).maxCoeff(&best);
        f(0, best) += 1.0 / static_cast<double>(n_rows);
      }
      Var layer_aux = ad::scale(
          t, ad::dot_constant(t, ad::column_mean(t, ad::row_softmax(t, logits)), std::move(f)),
          config_.routing.tc.aux_alpha * E);
      out.aux_loss = out.aux_loss.valid() ? ad::add(t, out.aux_loss, layer_aux) : layer_aux;
    }

    out.routing.assignments.push_back(std::move(seq_assign));
    out.routing.capacities.push_back(std::move(caps));
  }

  Var hf = ad::layer_norm(t, x, P(lnf_gain_), P(lnf_bias_));
  out.logits = ad::matmul(t, hf, P(head_));
  return out;
}

Var DiffusionModel::loss(Tape& t, const ForwardOutput& out, const Batch& batch) {
  Var ce = ad::masked_cross_entropy(t, out.logits, batch.target_rows, batch.targets);
  if (out.aux_loss.valid()) return ad::add(t, ce, out.aux_loss);
  return ce;
}

// --- Evaluation --------------------------------------------------------------

namespace {

std::vector<int> counts_in_bin(int bin, int length) {
  std::vector<int> out;
  for (int m = 1; m <= length; ++m) {
    if (mask_ratio_bin(static_cast<double>(m) / length) == bin) out.push_back(m);
  }
  return out;
}

}  // namespace

std::vector<LossRecord> evaluate_per_bin(DiffusionModel& model, const Dataset& eval,
                                         int n_samples_per_bin, std::uint64_t seed,
                                         int batch_size) {
  if (n_samples_per_bin < 1 || eval.empty() || batch_size < 1) {
    throw Error(ErrorKind::kInvalidInput, "evaluation needs data and positive sample counts");
  }
  const int L = static_cast<int>(eval.front().size());
  const int E = model.config().n_experts;
  const int mask_id = model.config().mask_token_id();
  Rng rng(seed);
  std::vector<LossRecord> records;
  for (int bin = 0; bin < kMaskBins; ++bin) {
    const auto counts = counts_in_bin(bin, L);
    if (counts.empty()) throw Error(ErrorKind::kInvalidInput, "sequence too short for every bin");
    std::vector<MaskedSequence> masked;
    for (int s = 0; s < n_samples_per_bin; ++s) {
      const int m = counts[rng.below(counts.size())];
      masked.push_back(apply_mask_count(eval[static_cast<std::size_t>(s) % eval.size()], m, rng, mask_id));
    }
    LossRecord rec;
    rec.bin = bin;
    double loss_sum = 0.0;
    double k_sum = 0.0;
    for (std::size_t start = 0; start < masked.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(masked.size(), start + static_cast<std::size_t>(batch_size));
      const Batch batch = Batch::from_masked({masked.begin() + static_cast<std::ptrdiff_t>(start),
                                              masked.begin() + static_cast<std::ptrdiff_t>(end)});
      Tape tape;
      auto out = model.forward(tape, batch);
      Var ce = ad::masked_cross_entropy(tape, out.logits, batch.target_rows, batch.targets);
      loss_sum += tape.scalar(ce) * static_cast<double>(batch.targets.size());
      rec.token_count += static_cast<long>(batch.targets.size());
      rec.realized_pairs += out.routing.total_pairs();
      k_sum += out.routing.realized_k(L, E) * static_cast<double>(end - start);
    }
    rec.mean_loss = loss_sum / static_cast<double>(rec.token_count);
    rec.realized_k = k_sum / static_cast<double>(masked.size());
    records.push_back(rec);
  }
  return records;
}

double pooled_loss(const std::vector<LossRecord>& records) {
  double sum = 0.0;
  double count = 0.0;
  for (const auto& r : records) {
    sum += r.mean_loss * static_cast<double>(r.token_count);
    count += static_cast<double>(r.token_count);
  }
  return count > 0.0 ? sum / count : 0.0;
}

// --- Generation --------------------------------------------------------------

double DenoiseSchedule::at(int t) const {
  if (gamma) return gamma(t, n_steps);
  return static_cast<double>(t) / n_steps;
}

Sequence generate(DiffusionModel& model, const Sequence& prompt, int length,
                  const DenoiseSchedule& schedule,
                  const std::function<void(int, const Sequence&)>& on_step) {
  const auto& cfg = model.config();
  if (length > cfg.max_seq_len || static_cast<int>(prompt.size()) > length || schedule.n_steps < 1) {
    throw Error(ErrorKind::kInvalidInput, "prompt/length/schedule incompatible with the model");
  }
  const int mask_id = cfg.mask_token_id();
  const int free = length - static_cast<int>(prompt.size());
  Sequence seq(static_cast<std::size_t>(length), mask_id);
  std::copy(prompt.begin(), prompt.end(), seq.begin());

  for (int t = schedule.n_steps; t >= 1; --t) {
    std::vector<int> masked;
    for (int i = static_cast<int>(prompt.size()); i < length; ++i) {
      if (seq[static_cast<std::size_t>(i)] == mask_id) masked.push_back(i);
    }
    const int target = t == 1 ? 0 : std::clamp(masked_count(std::clamp(schedule.at(t - 1), 0.0, 1.0), free), 0,
                                               static_cast<int>(masked.size()));
    const int reveal = static_cast<int>(masked.size()) - target;
    if (reveal > 0) {
      Batch batch;
      batch.n_seq = 1;
      batch.seq_len = length;
      batch.tokens = seq;
      batch.positions.resize(static_cast<std::size_t>(length));
      std::iota(batch.positions.begin(), batch.positions.end(), 0);
      batch.mask_ratio = {static_cast<double>(masked.size()) / length};
      Tape tape;
      const Matrix& logits = tape.value(model.forward(tape, batch).logits);

      struct Candidate {
        int pos;
        int token;
        double confidence;
      };
      std::vector<Candidate> cands;
      for (int pos : masked) {
        auto row = logits.row(pos);
        int best = -1;
        double best_v = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < cfg.vocab_size; ++v) {
          if (v != mask_id && row(v) > best_v) {
            best_v = row(v);
            best = v;
          }
        }
        double z = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) {
          if (v != mask_id) z += std::exp(row(v) - best_v);
        }
        cands.push_back({pos, best, 1.0 / z});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        return a.confidence > b.confidence;
      });
      for (int q = 0; q < reveal; ++q) {
        seq[static_cast<std::size_t>(cands[static_cast<std::size_t>(q)].pos)] =
            cands[static_cast<std::size_t>(q)].token;
      }
    }
    if (on_step) on_step(t, seq);
  }
  return seq;
}

// --- Gradient check ----------------------------------------------------------

GradCheckReport grad_check(DiffusionModel& model, const Batch& batch, double epsilon,
                           int n_coordinates, std::uint64_t seed, double tolerance) {
  RoutingTrace frozen;
  model.zero_grad();
  {
    Tape tape;
    auto out = model.forward(tape, batch);
    tape.backward(model.loss(tape, out, batch));
    frozen = std::move(out.routing);
  }
  ForwardOptions opts;
  opts.frozen = &frozen;
  auto eval_loss = [&]() {
    Tape tape;
    auto out = model.forward(tape, batch, opts);
    return tape.scalar(model.loss(tape, out, batch));
  };

  // Coordinates come from four groups in turn: router, routed experts,
  // attention projections, and embedding rows of tokens in the batch.
  std::vector<std::vector<std::pair<std::size_t, Eigen::Index>>> groups(4);
  std::vector<bool> used_token(static_cast<std::size_t>(model.config().vocab_size), false);
  for (int tok : batch.tokens) used_token[static_cast<std::size_t>(tok)] = true;
  auto& params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].name;
    int group = -1;
    if (name.find(".router") != std::string::npos) {
      group = 0;
    } else if (name.find(".expert") != std::string::npos) {
      group = 1;
    } else if (name.find(".attn.") != std::string::npos) {
      group = 2;
    } else if (name == "tok_emb" || name == "pos_emb") {
      group = 3;
    }
    if (group < 0) continue;
    const auto& v = params[p].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (name == "tok_emb" && !used_token[static_cast<std::size_t>(i / v.cols())]) continue;
      if (name == "pos_emb" && i / v.cols() >= batch.seq_len) continue;
      groups[static_cast<std::size_t>(group)].emplace_back(p, i);
    }
  }

  Rng rng(seed);
  GradCheckReport report;
  const char* names[] = {"router", "expert", "attention", "embedding"};
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (!groups[g].empty()) report.groups_covered.emplace_back(names[g]);
  }
  for (int c = 0; c < n_coordinates; ++c) {
    auto& group = groups[static_cast<std::size_t>(c) % groups.size()];
    if (group.empty()) continue;
    const auto [p, i] = group[rng.below(group.size())];
    double& theta = params[p].value.data()[i];
    const double analytic = params[p].grad.data()[i];
    const double saved = theta;
    theta = saved + epsilon;
    const double up = eval_loss();
    theta = saved - epsilon;
    const double down = eval_loss();
    theta = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double abs_err = std::abs(analytic - numeric);
    // Relative to the larger magnitude; a floor keeps rounding noise on
    // near-zero gradients from dominating.
    const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_relative_error = std::max(report.max_relative_error, rel);
    ++report.coordinates;
  }
  if (report.max_relative_error > tolerance) {
    std::ostringstream os;
    os << "max relative error " << report.max_relative_error << " exceeds " << tolerance;
    throw Error(ErrorKind::kGradientCheckFailed, os.str());
  }
  return report;
}

// --- Retrofit ----------------------------------------------------------------

DiffusionModel retrofit_router(const DiffusionModel& model, std::optional<CapacitySchedule> schedule) {
  const auto& rc = model.config().routing;
  if (rc.policy != RoutingPolicy::kTokenChoice) {
    throw Error(ErrorKind::kInvalidInput, "retrofit expects a token-choice model");
  }
  DiffusionModel out = model;
  RoutingConfig ec;
  ec.policy = RoutingPolicy::kExpertChoice;
  ec.tc = rc.tc;
  ec.ec_k = rc.tc.k;
  ec.schedule = std::move(schedule);
  out.set_routing(std::move(ec));
  return out;
}

}  // namespace ecdlm
