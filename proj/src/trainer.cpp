#include "ecdlm/trainer.h"

#include <cmath>
#include <numeric>

#include "ecdlm/error.h"

namespace ecdlm {

void TrainConfig::validate() const {
  if (batch_size < 1 || total_steps < 0 || eval_interval < 1 || eval_samples_per_bin < 1 ||
      n_train_sequences < 1 || n_eval_sequences < 1 || seq_len < 1) {
    throw Error(ErrorKind::kInvalidConfig, "train sizes must be positive");
  }
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0) || !(adam_eps > 0.0)) {
    throw Error(ErrorKind::kInvalidConfig, "learning_rate/weight_decay/adam_eps out of range");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorKind::kInvalidConfig, "adam betas must lie in [0, 1)");
  }
}

AdamW::AdamW(const std::vector<ad::Parameter>& params, double lr, double beta1, double beta2,
             double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params) {
    m_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(std::vector<ad::Parameter>& params) {
  if (lr_ == 0.0) {
    ++t_;
    return;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
    if (weight_decay_ > 0.0) p.value *= 1.0 - lr_ * weight_decay_;
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

std::pair<Dataset, Dataset> make_splits(const TrainConfig& config, int vocab_size) {
  Rng root(config.seed);
  const MarkovChain chain = MarkovChain::random(root.split(1).next_u64(), vocab_size - 1);
  return {generate_corpus(chain, root.split(2).next_u64(), config.n_train_sequences, config.seq_len),
          generate_corpus(chain, root.split(3).next_u64(), config.n_eval_sequences, config.seq_len)};
}

Trainer new_trainer(const ModelConfig& model, const TrainConfig& train) {
  return Trainer(DiffusionModel(model, Rng(train.seed).split(6).next_u64()), train);
}

Trainer::Trainer(DiffusionModel model, TrainConfig config)
    : model_(std::move(model)), config_(config), rng_(Rng(config.seed).split(4)) {
  config_.validate();
  if (config_.seq_len > model_.config().max_seq_len) {
    throw Error(ErrorKind::kInvalidConfig, "seq_len exceeds max_seq_len");
  }
  std::tie(train_, eval_) = make_splits(config_, model_.config().vocab_size);
  adam_ = AdamW(model_.parameters(), config_.learning_rate, config_.beta1, config_.beta2,
                config_.adam_eps, config_.weight_decay);
  reshuffle();
}

void Trainer::set_total_steps(int total_steps) {
  if (total_steps < 0) throw Error(ErrorKind::kInvalidConfig, "total_steps must be >= 0");
  config_.total_steps = total_steps;
}

void Trainer::reshuffle() {
  order_.resize(train_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[rng_.below(i)]);
  }
  cursor_ = 0;
}

void Trainer::restore_position(long step, long epoch, std::size_t cursor,
                               std::vector<std::size_t> order) {
  if (order.size() != train_.size() || cursor > order.size()) {
    throw Error(ErrorKind::kInvalidInput, "data order does not match the corpus");
  }
  step_ = step;
  epoch_ = epoch;
  cursor_ = cursor;
  order_ = std::move(order);
}

Batch Trainer::next_batch() {
  const int B = config_.batch_size;
  // Stratified ratios: each sequence's r is marginally U(0,1), and the batch
  // covers every 1/B stratum once.
  std::vector<int> strata(static_cast<std::size_t>(B));
  std::iota(strata.begin(), strata.end(), 0);
  for (std::size_t i = strata.size(); i > 1; --i) {
    std::swap(strata[i - 1], strata[rng_.below(i)]);
  }
  std::vector<MaskedSequence> seqs;
  for (int s = 0; s < B; ++s) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const Sequence& seq = train_[order_[cursor_++]];
    const double r = (strata[static_cast<std::size_t>(s)] + rng_.uniform_open()) / B;
    seqs.push_back(apply_mask(seq, r, rng_, model_.config().mask_token_id()));
  }
  return Batch::from_masked(seqs);
}

StepResult Trainer::train_step() { return train_step(next_batch()); }

StepResult Trainer::train_step(const Batch& batch) {
  model_.zero_grad();
  ad::Tape tape;
  // Batches come from the corpus, so invalid input here means the weights
  // have blown up (router scores overflow before the loss does).
  auto out = [&] {
    try {
      return model_.forward(tape, batch);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInvalidInput) throw;
      throw Error(ErrorKind::kTrainingDiverged, "step " + std::to_string(step_ + 1) + ": " + e.what());
    }
  }();
  ad::Var loss = model_.loss(tape, out, batch);
  StepResult result;
  result.loss = tape.scalar(loss);
  if (!std::isfinite(result.loss)) {
    throw Error(ErrorKind::kTrainingDiverged, "non-finite loss at step " + std::to_string(step_ + 1));
  }
  tape.backward(loss);
  adam_.step(model_.parameters());
  // catch blow-ups here, otherwise the next forward fails inside routing
  for (const auto& p : model_.parameters()) {
    if (!p.value.allFinite()) {
      throw Error(ErrorKind::kTrainingDiverged,
                  "non-finite parameter '" + p.name + "' after step " + std::to_string(step_ + 1));
    }
  }

  const auto& cfg = model_.config();
  for (int l = 0; l < cfg.n_layers; ++l) {
    result.layer_stats.push_back(out.routing.layer_stats(l, batch.seq_len, cfg.n_experts));
  }
  result.routed_pairs = out.routing.total_pairs();

  if (cfg.routing.policy == RoutingPolicy::kTokenChoice &&
      cfg.routing.tc.balance == BalanceMode::kLossFreeBias) {
    auto& biases = model_.router_bias();
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::vector<int> loads(static_cast<std::size_t>(cfg.n_experts), 0);
      for (const auto& a : out.routing.assignments[static_cast<std::size_t>(l)]) {
        for (std::size_t j = 0; j < loads.size(); ++j) loads[j] += a.requested_load[j];
      }
      biases[static_cast<std::size_t>(l)] =
          loss_free_bias_update(std::move(biases[static_cast<std::size_t>(l)]), loads);
    }
  }
  result.step = ++step_;
  return result;
}

std::vector<LossRecord> Trainer::evaluate() {
  auto records = evaluate_per_bin(model_, eval_, config_.eval_samples_per_bin,
                                  Rng(config_.seed).split(5).next_u64(), config_.batch_size);
  for (auto& r : records) r.step = step_;
  return records;
}

std::vector<LossRecord> Trainer::run(const std::function<void(const StepResult&)>& on_step) {
  std::vector<LossRecord> trace;
  if (step_ == 0) trace = evaluate();
  while (step_ < config_.total_steps) {
    const StepResult r = train_step();
    if (on_step) on_step(r);
    if (step_ % config_.eval_interval == 0 || step_ == config_.total_steps) {
      auto recs = evaluate();
      trace.insert(trace.end(), recs.begin(), recs.end());
    }
  }
  return trace;
}

}  // namespace ecdlm
