#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ecdlm/model.h"

namespace ecdlm {

struct TrainConfig {
  int batch_size = 16;
  double learning_rate = 3e-3;
  int total_steps = 500;
  std::uint64_t seed = 0;
  int eval_interval = 25;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int eval_samples_per_bin = 32;
  // Synthetic corpus; the chain is shared by the train and eval splits.
  int n_train_sequences = 512;
  int n_eval_sequences = 64;
  int seq_len = 64;

  void validate() const;
};

// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<ad::Parameter>& params, double lr, double beta1, double beta2,
        double eps, double weight_decay);

  void step(std::vector<ad::Parameter>& params);

  long t() const { return t_; }
  std::vector<ad::Matrix>& first_moment() { return m_; }
  std::vector<ad::Matrix>& second_moment() { return v_; }
  void set_t(long t) { t_ = t; }

 private:
  double lr_ = 0.0, beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8, weight_decay_ = 0.0;
  long t_ = 0;
  std::vector<ad::Matrix> m_, v_;
};

struct StepResult {
  long step = 0;  // step counter after the update
  double loss = 0.0;
  std::vector<LoadStats> layer_stats;
  long routed_pairs = 0;
};

// Owns the model, optimizer, data order and RNG so that a checkpoint of the
// trainer resumes bit-identically.
class Trainer {
 public:
  Trainer(DiffusionModel model, TrainConfig config);

  DiffusionModel& model() { return model_; }
  const DiffusionModel& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  // Extends or shortens the run; used when resuming or finetuning.
  void set_total_steps(int total_steps);
  const Dataset& train_data() const { return train_; }
  const Dataset& eval_data() const { return eval_; }
  AdamW& optimizer() { return adam_; }
  Rng& rng() { return rng_; }

  long step() const { return step_; }
  long epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  const std::vector<std::size_t>& order() const { return order_; }
  void restore_position(long step, long epoch, std::size_t cursor, std::vector<std::size_t> order);

  // Next batch in epoch order with one stratified mask ratio per sequence.
  Batch next_batch();
  StepResult train_step();
  StepResult train_step(const Batch& batch);

  // Per-bin evaluation on the held-out split with a fixed mask seed, stamped
  // with the current step.
  std::vector<LossRecord> evaluate();

  // Trains until total_steps, evaluating at step 0 (when starting fresh) and
  // every eval_interval steps. Returns the evaluation records.
  std::vector<LossRecord> run(const std::function<void(const StepResult&)>& on_step = nullptr);

 private:
  void reshuffle();

  DiffusionModel model_;
  TrainConfig config_;
  Dataset train_, eval_;
  AdamW adam_;
  Rng rng_;
  long step_ = 0;
  long epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

// Fresh run: the model is initialised from a stream split off the train seed.
Trainer new_trainer(const ModelConfig& model, const TrainConfig& train);

// Corpus splits for a config: a Markov chain over the non-mask tokens.
std::pair<Dataset, Dataset> make_splits(const TrainConfig& config, int vocab_size);

}  // namespace ecdlm
