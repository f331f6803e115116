#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ecdlm/checkpoint.h"
#include "ecdlm/error.h"
#include "ecdlm/trainer.h"

using namespace ecdlm;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.hidden_dim = 16;
  c.n_heads = 2;
  c.n_experts = 4;
  c.expert_ffn_dim = 8;
  c.n_shared_experts = 1;
  c.shared_ffn_dim = 16;
  c.vocab_size = 12;
  c.max_seq_len = 16;
  c.routing.ec_k = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 8;
  t.total_steps = 20;
  t.eval_interval = 10;
  t.eval_samples_per_bin = 8;
  t.n_train_sequences = 40;
  t.n_eval_sequences = 8;
  t.seq_len = 16;
  t.seed = 3;
  return t;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ecdlm_test_" + name)).string();
}

std::vector<double> losses(Trainer& tr, int steps) {
  std::vector<double> out;
  for (int i = 0; i < steps; ++i) out.push_back(tr.train_step().loss);
  return out;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig t = tiny_train();
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), Error);
  t = tiny_train();
  t.beta2 = 1.0;
  EXPECT_THROW(t.validate(), Error);
  t = tiny_train();
  t.seq_len = 32;  // longer than max_seq_len
  EXPECT_THROW(new_trainer(tiny_model(), t), Error);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps).
  std::vector<ad::Parameter> p{{"w", (ad::Matrix(1, 2) << 1.0, -1.0).finished()}};
  p[0].grad << 0.5, -2.0;
  AdamW opt(p, 0.1, 0.9, 0.95, 1e-12, 0.0);
  opt.step(p);
  EXPECT_NEAR(p[0].value(0, 0), 0.9, 1e-9);
  EXPECT_NEAR(p[0].value(0, 1), -0.9, 1e-9);
  EXPECT_EQ(opt.t(), 1);
}

TEST(AdamW, WeightDecayIsDecoupled) {
  std::vector<ad::Parameter> p{{"w", (ad::Matrix(1, 1) << 2.0).finished()}};
  p[0].grad.setZero();
  AdamW opt(p, 0.1, 0.9, 0.95, 1e-8, 0.5);
  opt.step(p);
  EXPECT_NEAR(p[0].value(0, 0), 2.0 * (1.0 - 0.05), 1e-12);
}

TEST(Trainer, StratifiedMaskRatiosCoverEveryStratum) {
  Trainer tr = new_trainer(tiny_model(), tiny_train());
  for (int rep = 0; rep < 5; ++rep) {
    const Batch b = tr.next_batch();
    std::vector<int> strata;
    for (double r : b.mask_ratio) {
      EXPECT_GT(r, 0.0);
      EXPECT_LT(r, 1.0);
      strata.push_back(static_cast<int>(r * 8));
    }
    std::sort(strata.begin(), strata.end());
    EXPECT_EQ(strata, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  }
}

TEST(Trainer, EpochVisitsEverySequenceOnce) {
  Trainer tr = new_trainer(tiny_model(), tiny_train());
  const auto order = tr.order();
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  for (int i = 0; i < 5; ++i) tr.next_batch();  // 40 sequences at batch 8
  EXPECT_EQ(tr.epoch(), 0);
  tr.next_batch();
  EXPECT_EQ(tr.epoch(), 1);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  TrainConfig t = tiny_train();
  t.learning_rate = 0.0;
  Trainer tr = new_trainer(tiny_model(), t);
  const auto before = tr.model().checksum();
  losses(tr, 3);
  EXPECT_EQ(tr.model().checksum(), before);
}

TEST(Trainer, SameSeedSameTrajectory) {
  Trainer a = new_trainer(tiny_model(), tiny_train());
  Trainer b = new_trainer(tiny_model(), tiny_train());
  EXPECT_EQ(losses(a, 6), losses(b, 6));
  EXPECT_EQ(a.model().checksum(), b.model().checksum());
  TrainConfig other = tiny_train();
  other.seed = 4;
  Trainer c = new_trainer(tiny_model(), other);
  EXPECT_NE(losses(c, 6), losses(a, 6));
}

TEST(Trainer, LossDecreasesOverFiveHundredSteps) {
  TrainConfig t = tiny_train();
  t.total_steps = 500;
  Trainer tr = new_trainer(tiny_model(), t);
  const double before = pooled_loss(tr.evaluate());
  tr.run();
  const double after = pooled_loss(tr.evaluate());
  EXPECT_LT(after, before);
  EXPECT_LT(after, std::log(11.0));
}

TEST(Trainer, RunEvaluatesAtStartIntervalAndEnd) {
  TrainConfig t = tiny_train();
  t.total_steps = 25;
  Trainer tr = new_trainer(tiny_model(), t);
  int callbacks = 0;
  const auto trace = tr.run([&](const StepResult& r) {
    ++callbacks;
    EXPECT_EQ(r.step, callbacks);
    EXPECT_EQ(r.layer_stats.size(), 1u);
    EXPECT_GT(r.routed_pairs, 0);
  });
  EXPECT_EQ(callbacks, 25);
  ASSERT_EQ(trace.size(), 4u * 4);
  const long expected_steps[] = {0, 10, 20, 25};
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].step, expected_steps[i / 4]);
    EXPECT_EQ(trace[i].bin, static_cast<int>(i % 4));
  }
}

TEST(Trainer, NonFiniteLossIsDivergence) {
  Trainer tr = new_trainer(tiny_model(), tiny_train());
  tr.model().parameter("head").value(0, 0) = std::nan("");
  try {
    tr.train_step();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTrainingDiverged);
  }
}

TEST(Trainer, LossFreeBiasUpdatesFromLoads) {
  ModelConfig m = tiny_model();
  m.routing.policy = RoutingPolicy::kTokenChoice;
  m.routing.tc.k = 1;
  m.routing.tc.balance = BalanceMode::kLossFreeBias;
  Trainer tr = new_trainer(m, tiny_train());
  const StepResult r = tr.train_step();
  const auto& bias = tr.model().router_bias()[0].biases;
  const auto& loads = r.layer_stats[0].loads;
  double mean = 0.0;
  for (int l : loads) mean += l;
  mean /= static_cast<double>(loads.size());
  for (std::size_t j = 0; j < bias.size(); ++j) {
    const double expected = loads[j] > mean ? -0.001 : (loads[j] < mean ? 0.001 : 0.0);
    EXPECT_DOUBLE_EQ(bias[j], expected);
  }
}

TEST(Checkpoint, ResumeIsBitExact) {
  const std::string path = temp_path("resume.bin");
  Trainer a = new_trainer(tiny_model(), tiny_train());
  losses(a, 7);
  save_checkpoint(a, path);
  const auto tail_a = losses(a, 8);

  Trainer b = load_checkpoint(path);
  EXPECT_EQ(b.step(), 7);
  const auto tail_b = losses(b, 8);
  EXPECT_EQ(tail_a, tail_b);
  EXPECT_EQ(a.model().checksum(), b.model().checksum());
  for (std::size_t i = 0; i < a.optimizer().first_moment().size(); ++i) {
    EXPECT_EQ(a.optimizer().first_moment()[i], b.optimizer().first_moment()[i]);
    EXPECT_EQ(a.optimizer().second_moment()[i], b.optimizer().second_moment()[i]);
  }
  std::remove(path.c_str());
}

TEST(Checkpoint, ResumeAcrossEpochBoundaryWithBias) {
  ModelConfig m = tiny_model();
  m.routing.policy = RoutingPolicy::kTokenChoice;
  m.routing.tc.k = 2;
  m.routing.tc.balance = BalanceMode::kLossFreeBias;
  const std::string path = temp_path("bias.bin");
  Trainer a = new_trainer(m, tiny_train());
  losses(a, 4);
  save_checkpoint(a, path);
  const auto tail_a = losses(a, 6);
  Trainer b = load_checkpoint(path);
  EXPECT_EQ(b.model().router_bias()[0].biases.size(), 4u);
  EXPECT_EQ(losses(b, 6), tail_a);
  EXPECT_EQ(a.model().router_bias()[0].biases, b.model().router_bias()[0].biases);
  EXPECT_EQ(a.epoch(), b.epoch());
  std::remove(path.c_str());
}

TEST(Checkpoint, LoadModelOnly) {
  const std::string path = temp_path("model.bin");
  Trainer a = new_trainer(tiny_model(), tiny_train());
  losses(a, 2);
  save_checkpoint(a, path);
  TrainConfig train;
  const DiffusionModel m = load_model(path, &train);
  EXPECT_EQ(m.checksum(), a.model().checksum());
  EXPECT_EQ(train.seed, 3u);
  EXPECT_EQ(train.batch_size, 8);
  std::remove(path.c_str());
}

TEST(Checkpoint, RejectsGarbageAndMissingFiles) {
  const std::string path = temp_path("garbage.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint at all";
  }
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParseError);
  }
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.bin")), Error);
}

TEST(Checkpoint, RejectsTruncatedFile) {
  const std::string path = temp_path("trunc.bin");
  Trainer a = new_trainer(tiny_model(), tiny_train());
  save_checkpoint(a, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParseError);
  }
  std::remove(path.c_str());
}
