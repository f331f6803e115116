#include <gtest/gtest.h>

#include <sstream>

#include "ecdlm/error.h"
#include "ecdlm/io.h"

using namespace ecdlm;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kInvalidInput;
}

}  // namespace

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(20.0), "20");
  EXPECT_EQ(format_double(1e-32), "1e-32");
  for (double v : {1.0 / 3.0, 2.718281828459045, -7.25e100}) EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(Json, ScheduleRoundTrip) {
  CapacitySchedule s{SchedulerKind::kGaussianReverse, 3, 17, 0.3, 9};
  const auto back = schedule_from_json(to_json(s));
  EXPECT_EQ(back.kind, s.kind);
  EXPECT_EQ(back.k_min, 3);
  EXPECT_EQ(back.k_max, 17);
  EXPECT_EQ(back.sigma, 0.3);
  EXPECT_EQ(back.k_static, 9);
}

TEST(Json, ScheduleErrors) {
  EXPECT_EQ(kind_of([] { schedule_from_json(Json{{"kind", "linear"}, {"kmin", 2}}); }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of([] { schedule_from_json(Json{{"kind", "spline"}}); }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of([] { schedule_from_json(Json{{"kind", "linear"}, {"k_min", 40}}); }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of([] { schedule_from_json(Json{{"k_min", "two"}}); }), ErrorKind::kInvalidConfig);
}

TEST(Json, TcRoundTripIncludingDropless) {
  TcConfig c;
  c.k = 3;
  c.balance = BalanceMode::kLossFreeBias;
  c.bias_update_rate = 0.01;
  auto back = tc_config_from_json(to_json(c));
  EXPECT_EQ(back.k, 3);
  EXPECT_FALSE(back.capacity_factor.has_value());
  EXPECT_EQ(back.balance, BalanceMode::kLossFreeBias);
  EXPECT_EQ(back.bias_update_rate, 0.01);
  c.capacity_factor = 1.25;
  back = tc_config_from_json(to_json(c));
  EXPECT_EQ(back.capacity_factor, 1.25);
}

TEST(Json, ModelConfigRoundTrip) {
  ModelConfig c;
  c.n_layers = 3;
  c.routing.policy = RoutingPolicy::kTokenChoice;
  c.routing.tc.k = 2;
  c.routing.schedule = CapacitySchedule{SchedulerKind::kCosine, 1, 5, 0.22, 3};
  const auto j = to_json(c);
  const auto back = model_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.routing.policy, RoutingPolicy::kTokenChoice);
  EXPECT_EQ(back.routing.schedule->kind, SchedulerKind::kCosine);
}

TEST(Json, ModelConfigRejectsUnknownKeysAndBadValues) {
  auto j = to_json(ModelConfig{});
  j["hidden"] = 12;
  EXPECT_EQ(kind_of([&] { model_config_from_json(j); }), ErrorKind::kInvalidConfig);
  j = to_json(ModelConfig{});
  j["n_heads"] = 5;  // 64 is not divisible by 5
  EXPECT_EQ(kind_of([&] { model_config_from_json(j); }), ErrorKind::kInvalidConfig);
  j = to_json(ModelConfig{});
  j["routing"]["policy"] = "random";
  EXPECT_EQ(kind_of([&] { model_config_from_json(j); }), ErrorKind::kInvalidConfig);
}

TEST(Json, TrainConfigRoundTripAndDefaults) {
  TrainConfig t;
  t.seed = 99;
  t.learning_rate = 1e-3;
  const auto back = train_config_from_json(to_json(t));
  EXPECT_EQ(to_json(back), to_json(t));
  const auto defaults = train_config_from_json(Json::object());
  EXPECT_EQ(defaults.beta1, 0.9);
  EXPECT_EQ(defaults.beta2, 0.95);
}

TEST(Json, AssignmentLayout) {
  const auto a = route_ec(example_6x3_scores(), EcConfig{2});
  const Json j = to_json(a);
  EXPECT_EQ(j["policy_tag"], "ec(c=2)");
  EXPECT_EQ(j["pairs"].size(), 6u);
  EXPECT_EQ(j["loads"], Json::array({2, 2, 2}));
  EXPECT_TRUE(j["dropped"].is_array());
}

TEST(BalanceMode, NamesAndAliases) {
  EXPECT_EQ(parse_balance_mode("aux"), BalanceMode::kAuxLoss);
  EXPECT_EQ(parse_balance_mode("loss_free_bias"), BalanceMode::kLossFreeBias);
  EXPECT_EQ(parse_balance_mode(std::string(to_string(BalanceMode::kNone))), BalanceMode::kNone);
  EXPECT_EQ(kind_of([] { parse_balance_mode("switch"); }), ErrorKind::kInvalidConfig);
}

TEST(Csv, SplitTrims) {
  EXPECT_EQ(split_csv_line(" a, b ,c\r"), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(split_csv_line("x,,"), (std::vector<std::string>{"x", "", ""}));
}

TEST(LossTraceCsv, RoundTrip) {
  const std::vector<LossRecord> recs{{0, 0, 3.25, 120, 2.0, 4096}, {25, 3, 0.1 + 0.2, 7, 1.5, 10}};
  std::stringstream ss;
  write_loss_trace(ss, recs);
  const auto back = read_loss_trace(ss, "t.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].step, recs[i].step);
    EXPECT_EQ(back[i].bin, recs[i].bin);
    EXPECT_EQ(back[i].mean_loss, recs[i].mean_loss);
    EXPECT_EQ(back[i].token_count, recs[i].token_count);
    EXPECT_EQ(back[i].realized_k, recs[i].realized_k);
    EXPECT_EQ(back[i].realized_pairs, recs[i].realized_pairs);
  }
}

TEST(LossTraceCsv, ColumnOrderFromHeaderAndOptionalColumns) {
  std::stringstream ss("token_count,mean_loss,bin,step\n5,2.5,1,10\n");
  const auto recs = read_loss_trace(ss, "t.csv");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].step, 10);
  EXPECT_EQ(recs[0].bin, 1);
  EXPECT_EQ(recs[0].mean_loss, 2.5);
  EXPECT_EQ(recs[0].token_count, 5);
}

TEST(LossTraceCsv, ParseErrorsNameTheLine) {
  std::stringstream bad("step,bin,mean_loss,token_count\n1,0,2.0,4\n2,0,abc,4\n");
  try {
    read_loss_trace(bad, "trace.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParseError);
    EXPECT_NE(std::string(e.what()).find("trace.csv:3"), std::string::npos) << e.what();
  }
  std::stringstream short_row("step,bin,mean_loss,token_count\n1,0,2.0\n");
  EXPECT_EQ(kind_of([&] { read_loss_trace(short_row, "x"); }), ErrorKind::kParseError);
  std::stringstream no_header("");
  EXPECT_EQ(kind_of([&] { read_loss_trace(no_header, "x"); }), ErrorKind::kParseError);
  std::stringstream missing_col("step,bin,token_count\n");
  EXPECT_EQ(kind_of([&] { read_loss_trace(missing_col, "x"); }), ErrorKind::kParseError);
}

TEST(ConvergenceCsv, MissingCellsWriteNA) {
  ConvergenceReport r;
  r.bin_count = 1;
  r.stages = StageSpec{{{10, 20}}};
  r.cells.resize(1);
  r.cells[0].n_points = 2;
  std::stringstream ss;
  write_convergence(ss, r);
  EXPECT_EQ(ss.str(), "bin,stage_start,stage_end,eta,r2,n\n0,10,20,NA,NA,2\n");
}

TEST(FlopsCsv, Layout) {
  std::stringstream ss;
  write_flops_report(ss, {FlopsRow{SchedulerKind::kLinear, 0.5, 20.0, 0.0, false}});
  EXPECT_EQ(ss.str(), "kind,expected_s,expected_k,delta\nlinear,0.5,20,0\n");
}

TEST(ScoreMatrixCsv, HeaderSkippedAndErrors) {
  std::stringstream ss("e0,e1\n0.5,1\n-2,3e-1\n");
  const auto s = read_score_matrix(ss, "s.csv");
  EXPECT_EQ(s.n_tokens(), 2u);
  EXPECT_EQ(s(1, 1), 0.3);
  std::stringstream ragged("1,2\n3\n");
  EXPECT_EQ(kind_of([&] { read_score_matrix(ragged, "r.csv"); }), ErrorKind::kParseError);
  std::stringstream nonfinite("1,nan\n");
  EXPECT_EQ(kind_of([&] { read_score_matrix(nonfinite, "n.csv"); }), ErrorKind::kParseError);
  std::stringstream empty("a,b\n");
  EXPECT_EQ(kind_of([&] { read_score_matrix(empty, "e.csv"); }), ErrorKind::kParseError);
}

TEST(LoadStatsCsv, Layout) {
  LoadStats s;
  s.loads = {1, 4, 1};
  s.max_over_mean = 2;
  s.load_std = 1.5;
  std::stringstream ss;
  write_load_stats(ss, {s});
  EXPECT_EQ(ss.str(), "layer,expert_loads,drop_ratio,max_over_mean,load_std\n0,1;4;1,0,2,1.5\n");
}
