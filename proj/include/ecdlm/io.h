#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecdlm/analysis.h"
#include "ecdlm/cluster_sim.h"
#include "ecdlm/model.h"
#include "ecdlm/routing.h"
#include "ecdlm/scheduler.h"
#include "ecdlm/trainer.h"

namespace ecdlm {

using Json = nlohmann::ordered_json;

// Shortest representation that parses back to the same double.
std::string format_double(double v);

// --- JSON --------------------------------------------------------------------
// Readers take defaults for absent keys and reject unknown ones.

Json to_json(const CapacitySchedule& s);
CapacitySchedule schedule_from_json(const Json& j);
Json to_json(const TcConfig& c);
TcConfig tc_config_from_json(const Json& j);
Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j);
// {policy_tag, pairs: [[token, expert, gate], ...], loads, dropped}
Json to_json(const RoutingAssignment& a);

std::string_view to_string(BalanceMode mode);
BalanceMode parse_balance_mode(const std::string& name);

// --- CSV ---------------------------------------------------------------------

// Splits a line on commas and trims surrounding whitespace from each field.
std::vector<std::string> split_csv_line(const std::string& line);

void write_loss_trace(std::ostream& os, const std::vector<LossRecord>& records);
// `source` names the input in parse-error messages.
std::vector<LossRecord> read_loss_trace(std::istream& is, const std::string& source);

// bin,stage_start,stage_end,eta,r2,n with NA for missing cells.
void write_convergence(std::ostream& os, const ConvergenceReport& report);
// bin,stage_start,stage_end,ratio with NA where either side is missing.
void write_eta_ratio(std::ostream& os, const ConvergenceReport& shape,
                     const std::vector<std::vector<std::optional<double>>>& ratio);

void write_flops_report(std::ostream& os, const std::vector<FlopsRow>& rows);
void write_sim_results(std::ostream& os, const std::vector<SimResult>& rows);
// layer,expert_loads,drop_ratio,max_over_mean,load_std; loads are ';'-joined.
void write_load_stats(std::ostream& os, const std::vector<LoadStats>& per_layer);

// Numeric rows, one token per line. An optional header line (first field not
// a number) is skipped.
ScoreMatrix read_score_matrix(std::istream& is, const std::string& source);

}  // namespace ecdlm
