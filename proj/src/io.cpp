#include "ecdlm/io.h"

#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>

#include "ecdlm/error.h"

namespace ecdlm {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorKind::kInvalidConfig, msg); }

void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) config_error(std::string(where) + " must be an object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) config_error(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

template <typename T>
void read_key(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error(std::string("bad value for '") + key + "'");
  }
}

}  // namespace

std::string_view to_string(BalanceMode mode) {
  switch (mode) {
    case BalanceMode::kNone: return "none";
    case BalanceMode::kAuxLoss: return "aux_loss";
    case BalanceMode::kLossFreeBias: return "loss_free_bias";
  }
  return "none";
}

BalanceMode parse_balance_mode(const std::string& name) {
  if (name == "none") return BalanceMode::kNone;
  if (name == "aux_loss" || name == "aux") return BalanceMode::kAuxLoss;
  if (name == "loss_free_bias" || name == "bias") return BalanceMode::kLossFreeBias;
  config_error("unknown balance mode '" + name + "'");
}

Json to_json(const CapacitySchedule& s) {
  return Json{{"kind", std::string(to_string(s.kind))},
              {"k_min", s.k_min},
              {"k_max", s.k_max},
              {"sigma", s.sigma},
              {"k_static", s.k_static}};
}

CapacitySchedule schedule_from_json(const Json& j) {
  reject_unknown(j, {"kind", "k_min", "k_max", "sigma", "k_static"}, "schedule");
  CapacitySchedule s;
  if (j.contains("kind")) {
    std::string name;
    read_key(j, "kind", name);
    auto kind = parse_scheduler_kind(name);
    if (!kind) config_error("unknown scheduler kind '" + name + "'");
    s.kind = *kind;
  }
  read_key(j, "k_min", s.k_min);
  read_key(j, "k_max", s.k_max);
  read_key(j, "sigma", s.sigma);
  read_key(j, "k_static", s.k_static);
  s.validate();
  return s;
}

Json to_json(const TcConfig& c) {
  Json j{{"k", c.k}};
  j["capacity_factor"] = c.capacity_factor ? Json(*c.capacity_factor) : Json(nullptr);
  j["balance"] = std::string(to_string(c.balance));
  j["aux_alpha"] = c.aux_alpha;
  j["bias_update_rate"] = c.bias_update_rate;
  return j;
}

TcConfig tc_config_from_json(const Json& j) {
  reject_unknown(j, {"k", "capacity_factor", "balance", "aux_alpha", "bias_update_rate"}, "tc");
  TcConfig c;
  read_key(j, "k", c.k);
  if (j.contains("capacity_factor") && !j.at("capacity_factor").is_null()) {
    double cf = 0.0;
    read_key(j, "capacity_factor", cf);
    c.capacity_factor = cf;
  }
  if (j.contains("balance")) {
    std::string b;
    read_key(j, "balance", b);
    c.balance = parse_balance_mode(b);
  }
  read_key(j, "aux_alpha", c.aux_alpha);
  read_key(j, "bias_update_rate", c.bias_update_rate);
  return c;
}

Json to_json(const ModelConfig& c) {
  Json routing{{"policy", c.routing.policy == RoutingPolicy::kTokenChoice ? "tc" : "ec"},
               {"tc", to_json(c.routing.tc)},
               {"ec_k", c.routing.ec_k}};
  routing["schedule"] = c.routing.schedule ? to_json(*c.routing.schedule) : Json(nullptr);
  return Json{{"n_layers", c.n_layers},
              {"hidden_dim", c.hidden_dim},
              {"n_heads", c.n_heads},
              {"n_experts", c.n_experts},
              {"expert_ffn_dim", c.expert_ffn_dim},
              {"n_shared_experts", c.n_shared_experts},
              {"shared_ffn_dim", c.shared_ffn_dim},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"init_std", c.init_std},
              {"routing", routing}};
}

ModelConfig model_config_from_json(const Json& j) {
  reject_unknown(j,
                 {"n_layers", "hidden_dim", "n_heads", "n_experts", "expert_ffn_dim",
                  "n_shared_experts", "shared_ffn_dim", "vocab_size", "max_seq_len", "init_std",
                  "routing"},
                 "model");
  ModelConfig c;
  read_key(j, "n_layers", c.n_layers);
  read_key(j, "hidden_dim", c.hidden_dim);
  read_key(j, "n_heads", c.n_heads);
  read_key(j, "n_experts", c.n_experts);
  read_key(j, "expert_ffn_dim", c.expert_ffn_dim);
  read_key(j, "n_shared_experts", c.n_shared_experts);
  read_key(j, "shared_ffn_dim", c.shared_ffn_dim);
  read_key(j, "vocab_size", c.vocab_size);
  read_key(j, "max_seq_len", c.max_seq_len);
  read_key(j, "init_std", c.init_std);
  if (j.contains("routing")) {
    const Json& r = j.at("routing");
    reject_unknown(r, {"policy", "tc", "ec_k", "schedule"}, "routing");
    if (r.contains("policy")) {
      std::string p;
      read_key(r, "policy", p);
      if (p == "tc") {
        c.routing.policy = RoutingPolicy::kTokenChoice;
      } else if (p == "ec") {
        c.routing.policy = RoutingPolicy::kExpertChoice;
      } else {
        config_error("routing policy must be 'tc' or 'ec'");
      }
    }
    if (r.contains("tc")) c.routing.tc = tc_config_from_json(r.at("tc"));
    read_key(r, "ec_k", c.routing.ec_k);
    if (r.contains("schedule") && !r.at("schedule").is_null()) {
      c.routing.schedule = schedule_from_json(r.at("schedule"));
    }
  }
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"total_steps", c.total_steps},
              {"seed", c.seed},
              {"eval_interval", c.eval_interval},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"eval_samples_per_bin", c.eval_samples_per_bin},
              {"n_train_sequences", c.n_train_sequences},
              {"n_eval_sequences", c.n_eval_sequences},
              {"seq_len", c.seq_len}};
}

TrainConfig train_config_from_json(const Json& j) {
  reject_unknown(j,
                 {"batch_size", "learning_rate", "total_steps", "seed", "eval_interval", "beta1",
                  "beta2", "adam_eps", "weight_decay", "eval_samples_per_bin", "n_train_sequences",
                  "n_eval_sequences", "seq_len"},
                 "train");
  TrainConfig c;
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "learning_rate", c.learning_rate);
  read_key(j, "total_steps", c.total_steps);
  read_key(j, "seed", c.seed);
  read_key(j, "eval_interval", c.eval_interval);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  read_key(j, "adam_eps", c.adam_eps);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "eval_samples_per_bin", c.eval_samples_per_bin);
  read_key(j, "n_train_sequences", c.n_train_sequences);
  read_key(j, "n_eval_sequences", c.n_eval_sequences);
  read_key(j, "seq_len", c.seq_len);
  c.validate();
  return c;
}

Json to_json(const RoutingAssignment& a) {
  Json pairs = Json::array();
  for (const auto& p : a.pairs) pairs.push_back(Json::array({p.token, p.expert, p.gate}));
  return Json{{"policy_tag", a.policy_tag},
              {"pairs", pairs},
              {"loads", a.per_expert_load},
              {"dropped", a.dropped_tokens}};
}

// --- CSV ---------------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

namespace {

[[noreturn]] void parse_error(const std::string& source, long line, const std::string& msg) {
  throw Error(ErrorKind::kParseError, source + ":" + std::to_string(line) + ": " + msg);
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

bool parse_integer(const std::string& s, long& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

bool blank(const std::string& line) { return line.find_first_not_of(" \t\r") == std::string::npos; }

const char* kTraceHeader = "step,bin,mean_loss,token_count,realized_k,realized_pairs";

}  // namespace

void write_loss_trace(std::ostream& os, const std::vector<LossRecord>& records) {
  os << kTraceHeader << '\n';
  for (const auto& r : records) {
    os << r.step << ',' << r.bin << ',' << format_double(r.mean_loss) << ',' << r.token_count << ','
       << format_double(r.realized_k) << ',' << r.realized_pairs << '\n';
  }
}

std::vector<LossRecord> read_loss_trace(std::istream& is, const std::string& source) {
  std::string line;
  long line_no = 0;
  std::vector<std::string> columns;
  while (std::getline(is, line)) {
    ++line_no;
    if (!blank(line)) {
      columns = split_csv_line(line);
      break;
    }
  }
  if (columns.empty()) parse_error(source, line_no, "missing header");
  const std::vector<std::string> required{"step", "bin", "mean_loss", "token_count"};
  std::vector<int> index(6, -1);
  const std::vector<std::string> all{"step", "bin", "mean_loss", "token_count", "realized_k", "realized_pairs"};
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t k = 0; k < all.size(); ++k) {
      if (columns[c] == all[k]) index[k] = static_cast<int>(c);
    }
  }
  for (std::size_t k = 0; k < required.size(); ++k) {
    if (index[k] < 0) parse_error(source, line_no, "header lacks column '" + required[k] + "'");
  }

  std::vector<LossRecord> out;
  while (std::getline(is, line)) {
    ++line_no;
    if (blank(line)) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != columns.size()) {
      parse_error(source, line_no, "expected " + std::to_string(columns.size()) + " fields, got " +
                                       std::to_string(fields.size()));
    }
    auto field = [&](std::size_t k) -> const std::string& { return fields[static_cast<std::size_t>(index[k])]; };
    LossRecord r;
    long bin = 0;
    if (!parse_integer(field(0), r.step)) parse_error(source, line_no, "bad step '" + field(0) + "'");
    if (!parse_integer(field(1), bin)) parse_error(source, line_no, "bad bin '" + field(1) + "'");
    r.bin = static_cast<int>(bin);
    if (!parse_number(field(2), r.mean_loss)) parse_error(source, line_no, "bad mean_loss '" + field(2) + "'");
    if (!parse_integer(field(3), r.token_count)) {
      parse_error(source, line_no, "bad token_count '" + field(3) + "'");
    }
    if (index[4] >= 0 && !parse_number(field(4), r.realized_k)) {
      parse_error(source, line_no, "bad realized_k '" + field(4) + "'");
    }
    if (index[5] >= 0 && !parse_integer(field(5), r.realized_pairs)) {
      parse_error(source, line_no, "bad realized_pairs '" + field(5) + "'");
    }
    out.push_back(r);
  }
  return out;
}

void write_convergence(std::ostream& os, const ConvergenceReport& report) {
  os << "bin,stage_start,stage_end,eta,r2,n\n";
  for (int b = 0; b < report.bin_count; ++b) {
    for (std::size_t s = 0; s < report.stages.stages.size(); ++s) {
      const auto& c = report.cell(b, s);
      const auto& st = report.stages.stages[s];
      os << b << ',' << st.start << ',' << st.end << ',';
      if (c.eta) {
        os << format_double(*c.eta) << ',' << format_double(c.r2);
      } else {
        os << "NA,NA";
      }
      os << ',' << c.n_points << '\n';
    }
  }
}

void write_eta_ratio(std::ostream& os, const ConvergenceReport& shape,
                     const std::vector<std::vector<std::optional<double>>>& ratio) {
  os << "bin,stage_start,stage_end,ratio\n";
  for (std::size_t b = 0; b < ratio.size(); ++b) {
    for (std::size_t s = 0; s < ratio[b].size(); ++s) {
      const auto& st = shape.stages.stages[s];
      os << b << ',' << st.start << ',' << st.end << ','
         << (ratio[b][s] ? format_double(*ratio[b][s]) : std::string("NA")) << '\n';
    }
  }
}

void write_flops_report(std::ostream& os, const std::vector<FlopsRow>& rows) {
  os << "kind,expected_s,expected_k,delta\n";
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << format_double(r.expected_s) << ',' << format_double(r.expected_k)
       << ',' << format_double(r.delta) << '\n';
  }
}

void write_sim_results(std::ostream& os, const std::vector<SimResult>& rows) {
  os << "policy,mean_step_time,throughput,load_std,drop_ratio\n";
  for (const auto& r : rows) {
    os << '"' << r.policy_tag << '"' << ',' << format_double(r.mean_step_time) << ','
       << format_double(r.throughput_tflops) << ',' << format_double(r.per_device_load_std) << ','
       << format_double(r.drop_ratio) << '\n';
  }
}

void write_load_stats(std::ostream& os, const std::vector<LoadStats>& per_layer) {
  os << "layer,expert_loads,drop_ratio,max_over_mean,load_std\n";
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const auto& s = per_layer[l];
    os << l << ',';
    for (std::size_t j = 0; j < s.loads.size(); ++j) os << (j ? ";" : "") << s.loads[j];
    os << ',' << format_double(s.drop_ratio) << ',' << format_double(s.max_over_mean) << ','
       << format_double(s.load_std) << '\n';
  }
}

ScoreMatrix read_score_matrix(std::istream& is, const std::string& source) {
  std::string line;
  long line_no = 0;
  std::vector<double> values;
  std::size_t n_cols = 0;
  std::size_t n_rows = 0;
  bool first = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (blank(line)) continue;
    const auto fields = split_csv_line(line);
    double v = 0.0;
    if (first && !parse_number(fields[0], v)) {
      first = false;
      continue;  // header
    }
    first = false;
    if (n_cols == 0) n_cols = fields.size();
    if (fields.size() != n_cols) {
      parse_error(source, line_no, "expected " + std::to_string(n_cols) + " scores, got " +
                                       std::to_string(fields.size()));
    }
    for (const auto& f : fields) {
      if (!parse_number(f, v) || !std::isfinite(v)) parse_error(source, line_no, "bad score '" + f + "'");
      values.push_back(v);
    }
    ++n_rows;
  }
  if (n_rows == 0) parse_error(source, line_no, "no score rows");
  return ScoreMatrix(n_rows, n_cols, std::move(values));
}

}  // namespace ecdlm
