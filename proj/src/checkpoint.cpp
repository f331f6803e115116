#include "ecdlm/checkpoint.h"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "ecdlm/error.h"
#include "ecdlm/io.h"

namespace ecdlm {

namespace {

constexpr char kMagic[8] = {'E', 'C', 'D', 'L', 'M', 'C', 'K', 'P'};

void write_raw(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void write_matrix(std::ostream& os, const ad::Matrix& m) {
  write_raw(os, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

struct Reader {
  std::ifstream in;
  std::string path;

  void read(void* data, std::size_t n) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw Error(ErrorKind::kParseError, path + ": truncated checkpoint");
    }
  }
  void read_matrix(ad::Matrix& m) { read(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double)); }
};

Json read_header(Reader& r) {
  r.in.open(r.path, std::ios::binary);
  if (!r.in) throw Error(ErrorKind::kInvalidInput, "cannot open checkpoint " + r.path);
  char magic[8];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw Error(ErrorKind::kParseError, r.path + ": not a checkpoint");
  }
  std::uint32_t version = 0;
  r.read(&version, sizeof(version));
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kParseError, r.path + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t len = 0;
  r.read(&len, sizeof(len));
  std::string text(len, '\0');
  r.read(text.data(), len);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParseError, r.path + ": bad header: " + e.what());
  }
}

// Builds the model and fills parameters and biases from the stream.
DiffusionModel read_model(Reader& r, const Json& header) {
  DiffusionModel model(model_config_from_json(header.at("model")), 0);
  const Json& shapes = header.at("parameters");
  auto& params = model.parameters();
  if (shapes.size() != params.size()) throw Error(ErrorKind::kParseError, r.path + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Json& s = shapes[i];
    if (s.at(0).get<std::string>() != params[i].name || s.at(1).get<Eigen::Index>() != params[i].value.rows() ||
        s.at(2).get<Eigen::Index>() != params[i].value.cols()) {
      throw Error(ErrorKind::kParseError, r.path + ": parameter layout mismatch at " + params[i].name);
    }
    r.read_matrix(params[i].value);
  }
  for (auto& b : model.router_bias()) {
    r.read(b.biases.data(), b.biases.size() * sizeof(double));
  }
  return model;
}

}  // namespace

void save_checkpoint(Trainer& trainer, const std::string& path) {
  const DiffusionModel& model = trainer.model();
  Json header{{"model", to_json(model.config())},
              {"train", to_json(trainer.config())},
              {"step", trainer.step()},
              {"epoch", trainer.epoch()},
              {"cursor", trainer.cursor()},
              {"adam_t", trainer.optimizer().t()},
              {"rng", trainer.rng().state()}};
  Json shapes = Json::array();
  for (const auto& p : model.parameters()) shapes.push_back(Json::array({p.name, p.value.rows(), p.value.cols()}));
  header["parameters"] = shapes;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::kInvalidInput, "cannot write checkpoint " + path);
    write_raw(os, kMagic, sizeof(kMagic));
    const std::uint32_t version = kCheckpointVersion;
    write_raw(os, &version, sizeof(version));
    const std::uint64_t len = text.size();
    write_raw(os, &len, sizeof(len));
    write_raw(os, text.data(), text.size());
    for (const auto& p : model.parameters()) write_matrix(os, p.value);
    for (const auto& b : model.router_bias()) write_raw(os, b.biases.data(), b.biases.size() * sizeof(double));
    for (const auto& m : trainer.optimizer().first_moment()) write_matrix(os, m);
    for (const auto& v : trainer.optimizer().second_moment()) write_matrix(os, v);
    for (std::size_t idx : trainer.order()) {
      const std::uint64_t v = idx;
      write_raw(os, &v, sizeof(v));
    }
    if (!os) throw Error(ErrorKind::kInvalidInput, "failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw Error(ErrorKind::kInvalidInput, "cannot move checkpoint into place at " + path);
  }
}

Trainer load_checkpoint(const std::string& path) {
  Reader r{{}, path};
  const Json header = read_header(r);
  try {
    Trainer trainer(read_model(r, header), train_config_from_json(header.at("train")));
    for (auto& m : trainer.optimizer().first_moment()) r.read_matrix(m);
    for (auto& v : trainer.optimizer().second_moment()) r.read_matrix(v);
    trainer.optimizer().set_t(header.at("adam_t").get<long>());
    std::vector<std::size_t> order(trainer.train_data().size());
    for (auto& idx : order) {
      std::uint64_t v = 0;
      r.read(&v, sizeof(v));
      idx = static_cast<std::size_t>(v);
    }
    trainer.restore_position(header.at("step").get<long>(), header.at("epoch").get<long>(),
                             header.at("cursor").get<std::size_t>(), std::move(order));
    trainer.rng().set_state(header.at("rng").get<std::string>());
    return trainer;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParseError, path + ": bad header: " + e.what());
  }
}

DiffusionModel load_model(const std::string& path, TrainConfig* train) {
  Reader r{{}, path};
  const Json header = read_header(r);
  try {
    if (train) *train = train_config_from_json(header.at("train"));
    return read_model(r, header);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParseError, path + ": bad header: " + e.what());
  }
}

}  // namespace ecdlm
