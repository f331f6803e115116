#pragma once

#include <string>

#include "ecdlm/trainer.h"

namespace ecdlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic "ECDLMCKP", u32 version, u64 header length, JSON
// header (configs, counters, RNG state, tensor shapes), then raw little-endian
// doubles for parameters, Adam moments and router biases, then the data order.
void save_checkpoint(Trainer& trainer, const std::string& path);
Trainer load_checkpoint(const std::string& path);

// Reads only the model (for inference or retrofitting); the train config in
// the header is returned through `train` when non-null.
DiffusionModel load_model(const std::string& path, TrainConfig* train = nullptr);

}  // namespace ecdlm
