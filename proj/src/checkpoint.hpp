#pragma once

#include <string>
#include <vector>

#include "nn.hpp"

namespace seqctl {

// Model container: magic + version, a JSON manifest (config, vocab hash,
// training history), then named float32 tensors in registration order, and a
// trailing fingerprint of everything before it.
struct CheckpointData {
  std::string manifest_json;
  struct Tensor {
    std::string name;
    int rows = 0, cols = 0;
    std::vector<float> values;
  };
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::string& manifest_json,
                     const nn::ParamStore& params);
CheckpointData load_checkpoint(const std::string& path);

// Copies tensors into an already-constructed store, matching by name; every
// store parameter must be present with identical shape.
void restore_params(const CheckpointData& data, nn::ParamStore& params);

uint64_t file_fingerprint(const std::string& path);

}  // namespace seqctl
