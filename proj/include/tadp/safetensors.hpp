#pragma once

#include <map>
#include <string>

#include "tadp/tensor.hpp"

namespace tadp::io {

// Checkpoint container: 8-byte little-endian header length, JSON tensor
// directory, then raw F32 data. Tensor names are sorted so identical state
// always serializes to identical bytes. Writes go through a temp file and an
// atomic rename.
void save_tensors(const std::string& path, const std::map<std::string, nn::Tensor>& tensors,
                  const std::map<std::string, std::string>& metadata = {});

struct LoadedTensors {
    std::map<std::string, nn::Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

LoadedTensors load_tensors(const std::string& path);

}  // namespace tadp::io
