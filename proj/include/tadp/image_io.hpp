#pragma once

#include <string>

#include "tadp/tensor.hpp"

namespace tadp::img {

// PNG/JPG -> 3 x H x W float in [0, 1], RGB order.
nn::Tensor load_image_chw(const std::string& path);

// Writes a 3 x H x W (or 1 x H x W) tensor as an 8-bit image, clamping to [0, 1].
void save_image_chw(const std::string& path, const nn::Tensor& chw);

}  // namespace tadp::img
