#pragma once

#include <string>
#include <vector>

#include "dasnet/common.hpp"

namespace dasnet {

struct NamedTensor {
    std::string name;
    Shape4 shape;
    std::vector<float> values;
};

// Binary little-endian container: magic "DSV2", u32 format version, u32
// tensor count; per tensor u16 name length, UTF-8 name, 4 x u32 dims,
// raw IEEE-754 32-bit floats. Round-trips bit-exactly.
void save_weights(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_weights(const std::string& path);

constexpr std::uint32_t kWeightsFormatVersion = 1;

}  // namespace dasnet
