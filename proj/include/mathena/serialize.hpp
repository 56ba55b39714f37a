#pragma once

#include <iosfwd>
#include <string>

#include "mathena/tensor.hpp"

namespace mathena {

// Flat binary container: magic "MTEN", version u8, rank u8,
// shape as u32 little-endian list, then f32 little-endian payload.
void write_mten(std::ostream& os, const Tensor& t);
Tensor read_mten(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace mathena
