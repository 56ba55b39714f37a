#pragma once

#include <string>

#include "mathena/models.hpp"

namespace mathena {

std::string sha256_hex(const void* data, size_t len);

// Directory of one MTEN file per parameter plus manifest.txt with lines
// "name<TAB>dim0xdim1x...<TAB>frozen".
void save_checkpoint(const std::string& dir, const ParamStore& store);
void load_checkpoint(const std::string& dir, ParamStore& store);

}  // namespace mathena
