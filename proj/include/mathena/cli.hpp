#pragma once

#include <map>
#include <string>

namespace mathena {

// Flat key=value config file; unknown keys are a hard error at use site.
std::map<std::string, std::string> read_config(const std::string& path);

int run_cli(int argc, char** argv);

}  // namespace mathena
