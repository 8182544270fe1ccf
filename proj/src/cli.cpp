#include "vsr/cli.hpp"

#include <iostream>

namespace vsr::cli {

int run(int, const char* const*) {
  std::cerr << "vsr: not wired up yet\n";
  return 2;
}

}  // namespace vsr::cli
