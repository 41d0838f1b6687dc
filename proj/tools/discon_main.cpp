#include "discon/cli.hpp"
#include "discon/runtime.hpp"

#include <iostream>

int main(int argc, char** argv) {
  discon::tune_allocator();
  return discon::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
