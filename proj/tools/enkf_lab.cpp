#include <iostream>
#include <string>
#include <vector>

#include "enkf/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return enkf::cli_main(args, std::cout, std::cerr);
}
