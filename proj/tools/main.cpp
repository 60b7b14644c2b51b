#include <iostream>
#include <string>
#include <vector>

#include "equitempo/cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return equitempo::run_cli(args, std::cerr);
}
