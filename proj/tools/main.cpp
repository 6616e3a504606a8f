#include <iostream>
#include <string>
#include <vector>

#include "d2i/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return d2i::cli::run(args, std::cout, std::cerr);
}
