#include <iostream>
#include <string>
#include <vector>

#include "cliplite/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return cliplite::run(args, std::cout, std::cerr);
}
