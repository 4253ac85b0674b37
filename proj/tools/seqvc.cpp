#include <iostream>
#include <string>
#include <vector>

#include "seqvc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return seqvc::dispatch(args, std::cout, std::cerr);
}
