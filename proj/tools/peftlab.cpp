#include <iostream>
#include <string>
#include <vector>

#include "peftlab/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return peftlab::dispatch(args, std::cout, std::cerr);
}
