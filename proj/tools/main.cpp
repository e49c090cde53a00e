#include <iostream>

#include "convoher2/cli.hpp"

int main(int argc, char** argv) {
  return convoher2::run_cli(argc, argv, std::cout, std::cerr, convoher2::current_environment());
}
