// SPDX-License-Identifier: Apache-2.0
#include "paracnn/cli.hpp"

#include <iostream>

int main(int argc, char **argv) {
  return paracnn::run_cli({argv, argv + argc}, std::cout, std::cerr);
}
