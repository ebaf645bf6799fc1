// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "matq_cli.hpp"

int main(int argc, char** argv) { return matq::cli::run(argc, argv, std::cout, std::cerr); }
