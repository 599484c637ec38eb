// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "mambamoe/cli.hpp"

int main(int argc, char** argv) { return mambamoe::run_cli(argc, argv, std::cout, std::cerr); }
