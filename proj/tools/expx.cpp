#include <iostream>

#include "expx/cli.hpp"

int main(int argc, char** argv) { return expx::cli_main(argc, argv, std::cout, std::cerr); }
