#include <iostream>

#include "urbanst/cli.hpp"

int main(int argc, char** argv) { return urbanst::cli::run_cli(argc, argv, std::cout, std::cerr); }
