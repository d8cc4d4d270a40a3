#include <iostream>

#include "storm/cli.hpp"

int main(int argc, char** argv) { return storm::cli::run_command(argc, argv, std::cout, std::cerr); }
