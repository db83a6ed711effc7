#include <iostream>

#include "dlc/cli.hpp"

int main(int argc, char** argv) { return dlc::run_cli(argc, argv, std::cout, std::cerr); }
