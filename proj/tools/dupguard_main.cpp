#include <iostream>

#include "dupguard/cli.hpp"

int main(int argc, char** argv) { return dupguard::run_cli(argc, argv, std::cout, std::cerr); }
