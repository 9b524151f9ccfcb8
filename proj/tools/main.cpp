#include <iostream>

#include "semibmd/cli.hpp"

int main(int argc, char** argv) { return semibmd::run_cli(argc, argv, std::cout, std::cerr); }
