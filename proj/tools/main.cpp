#include <iostream>

#include "atelier/cli.hpp"

int main(int argc, char** argv) { return atelier::run_cli(argc, argv, std::cout, std::cerr); }
