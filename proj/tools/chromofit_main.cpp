#include <iostream>

#include "chromofit/cli.hpp"

int main(int argc, char** argv) { return chromofit::cli::main_entry(argc, argv, std::cout, std::cerr); }
