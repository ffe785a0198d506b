#include <iostream>

#include "fsit/cli.hpp"

int main(int argc, char** argv) { return fsit::cli::run(argc, argv, std::cout, std::cerr); }
