#include <iostream>

#include "loopeval/cli/cli.hpp"

int main(int argc, char** argv) { return loopeval::cli::run(argc, argv, std::cout, std::cerr); }
