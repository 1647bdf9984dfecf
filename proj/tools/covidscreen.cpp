#include <iostream>

#include "covidscreen/cli/cli.hpp"

int main(int argc, char** argv) { return covidscreen::cli::run(argc, argv, std::cout, std::cerr); }
