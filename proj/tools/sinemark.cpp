#include <iostream>

#include "sinemark/cli.hpp"

int main(int argc, char** argv) { return sinemark::cli::run(argc, argv, std::cout, std::cerr); }
