#include <iostream>

#include "miasrec/cli.hpp"

int main(int argc, char** argv) { return miasrec::cli::run(argc, argv, std::cout, std::cerr); }
