#include "qdrift/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return qdrift::cli_main(argc, argv, std::cout, std::cerr); }
