#include "fsirb/cli_io.hpp"

#include <iostream>

int main(int argc, char** argv) { return fsirb::cli_main(argc, argv, std::cout, std::cerr); }
