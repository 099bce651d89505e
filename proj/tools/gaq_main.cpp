#include <iostream>

#include "gaq/harness.hpp"

int main(int argc, char** argv) { return gaq::cli_dispatch(argc, argv, std::cout, std::cerr); }
