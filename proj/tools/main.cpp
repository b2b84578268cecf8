#include <iostream>

#include "collabdqn/cli.hpp"

int main(int argc, char** argv) { return collabdqn::cli::run(argc, argv, std::cout, std::cerr); }
