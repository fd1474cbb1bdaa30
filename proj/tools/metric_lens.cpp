#include <iostream>

#include "metric_lens/cli.hpp"

int main(int argc, char** argv) { return mlens::cli_run(argc, argv, std::cout, std::cerr); }
