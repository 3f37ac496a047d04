#include "advgen/cli.hpp"

int main(int argc, char** argv) { return advgen::cli::run(argc, argv); }
