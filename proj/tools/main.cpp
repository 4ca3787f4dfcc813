#include "cli.hpp"

int main(int argc, char** argv) { return facediff::cli::main(argc, argv); }
