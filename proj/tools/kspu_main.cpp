#include "kspu/cli.hpp"

int main(int argc, char** argv) { return kspu::cli::run(argc, argv); }
