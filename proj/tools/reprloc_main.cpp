#include "reprloc/cli.hpp"

int main(int argc, char** argv) { return reprloc::cli::run(argc, argv); }
