#include "mtdgp/cli.hpp"

int main(int argc, char** argv) { return mtdgp::cli::run(argc, argv); }
