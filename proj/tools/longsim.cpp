#include "longsim/cli.hpp"

int main(int argc, char** argv) { return longsim::run_cli(argc, argv); }
