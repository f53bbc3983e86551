#include "octloc/cli.hpp"

int main(int argc, char** argv) { return octloc::run_cli(argc, argv); }
