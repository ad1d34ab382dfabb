#include "physnet/cli.hpp"

int main(int argc, char** argv) { return physnet::run_cli(argc, argv); }
