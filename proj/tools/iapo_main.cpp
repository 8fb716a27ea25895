#include "iapo/cli.hpp"

int main(int argc, char** argv) { return iapo::run_cli(argc, argv); }
