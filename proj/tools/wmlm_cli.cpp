#include "wmlm/cli.hpp"

int main(int argc, char** argv) { return wmlm::cli::run_cli(argc, argv); }
