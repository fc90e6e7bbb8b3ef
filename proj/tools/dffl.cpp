#include "cli.hpp"

int main(int argc, char** argv) { return dffl::cli::run_cli(argc, argv); }
