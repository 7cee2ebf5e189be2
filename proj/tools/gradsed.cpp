#include "gradsed/cli.hpp"

int main(int argc, char** argv) { return gradsed::cli::run_cli(argc, argv); }
