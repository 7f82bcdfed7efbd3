#include "fixnoise/cli.hpp"

int main(int argc, char** argv) { return fixnoise::run_cli(argc, argv); }
