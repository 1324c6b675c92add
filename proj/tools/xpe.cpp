#include "xpe/cli.hpp"

int main(int argc, char** argv) { return xpe::cli::run(argc, argv); }
