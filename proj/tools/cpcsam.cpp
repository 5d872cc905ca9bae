#include "cpcsam/cli.hpp"

int main(int argc, char** argv) { return cpcsam::cli::run(argc, argv); }
