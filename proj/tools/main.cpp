#include "dproxy/cli.hpp"

int main(int argc, char** argv) { return dproxy::cli::run(argc, argv); }
