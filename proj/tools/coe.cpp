#include "coe/cli.hpp"

int main(int argc, char** argv) { return coe::cli::run(argc, argv); }
