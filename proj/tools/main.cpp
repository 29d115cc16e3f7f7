#include "sdsae/cli.hpp"

int main(int argc, char** argv) { return sdsae::cli::run(argc, argv); }
