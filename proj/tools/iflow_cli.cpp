#include "cli.hpp"

int main(int argc, char** argv) { return iflow::cli::run(argc, argv); }
