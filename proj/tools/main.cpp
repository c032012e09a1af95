#include "cli/commands.hpp"

int main(int argc, char** argv) { return lavi::cli::run(argc, argv); }
