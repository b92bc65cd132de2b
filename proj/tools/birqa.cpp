#include "birqa/cli.hpp"

int main(int argc, char** argv) { return birqa::cli::run(argc, argv); }
