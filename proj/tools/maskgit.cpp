#include "maskgit/cli.hpp"

int main(int argc, char** argv) { return maskgit::cli::run(argc, argv); }
