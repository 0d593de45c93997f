#include "depo/cli.hpp"

int main(int argc, char** argv) { return depo::cli::dispatch(argc, argv); }
