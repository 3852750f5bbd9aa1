#include "alft/cli.hpp"

int main(int argc, char** argv) { return alft::cli::dispatch(argc, argv); }
