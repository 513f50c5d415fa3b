#include "commands.hpp"

int main(int argc, char** argv) { return uvflow::cli::dispatch(argc, argv); }
