#include "cli.hpp"

int main(int argc, char** argv) { return valler::cli::cmd_dispatch(argc, argv); }
