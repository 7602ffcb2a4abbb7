#include "pnc/cli.hpp"

int main(int argc, char** argv) { return pnc::run_cli(argc, argv); }
