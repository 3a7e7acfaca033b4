#include "xedit/cli.hpp"

int main(int argc, char** argv) { return xedit::run_cli(argc, argv); }
