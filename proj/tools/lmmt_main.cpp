#include "lmmt/harness.hpp"

int main(int argc, char** argv) { return lmmt::cli_main(argc, argv); }
