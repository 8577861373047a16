#include "etapsi/cli.hpp"

int main(int argc, char** argv) { return etapsi::cli_main(argc, argv); }
