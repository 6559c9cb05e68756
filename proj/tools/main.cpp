#include "echocotr/cli.hpp"

int main(int argc, char** argv) { return echocotr::cli_main(argc, argv); }
