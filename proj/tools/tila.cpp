#include "tila/cli.hpp"

int main(int argc, char** argv) { return tila::run(argc, argv); }
